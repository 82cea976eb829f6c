"""Sliding-window causal transformer stacks with rotary position embeddings."""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

from .config import StackConfig

ROPE_BASE = 10000.0


def rope_angles(positions: torch.Tensor, dim_head: int, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    if dim_head % 2:
        raise ValueError(f"rope needs an even head dimension, got {dim_head}")
    inv_freq = ROPE_BASE ** (-torch.arange(0, dim_head, 2, dtype=torch.float64) / dim_head)
    angles = positions.to(torch.float64)[:, None] * inv_freq[None, :]
    return angles.cos().to(dtype), angles.sin().to(dtype)


def _rotate(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return out.flatten(-2)


def rope_rotate(q: torch.Tensor, k: torch.Tensor, positions) -> tuple[torch.Tensor, torch.Tensor]:
    """Rotate channel pairs (2i, 2i+1) of ``q`` and ``k`` by ``pos * base**(-2i/dim_head)``."""
    positions = torch.as_tensor(positions)
    cos, sin = rope_angles(positions, q.shape[-1], q.dtype)
    return _rotate(q, cos, sin), _rotate(k, cos, sin)


def sliding_causal_mask(t: int, window: int, device=None) -> torch.Tensor:
    """Boolean (t, t) mask; True where row i may attend column j, i.e. i - window < j <= i."""
    i = torch.arange(t, device=device)[:, None]
    j = torch.arange(t, device=device)[None, :]
    return (j <= i) & (j > i - window)


class SlidingAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int, window: int, rope: bool = True):
        super().__init__()
        self.n_heads = n_heads
        self.window = window
        self.rope = rope
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        *lead, t, dim = x.shape
        hd = dim // self.n_heads
        q, k, v = self.qkv(x).reshape(*lead, t, 3, self.n_heads, hd).unbind(-3)
        q, k, v = (z.transpose(-2, -3) for z in (q, k, v))  # (..., heads, t, hd)
        if self.rope:
            q, k = rope_rotate(q, k, torch.arange(t, device=x.device))
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        mask = sliding_causal_mask(t, self.window, x.device)
        scores = scores.masked_fill(~mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(-2, -3).reshape(*lead, t, dim)
        return self.out(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: float = 4.0):
        super().__init__()
        hidden = int(round(dim * mult))
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, cfg: StackConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.dim)
        self.attn = SlidingAttention(cfg.dim, cfg.n_heads, cfg.window, cfg.rope)
        self.norm2 = nn.LayerNorm(cfg.dim)
        self.ffn = FeedForward(cfg.dim, cfg.ffn_mult)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class TransformerStack(nn.Module):
    """Pre-norm blocks; shape preserving (..., T, dim) -> (..., T, dim)."""

    def __init__(self, cfg: StackConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.norm = nn.LayerNorm(cfg.dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise ValueError("non-finite input to transformer stack")
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


def sliding_causal_attention(x: torch.Tensor, cfg: StackConfig, module: SlidingAttention | None = None) -> torch.Tensor:
    """Single attention layer; a fresh module is built from ``cfg`` when none is given."""
    if not torch.isfinite(x).all():
        raise ValueError("non-finite input to attention")
    if module is None:
        module = SlidingAttention(cfg.dim, cfg.n_heads, cfg.window, cfg.rope).to(x.dtype)
    return module(x)


class DepthAR(nn.Module):
    """Causal transformer along the VQ-layer axis.

    Slot 0 holds a learned begin vector and slot ``l`` holds the quantized
    vector of layer ``l``; the output at slot ``l`` predicts layer ``l + 1``.
    Positions along time are processed independently.
    """

    def __init__(self, d_vq: int, num_layers: int, cfg: StackConfig):
        super().__init__()
        if num_layers < 2:
            raise ValueError("depth AR needs at least 2 VQ layers")
        self.num_layers = num_layers
        self.begin = nn.Parameter(torch.zeros(cfg.dim))
        self.inp = nn.Linear(d_vq, cfg.dim)
        self.stack = TransformerStack(cfg)
        self.head = nn.Linear(cfg.dim, d_vq)

    def forward(self, per_layer_quantized: torch.Tensor) -> torch.Tensor:
        """(..., L, d_vq) -> predictions for layers 2..L, shape (..., L - 1, d_vq)."""
        L = per_layer_quantized.shape[-2]
        if L < 2:
            raise ValueError(f"depth AR needs L >= 2, got {L}")
        inputs = self.inp(per_layer_quantized[..., : L - 1, :])
        begin = self.begin.to(inputs.dtype).expand(*inputs.shape[:-2], 1, inputs.shape[-1])
        seq = torch.cat([begin, inputs], dim=-2)
        out = self.head(self.stack(seq))
        return out[..., 1:, :]
