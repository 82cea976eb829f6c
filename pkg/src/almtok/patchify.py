"""Waveform <-> frame-sequence front-ends (Encodec-style convolutional and linear)."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import torch
from torch import nn
from torch.nn import functional as F

from .audio import AudioClip
from .config import CodecConfig, StackConfig
from .transformer import TransformerStack


@dataclass
class FrameSequence:
    data: torch.Tensor  # (T, d) or (B, T, d)
    frame_rate: Fraction

    @property
    def num_frames(self) -> int:
        return self.data.shape[-2]


def num_frames(n: int, patch_size: int) -> int:
    return -(-n // patch_size)


def pad_to_patch(x: torch.Tensor, patch_size: int) -> tuple[torch.Tensor, int]:
    """Right zero-pad the last axis to a multiple of ``patch_size``; returns (padded, original length)."""
    n = x.shape[-1]
    if n < 1:
        raise ValueError("empty clip")
    extra = -n % patch_size
    return (F.pad(x, (0, extra)) if extra else x), n


class Conv1d(nn.Conv1d):
    """Conv1d with causal (left) or symmetric padding so that out_len = ceil(in_len / stride)."""

    def __init__(self, *args, causal: bool = True, **kwargs):
        super().__init__(*args, **kwargs)
        self.causal = causal

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        k = (self.kernel_size[0] - 1) * self.dilation[0] + 1
        total = k - self.stride[0]
        left = total if self.causal else total // 2
        return super().forward(F.pad(x, (left, total - left)))


class ConvTranspose1d(nn.ConvTranspose1d):
    """Transposed conv trimmed so that out_len = in_len * stride."""

    def __init__(self, *args, causal: bool = True, **kwargs):
        super().__init__(*args, **kwargs)
        self.causal = causal

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = super().forward(x)
        extra = self.kernel_size[0] - self.stride[0]
        left = 0 if self.causal else extra // 2
        return y[..., left : y.shape[-1] - (extra - left)]


class ResidualUnit(nn.Module):
    def __init__(self, channels: int, dilation: int = 1, causal: bool = True):
        super().__init__()
        self.conv1 = Conv1d(channels, channels // 2 or 1, 3, dilation=dilation, causal=causal)
        self.conv2 = Conv1d(channels // 2 or 1, channels, 1, causal=causal)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(F.elu(self.conv1(F.elu(x))))


class Recurrent(nn.Module):
    """Two-layer LSTM with a skip connection over (B, C, T) tensors."""

    def __init__(self, channels: int, layers: int = 2):
        super().__init__()
        self.lstm = nn.LSTM(channels, channels, layers, batch_first=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y, _ = self.lstm(x.transpose(1, 2))
        return x + y.transpose(1, 2)


class ConvPatchify(nn.Module):
    """(B, N) -> (B, ceil(N / patch), d)."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        ch = cfg.conv_channels
        c = cfg.causal
        layers: list[nn.Module] = [Conv1d(1, ch, 7, causal=c)]
        for stride in cfg.strides:
            layers += [
                ResidualUnit(ch, 1, c),
                nn.ELU(),
                Conv1d(ch, 2 * ch, 2 * stride, stride=stride, causal=c),
            ]
            ch *= 2
        if cfg.use_lstm:
            layers.append(Recurrent(ch))
        layers += [nn.ELU(), Conv1d(ch, cfg.frame_dim, 7, causal=c)]
        self.net = nn.Sequential(*layers)
        self.patch_size = cfg.patch_size

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x, _ = pad_to_patch(x, self.patch_size)
        return self.net(x.unsqueeze(1)).transpose(1, 2)


class ConvUnPatchify(nn.Module):
    """(B, T, d) -> (B, T * patch); strides applied in reverse order."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        c = cfg.causal
        ch = cfg.conv_channels * 2 ** len(cfg.strides)
        layers: list[nn.Module] = [Conv1d(cfg.frame_dim, ch, 7, causal=c)]
        if cfg.use_lstm:
            layers.append(Recurrent(ch))
        for stride in reversed(cfg.strides):
            layers += [
                nn.ELU(),
                ConvTranspose1d(ch, ch // 2, 2 * stride, stride=stride, causal=c),
                ResidualUnit(ch // 2, 1, c),
            ]
            ch //= 2
        layers += [nn.ELU(), Conv1d(ch, 1, 7, causal=c)]
        self.net = nn.Sequential(*layers)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        return self.net(frames.transpose(1, 2)).squeeze(1)


class LinearPatchify(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.patch_size = cfg.patch_size
        self.proj = nn.Linear(cfg.patch_size, cfg.frame_dim)
        stack = StackConfig(cfg.linear_patchify_layers, cfg.frame_dim, cfg.encoder.n_heads, cfg.encoder.window)
        self.stack = TransformerStack(stack)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x, _ = pad_to_patch(x, self.patch_size)
        patches = x.reshape(*x.shape[:-1], -1, self.patch_size)
        return self.stack(self.proj(patches))


class LinearUnPatchify(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        stack = StackConfig(cfg.linear_patchify_layers, cfg.frame_dim, cfg.encoder.n_heads, cfg.encoder.window)
        self.stack = TransformerStack(stack)
        self.proj = nn.Linear(cfg.frame_dim, cfg.patch_size)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        out = self.proj(self.stack(frames))
        return out.reshape(*out.shape[:-2], -1)


def build_patchify(cfg: CodecConfig) -> tuple[nn.Module, nn.Module]:
    if cfg.patchify == "conv":
        return ConvPatchify(cfg), ConvUnPatchify(cfg)
    return LinearPatchify(cfg), LinearUnPatchify(cfg)


def _check_clip(x: AudioClip | torch.Tensor) -> torch.Tensor:
    t = x.tensor() if isinstance(x, AudioClip) else x
    if t.shape[-1] < 1:
        raise ValueError("empty clip")
    if not torch.isfinite(t).all():
        raise ValueError("non-finite samples")
    return t


def patchify(x: AudioClip | torch.Tensor, module: nn.Module, cfg: CodecConfig) -> tuple[FrameSequence, int]:
    """Frames for a single clip or a (B, N) batch, plus the original sample count."""
    t = _check_clip(x)
    batched = t.dim() == 2
    param = next(module.parameters())
    frames = module(t.reshape(-1, t.shape[-1]).to(param.dtype))
    if not batched:
        frames = frames[0]
    return FrameSequence(frames, Fraction(cfg.sample_rate, cfg.patch_size)), t.shape[-1]


def unpatchify(frames: FrameSequence | torch.Tensor, module: nn.Module, cfg: CodecConfig, original_len: int) -> torch.Tensor:
    data = frames.data if isinstance(frames, FrameSequence) else frames
    t = data.shape[-2]
    if original_len > t * cfg.patch_size:
        raise ValueError(f"original_len {original_len} exceeds T * patch_size = {t * cfg.patch_size}")
    batched = data.dim() == 3
    out = module(data if batched else data.unsqueeze(0))[..., :original_len]
    return out if batched else out[0]
