"""The query-token codec and the stage-1 autoencoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from . import interleave as il
from .config import CodecConfig
from .patchify import build_patchify
from .quantizer import CodebookSet, ResidualVQ
from .transformer import DepthAR, TransformerStack


def masked_count(rate: float, t: int) -> int:
    """ceil(rate * T), rounded first so that e.g. 0.3 * 10 counts as 3."""
    return min(t, math.ceil(round(rate * t, 9)))


def apply_mask_batch(frames: torch.Tensor, count: int, generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Zero ``count`` distinct rows per batch item; returns (masked, bool mask (B, T))."""
    b, t, _ = frames.shape
    mask = torch.zeros(b, t, dtype=torch.bool, device=frames.device)
    for i in range(b):
        if count:
            mask[i, torch.randperm(t, generator=generator)[:count]] = True
    return frames.masked_fill(mask.unsqueeze(-1), 0.0), mask


@dataclass
class CodecOutput:
    x_hat: torch.Tensor
    codes: torch.Tensor
    per_layer_quantized: torch.Tensor  # straight-through values, (B, Tq, L, d_vq)
    ar_pred: torch.Tensor | None
    mae_pred: torch.Tensor | None
    mae_target: torch.Tensor | None
    mae_mask: torch.Tensor | None
    commit: torch.Tensor


class ALMCodec(nn.Module):
    def __init__(self, cfg: CodecConfig, books: CodebookSet):
        super().__init__()
        cfg.validate()
        if books.num_layers != cfg.vq_layers or books.size != cfg.codebook_size or books.dim != cfg.d_vq:
            raise ValueError(
                f"codebook shape (L={books.num_layers}, C={books.size}, d={books.dim}) does not match config "
                f"(L={cfg.vq_layers}, C={cfg.codebook_size}, d={cfg.d_vq})"
            )
        self.cfg = cfg
        self.patchify, self.unpatchify = build_patchify(cfg)
        self.cls_token = nn.Parameter(torch.zeros(cfg.encoder.dim))
        self.mask_token = nn.Parameter(torch.zeros(cfg.decoder.dim))
        self.encoder = TransformerStack(cfg.encoder)
        self.vq = ResidualVQ(cfg.encoder.dim, books, cfg.freeze_codebooks)
        self.bridge = nn.Linear(cfg.d_vq, cfg.decoder.dim)
        self.decoder = TransformerStack(cfg.decoder)
        self.dec_out = nn.Linear(cfg.decoder.dim, cfg.frame_dim)
        self.mae_decoder = TransformerStack(cfg.mae) if cfg.use_mae else None
        self.mae_out = nn.Linear(cfg.mae.dim, cfg.frame_dim) if cfg.use_mae else None
        self.depth_ar = DepthAR(cfg.d_vq, cfg.vq_layers, cfg.depth) if cfg.use_ar else None
        nn.init.normal_(self.cls_token, std=0.02)
        nn.init.normal_(self.mask_token, std=0.02)

    # -- encoder side ---------------------------------------------------------------

    def frames(self, x: torch.Tensor) -> torch.Tensor:
        return self.patchify(x)

    def encode_frames(self, frames: torch.Tensor, w: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Padded frames (B, T, d) with w | T -> (encoded interleaved sequence, query tokens)."""
        seq = il.encoder_interleave(frames, self.cls_token, w)
        encoded = self.encoder(seq.data)
        return encoded, il.encoder_retrieve(encoded, w)

    @torch.no_grad()
    def encode(self, x: torch.Tensor, w: int) -> tuple[torch.Tensor, int]:
        """(B, N) waveform -> ((B, Tq, L) codes, N)."""
        n = x.shape[-1]
        frames, _ = il.pad_frames(self.patchify(x), w)
        _, queries = self.encode_frames(frames, w)
        res, _, _ = self.vq(queries)
        return res.codes, n

    # -- decoder side ---------------------------------------------------------------

    def decode_latent(self, quantized: torch.Tensor, w: int, original_len: int) -> torch.Tensor:
        # Under causal attention the mask slots of block i precede query i, so block i is
        # read from the slots of block i+1. A placeholder query closes the extra block;
        # nothing retrieved can attend to it.
        q = self.bridge(quantized)
        q = torch.cat([q, q.new_zeros(*q.shape[:-2], 1, q.shape[-1])], dim=-2)
        seq = il.decoder_interleave(q, self.mask_token, w)
        frames = self.dec_out(il.decoder_retrieve(self.decoder(seq.data), w)[..., w:, :])
        out = self.unpatchify(frames)
        if original_len > out.shape[-1]:
            raise ValueError(f"original_len {original_len} exceeds decodable length {out.shape[-1]}")
        return out[..., :original_len]

    @torch.no_grad()
    def decode(self, codes: torch.Tensor, w: int, original_len: int) -> torch.Tensor:
        return self.decode_latent(self.vq.decode(codes), w, original_len)

    # -- training -------------------------------------------------------------------

    def forward(
        self,
        x: torch.Tensor,
        w: int,
        mask_rate: float = 0.0,
        generator: torch.Generator | None = None,
    ) -> CodecOutput:
        n = x.shape[-1]
        frames, _ = il.pad_frames(self.patchify(x), w)
        mae_mask = None
        enc_in = frames
        count = masked_count(mask_rate, frames.shape[-2]) if self.training else 0
        if count:
            enc_in, mae_mask = apply_mask_batch(frames, count, generator)
        encoded, queries = self.encode_frames(enc_in, w)

        mae_pred = None
        if self.mae_decoder is not None and mae_mask is not None:
            mae_pred = self.mae_out(il.drop_queries(self.mae_decoder(encoded), w))

        res, q_sum, per_layer = self.vq(queries)
        ar_pred = self.depth_ar(per_layer) if self.depth_ar is not None else None
        x_hat = self.decode_latent(q_sum, w, n)
        return CodecOutput(
            x_hat=x_hat,
            codes=res.codes,
            per_layer_quantized=per_layer,
            ar_pred=ar_pred,
            mae_pred=mae_pred,
            mae_target=frames.detach(),
            mae_mask=mae_mask,
            commit=self.vq.commitment(res),
        )


class Stage1Autoencoder(nn.Module):
    """Patchify/UnPatchify autoencoder with an auxiliary MAE encoder/decoder pair."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.patchify, self.unpatchify = build_patchify(cfg)
        self.mae_encoder = TransformerStack(cfg.mae) if cfg.use_mae else None
        self.mae_decoder = TransformerStack(cfg.mae) if cfg.use_mae else None
        self.mae_out = nn.Linear(cfg.mae.dim, cfg.frame_dim) if cfg.use_mae else None

    def forward(self, x: torch.Tensor, mask_rate: float = 0.0, generator: torch.Generator | None = None):
        n = x.shape[-1]
        frames = self.patchify(x)
        x_hat = self.unpatchify(frames)[..., :n]
        mae_pred = mask = None
        count = masked_count(mask_rate, frames.shape[-2]) if self.training else 0
        if self.mae_encoder is not None and count:
            masked, mask = apply_mask_batch(frames, count, generator)
            mae_pred = self.mae_out(self.mae_decoder(self.mae_encoder(masked)))
        return x_hat, mae_pred, frames.detach(), mask
