"""Self-contained objective metrics: spectral losses, bitrate, codebook and depth-AR diagnostics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .audio import AudioClip, mel, stft
from .config import CodecConfig, SpectrogramConfig
from .model import ALMCodec
from .quantizer import bitrate_table, codebook_stats, nearest_code

# externally computed perceptual scores can be merged into these slots
PERCEPTUAL_SLOTS = ("utmos", "dnsmos", "pesq", "stoi", "visqol")
SWEEP_TOLERANCE = 0.20


def _samples(x: AudioClip | torch.Tensor | np.ndarray) -> torch.Tensor:
    if isinstance(x, AudioClip):
        x = x.samples
    if isinstance(x, torch.Tensor):
        return x.double()
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def reconstruction_metrics(
    ref: AudioClip | torch.Tensor, hyp: AudioClip | torch.Tensor, sc: SpectrogramConfig, sample_rate: int | None = None
) -> tuple[float, float]:
    """(mel L1, STFT-magnitude L1) between two equal-length signals."""
    if sample_rate is None:
        sample_rate = ref.sample_rate if isinstance(ref, AudioClip) else None
    if sample_rate is None:
        raise ValueError("sample_rate is required for raw tensors")
    r, h = _samples(ref).double(), _samples(hyp).double()
    if r.shape != h.shape:
        raise ValueError(f"length mismatch: {tuple(r.shape)} vs {tuple(h.shape)}")
    mel_l = (mel(r, sc, sample_rate) - mel(h, sc, sample_rate)).abs().mean().item()
    stft_l = (stft(r, sc).abs() - stft(h, sc).abs()).abs().mean().item()
    return mel_l, stft_l


@torch.no_grad()
def reconstruct(model: ALMCodec, x: torch.Tensor, w: int) -> torch.Tensor:
    """Encode to codes and decode back; 1-D or (B, N) input."""
    was = model.training
    model.eval()
    batched = x.dim() == 2
    xb = (x if batched else x[None]).float()
    codes, n = model.encode(xb, w)
    out = model.decode(codes, w, n)
    model.train(was)
    return out if batched else out[0]


def snap_accuracy(preds: torch.Tensor, codes: torch.Tensor, books: torch.Tensor) -> list[float]:
    """Per-layer accuracy for layers 2..L of snapped depth-AR predictions.

    ``preds`` is (..., L-1, d) for layers 2..L, ``codes`` (..., L), ``books`` (L, C, d).
    """
    L = books.shape[0]
    if L < 2:
        raise ValueError("AR accuracy needs at least 2 VQ layers")
    if preds.shape[-2] != L - 1 or codes.shape[-1] != L:
        raise ValueError(f"expected {L - 1} predicted layers and {L} code layers")
    acc = []
    for layer in range(1, L):
        snapped = nearest_code(preds[..., layer - 1, :].to(books.dtype), books[layer])
        acc.append((snapped == codes[..., layer]).double().mean().item())
    return acc


@torch.no_grad()
def ar_prediction_accuracy(model: ALMCodec, clips: Sequence[AudioClip | torch.Tensor], w: int | None = None) -> list[float]:
    if model.cfg.vq_layers < 2:
        raise ValueError("AR accuracy needs at least 2 VQ layers")
    if model.depth_ar is None:
        raise ValueError("model has no depth-AR transformer (use_ar is off)")
    if not clips:
        raise ValueError("empty dataset")
    w = model.cfg.window_sizes[0] if w is None else w
    was = model.training
    model.eval()
    hits = np.zeros(model.cfg.vq_layers - 1)
    total = 0
    books = model.vq.codebooks()
    for clip in clips:
        x = _samples(clip).float()[None]
        out = model(x, w)
        n = out.codes[..., 0].numel()
        hits += np.array(snap_accuracy(out.ar_pred, out.codes, books)) * n
        total += n
    model.train(was)
    return (hits / total).tolist()


def length_sweep(
    model: ALMCodec, groups: Mapping[float, Sequence[AudioClip]], w: int | None = None, sc: SpectrogramConfig | None = None
) -> list[dict]:
    """Reconstruction metrics per duration group; flags stft_loss > shortest group's by more than 20%."""
    if not groups:
        raise ValueError("no duration groups")
    cfg = model.cfg
    w = cfg.window_sizes[0] if w is None else w
    sc = cfg.spectrogram if sc is None else sc
    rows = []
    for duration in sorted(groups):
        mels, stfts = [], []
        for clip in groups[duration]:
            x = _samples(clip)
            y = reconstruct(model, x, w).double()
            m, s = reconstruction_metrics(x.double(), y, sc, cfg.sample_rate)
            mels.append(m)
            stfts.append(s)
        rows.append({"duration": float(duration), "clips": len(mels), "mel_loss": float(np.mean(mels)), "stft_loss": float(np.mean(stfts))})
    base = rows[0]["stft_loss"]
    for row in rows:
        row["flagged"] = bool(row["stft_loss"] > (1 + SWEEP_TOLERANCE) * base)
    return rows


@dataclass
class EvalReport:
    mel_loss: float
    stft_loss: float
    window: int
    bitrate: list[dict]
    codebook: list[dict]
    ar_accuracy: list[float] | None
    clips: int
    perceptual: dict = field(default_factory=lambda: {k: None for k in PERCEPTUAL_SLOTS})
    config: dict | None = None

    def validate(self) -> "EvalReport":
        for name in ("mel_loss", "stft_loss"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")
        for acc in self.ar_accuracy or []:
            if not 0.0 <= acc <= 1.0:
                raise ValueError(f"accuracy {acc} outside [0, 1]")
        for row in self.codebook:
            if not (0.0 <= row["utilization"] <= 1.0 and math.isfinite(row["entropy_bits"])):
                raise ValueError(f"bad codebook stats {row}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bitrate"] = [{k: float(v) for k, v in row.items()} | {"window": row["window"]} for row in self.bitrate]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


REPORT_KEYS = ("mel_loss", "stft_loss", "window", "bitrate", "codebook", "ar_accuracy", "clips", "perceptual", "config")


def check_report_schema(d: dict) -> None:
    """Raise ValueError if a parsed report dict does not follow the documented schema."""
    missing = [k for k in REPORT_KEYS if k not in d]
    if missing:
        raise ValueError(f"report missing keys {missing}")
    if set(d["perceptual"]) != set(PERCEPTUAL_SLOTS):
        raise ValueError("perceptual slots do not match")
    for row in d["bitrate"]:
        if set(row) != {"window", "fps", "tps", "bps"}:
            raise ValueError(f"bad bitrate row {row}")
    for row in d["codebook"]:
        if set(row) != {"layer", "utilization", "entropy_bits"}:
            raise ValueError(f"bad codebook row {row}")


@torch.no_grad()
def evaluate(model: ALMCodec, clips: Sequence[AudioClip], w: int | None = None, cfg: CodecConfig | None = None) -> EvalReport:
    if not clips:
        raise ValueError("empty dataset")
    cfg = model.cfg if cfg is None else cfg
    w = cfg.window_sizes[0] if w is None else w
    mels, stfts, all_codes = [], [], []
    for clip in clips:
        x = _samples(clip)
        codes, n = model.encode(x.float()[None], w)
        y = model.decode(codes, w, n)[0].double()
        m, s = reconstruction_metrics(x.double(), y, cfg.spectrogram, cfg.sample_rate)
        mels.append(m)
        stfts.append(s)
        all_codes.append(codes.reshape(-1, codes.shape[-1]))
    stats = codebook_stats(torch.cat(all_codes).numpy(), cfg.codebook_size)
    acc = None
    if model.depth_ar is not None and cfg.vq_layers >= 2:
        acc = ar_prediction_accuracy(model, clips, w)
    return EvalReport(
        mel_loss=float(np.mean(mels)),
        stft_loss=float(np.mean(stfts)),
        window=w,
        bitrate=bitrate_table(cfg, range(2, 11)),
        codebook=[{"layer": i + 1, "utilization": u, "entropy_bits": e} for i, (u, e) in enumerate(stats)],
        ar_accuracy=acc,
        clips=len(clips),
        config=cfg.to_dict(),
    ).validate()
