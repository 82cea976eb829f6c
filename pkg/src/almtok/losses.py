"""Generator/discriminator objectives and the mel discriminator ensemble."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import torch
from torch import nn
from torch.nn import functional as F

from .audio import mel_filterbank, stft
from .config import CodecConfig, SpectrogramConfig

LOG_EPS = 1e-5


def _disc_spec(sample_rate: int, hop: int, mel_bins: int) -> tuple[SpectrogramConfig, int]:
    fft = 4 * hop
    bins = min(mel_bins, fft // 8)
    while bins > 1:
        try:
            mel_filterbank(sample_rate, fft, bins)
            break
        except ValueError:
            bins -= 1
    return SpectrogramConfig(fft_size=fft, hop=hop, mel_bins=bins), bins


class MelDiscriminator(nn.Module):
    """Strided 2-D convs over (time x mel) of stacked [mel, log-mel] features."""

    def __init__(self, sample_rate: int, hop: int, hidden: int, mel_bins: int = 64):
        super().__init__()
        self.spec, bins = _disc_spec(sample_rate, hop, mel_bins)
        fb = mel_filterbank(sample_rate, self.spec.fft_size, bins)
        self.register_buffer("fb", torch.tensor(fb.T, dtype=torch.float32))
        chans = [2, hidden // 4 or 1, hidden // 2 or 1, hidden, hidden]
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], (3, 3), stride=(1, 2), padding=1) for i in range(4)
        )
        self.out = nn.Conv2d(chans[-1], 1, (3, 3), padding=1)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        n = x.shape[-1]
        if n < self.spec.fft_size:
            x = F.pad(x, (0, self.spec.fft_size - n))
        m = stft(x, self.spec).abs() @ self.fb.to(x.dtype)
        return torch.stack([m, torch.log(m + LOG_EPS)], dim=1)  # (B, 2, frames, mels)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        h = self.features(x)
        feats = []
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
            feats.append(h)
        return self.out(h), feats


class DiscriminatorEnsemble(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.members = nn.ModuleList(
            MelDiscriminator(cfg.sample_rate, hop, hidden, cfg.disc_mel_bins)
            for hidden, hop in zip(cfg.disc_hidden, cfg.disc_hops)
        )

    def forward(self, x: torch.Tensor) -> list[tuple[torch.Tensor, list[torch.Tensor]]]:
        return [d(x) for d in self.members]


def recon_time(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    if x.shape != x_hat.shape:
        raise ValueError(f"length mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (x - x_hat).abs().mean()


def recon_freq_subband(x: torch.Tensor, x_hat: torch.Tensor, sc: SpectrogramConfig, bands: int = 4) -> torch.Tensor:
    """Mean over equal contiguous frequency bands of the per-band L1 between STFT magnitudes."""
    if x.shape != x_hat.shape:
        raise ValueError(f"length mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    n_bins = sc.fft_size // 2 + 1
    if not 1 <= bands <= n_bins:
        raise ValueError(f"bands must be in [1, {n_bins}], got {bands}")
    diff = (stft(x, sc).abs() - stft(x_hat, sc).abs()).abs()
    edges = [round(i * n_bins / bands) for i in range(bands + 1)]
    per_band = [diff[..., edges[i] : edges[i + 1]].mean() for i in range(bands)]
    return torch.stack(per_band).mean()


def recon_freq(x: torch.Tensor, x_hat: torch.Tensor, sc: SpectrogramConfig, bands: int = 4, scales: int = 1) -> torch.Tensor:
    """Sub-band STFT loss, averaged over ``scales`` resolutions (fft and hop halved each time)."""
    terms = []
    for k in range(scales):
        sk = replace(sc, fft_size=sc.fft_size >> k, hop=max(1, sc.hop >> k))
        terms.append(recon_freq_subband(x, x_hat, sk, min(bands, sk.fft_size // 2 + 1)))
    return torch.stack(terms).mean()


def disc_loss(real_logits: list[torch.Tensor], fake_logits: list[torch.Tensor]) -> torch.Tensor:
    """Hinge loss averaged over K discriminators (element-mean within each logit map)."""
    terms = [F.relu(1 - r).mean() + F.relu(1 + f).mean() for r, f in zip(real_logits, fake_logits, strict=True)]
    return torch.stack(terms).mean()


def gen_adv_loss(fake_logits: list[torch.Tensor]) -> torch.Tensor:
    return torch.stack([F.relu(1 - f).mean() for f in fake_logits]).mean()


def feature_match_loss(real_feats: list[list[torch.Tensor]], fake_feats: list[list[torch.Tensor]]) -> torch.Tensor:
    """Mean over discriminators and layers of mean |feat(x) - feat(x_hat)|."""
    per_disc = []
    for rf, ff in zip(real_feats, fake_feats, strict=True):
        per_disc.append(torch.stack([(r - f).abs().mean() for r, f in zip(rf, ff, strict=True)]).mean())
    return torch.stack(per_disc).mean()


def mae_loss(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor, l1_all_frames: bool = False) -> torch.Tensor:
    """MSE over masked rows of (..., T, d) tensors; ``mask`` is boolean (..., T)."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if l1_all_frames:
        return (pred - target).abs().mean()
    mask = mask.to(torch.bool)
    if not mask.any():
        raise ValueError("empty mask: mae_loss needs at least one masked position")
    return ((pred - target)[mask] ** 2).mean()


def ar_loss(preds: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    if preds.shape != targets.shape:
        raise ValueError(f"shape mismatch: {tuple(preds.shape)} vs {tuple(targets.shape)}")
    return ((preds - targets.detach()) ** 2).mean()


@dataclass
class LossReport:
    l_rec_time: float = 0.0
    l_rec_freq: float = 0.0
    l_adv: float = 0.0
    l_feat: float = 0.0
    l_mae: float = 0.0
    l_ar: float = 0.0
    l_commit: float = 0.0
    total: float = 0.0

    # key order of the per-step log record
    KEYS = ("l_rec_time", "l_rec_freq", "l_adv", "l_feat", "l_mae", "l_ar", "l_commit", "total")

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


def weighted_total(parts: dict, lambda_mae: float = 0.5, lambda_ar: float = 0.1, commit_weight: float = 0.0):
    """L_adv + L_feat + L_rec + lambda_mae * L_MAE + lambda_ar * L_AR (+ commitment)."""
    get = lambda k: parts.get(k, 0.0)  # noqa: E731
    l_rec = get("l_rec_time") + get("l_rec_freq")
    total = get("l_adv") + get("l_feat") + l_rec + lambda_mae * get("l_mae") + lambda_ar * get("l_ar")
    if commit_weight:
        total = total + commit_weight * get("l_commit")
    return total


def total_generator_loss(parts: dict, lambda_mae: float = 0.5, lambda_ar: float = 0.1, commit_weight: float = 0.0) -> LossReport:
    values = {}
    for f in fields(LossReport):
        if f.name == "total":
            continue
        v = float(parts.get(f.name, 0.0))
        if not math.isfinite(v):
            raise ValueError(f"non-finite loss part {f.name}={v}")
        values[f.name] = v
    unknown = set(parts) - set(values) - {"l_rec"}
    if unknown:
        raise ValueError(f"unknown loss parts {sorted(unknown)}")
    if "l_rec" in parts:
        # a single combined reconstruction term is booked under the time-domain slot
        values["l_rec_time"] += float(parts["l_rec"])
    return LossReport(**values, total=weighted_total(values, lambda_mae, lambda_ar, commit_weight))
