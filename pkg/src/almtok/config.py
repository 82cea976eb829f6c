"""Codec configuration: dataclasses, validation, and YAML (de)serialization."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Invalid or inconsistent configuration value."""


@dataclass
class SpectrogramConfig:
    fft_size: int = 1024
    hop: int = 256
    window: str = "hann"
    mel_bins: int = 64
    fmin: float = 0.0
    fmax: float | None = None  # None means Nyquist

    def validate(self, sample_rate: int | None = None) -> None:
        if self.fft_size < 1:
            raise ConfigError(f"fft_size must be positive, got {self.fft_size}")
        if not 0 < self.hop <= self.fft_size:
            raise ConfigError(f"hop must be in (0, fft_size], got {self.hop}")
        if self.window not in ("hann", "hamming", "rect"):
            raise ConfigError(f"unknown window {self.window!r}")
        if self.mel_bins < 1:
            raise ConfigError(f"mel_bins must be >= 1, got {self.mel_bins}")
        if sample_rate is not None:
            fmax = self.resolved_fmax(sample_rate)
            if not 0 <= self.fmin < fmax <= sample_rate / 2:
                raise ConfigError(
                    f"need 0 <= fmin < fmax <= sample_rate/2, got fmin={self.fmin} fmax={fmax}"
                )

    def resolved_fmax(self, sample_rate: int) -> float:
        return sample_rate / 2 if self.fmax is None else float(self.fmax)


@dataclass
class StackConfig:
    """Sliding-window transformer stack hyperparameters."""

    n_layers: int = 4
    dim: int = 64
    n_heads: int = 1
    window: int = 64
    ffn_mult: float = 4.0
    rope: bool = True

    def validate(self, name: str = "stack") -> None:
        if self.n_layers < 1:
            raise ConfigError(f"{name}.n_layers must be >= 1")
        if self.dim < 1 or self.n_heads < 1 or self.dim % self.n_heads:
            raise ConfigError(f"{name}.dim ({self.dim}) must be divisible by n_heads ({self.n_heads})")
        if self.rope and (self.dim // self.n_heads) % 2:
            raise ConfigError(f"{name}: rope needs an even head dim")
        if self.window < 1:
            raise ConfigError(f"{name}.window must be >= 1")


@dataclass
class CodecConfig:
    sample_rate: int = 24000
    patch_size: int = 320
    patchify: str = "conv"  # "conv" | "linear"
    strides: list[int] = field(default_factory=lambda: [8, 5, 4, 2])
    conv_channels: int = 32
    causal: bool = True
    use_lstm: bool = True
    linear_patchify_layers: int = 4

    window_sizes: list[int] = field(default_factory=lambda: list(range(2, 11)))
    mask_rate_range: tuple[float, float] = (0.2, 0.3)

    codebook_size: int = 2048
    vq_layers: int = 3
    d_vq: int = 256
    freeze_codebooks: str = "all"  # "all" | "first"
    semantic_prior: bool = True

    encoder: StackConfig = field(default_factory=lambda: StackConfig(24, 256, 4, 64))
    decoder: StackConfig = field(default_factory=lambda: StackConfig(24, 512, 8, 64))
    mae: StackConfig = field(default_factory=lambda: StackConfig(8, 256, 4, 64))
    depth: StackConfig = field(default_factory=lambda: StackConfig(2, 256, 4, 64))

    lambda_mae: float = 0.5
    lambda_ar: float = 0.1
    commit_weight: float = 0.25
    use_mae: bool = True
    use_ar: bool = True
    mae_l1_all_frames: bool = False

    disc_hidden: list[int] = field(default_factory=lambda: [64, 128, 256, 512, 512, 512])
    disc_hops: list[int] = field(default_factory=lambda: [32, 64, 128, 256, 512, 1024])
    disc_mel_bins: int = 64
    disc_warmup_steps: int = 0
    subbands: int = 4
    multiscale_recon: bool = False  # average the STFT loss over 3 resolutions

    lr: float = 1e-4
    disc_lr: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.8, 0.99)
    grad_clip: float = 1.0
    steps: int = 200_000
    batch_size: int = 8
    crop_seconds: float = 1.0
    seed: int = 0

    spectrogram: SpectrogramConfig = field(default_factory=SpectrogramConfig)

    def __post_init__(self) -> None:
        for name in ("encoder", "decoder", "mae", "depth"):
            value = getattr(self, name)
            if isinstance(value, dict):
                setattr(self, name, StackConfig(**value))
        if isinstance(self.spectrogram, dict):
            self.spectrogram = SpectrogramConfig(**self.spectrogram)
        self.mask_rate_range = tuple(self.mask_rate_range)
        self.betas = tuple(self.betas)
        self.strides = list(self.strides)
        self.window_sizes = list(self.window_sizes)

    @property
    def frame_dim(self) -> int:
        return self.encoder.dim

    def validate(self) -> "CodecConfig":
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        if self.patch_size <= 0:
            raise ConfigError("patch_size must be positive")
        if self.patchify not in ("conv", "linear"):
            raise ConfigError(f"patchify must be 'conv' or 'linear', got {self.patchify!r}")
        if self.patchify == "conv":
            prod = 1
            for s in self.strides:
                prod *= s
            if prod != self.patch_size:
                raise ConfigError(f"product of strides {self.strides} = {prod} != patch_size {self.patch_size}")
        if not self.window_sizes or any(not 1 <= w <= 64 for w in self.window_sizes):
            raise ConfigError(f"window_sizes must be a non-empty subset of [1, 64], got {self.window_sizes}")
        lo, hi = self.mask_rate_range
        if not 0 <= lo <= hi < 1:
            raise ConfigError(f"mask_rate_range must satisfy 0 <= low <= high < 1, got {self.mask_rate_range}")
        if self.codebook_size < 2:
            raise ConfigError("codebook_size must be >= 2")
        if self.vq_layers < 1:
            raise ConfigError("vq_layers must be >= 1")
        if self.use_ar and self.vq_layers < 2:
            raise ConfigError("the depth-AR loss needs vq_layers >= 2")
        if self.freeze_codebooks not in ("all", "first"):
            raise ConfigError("freeze_codebooks must be 'all' or 'first'")
        if self.lambda_mae < 0 or self.lambda_ar < 0 or self.commit_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if len(self.disc_hidden) != len(self.disc_hops):
            raise ConfigError("disc_hidden and disc_hops must have equal length")
        for name in ("encoder", "decoder", "mae", "depth"):
            getattr(self, name).validate(name)
        if self.mae.dim != self.encoder.dim:
            raise ConfigError("mae.dim must equal encoder.dim")
        self.spectrogram.validate(self.sample_rate)
        return self

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["mask_rate_range"] = list(self.mask_rate_range)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "CodecConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            cfg = cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cfg.validate()

    def replace(self, **changes: Any) -> "CodecConfig":
        return CodecConfig.from_dict({**self.to_dict(), **changes})


def toy_config(**overrides: Any) -> CodecConfig:
    """Small configuration (8 kHz, patch 64) on which every test runs in seconds."""
    base = CodecConfig(
        sample_rate=8000,
        patch_size=64,
        strides=[4, 4, 4],
        conv_channels=8,
        window_sizes=[2, 3, 4],
        codebook_size=1024,
        vq_layers=3,
        d_vq=16,
        encoder=StackConfig(4, 64, 2, 16),
        decoder=StackConfig(4, 128, 2, 16),
        mae=StackConfig(2, 64, 2, 16),
        depth=StackConfig(2, 32, 2, 4),
        disc_hidden=[8, 8, 16, 16, 16, 16],
        disc_mel_bins=32,
        lr=3e-4,
        disc_lr=1e-4,
        batch_size=4,
        steps=2000,
        spectrogram=SpectrogramConfig(fft_size=512, hop=128, mel_bins=32),
    )
    return base.replace(**overrides) if overrides else base.validate()


def load_config(path: str | Path) -> CodecConfig:
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return CodecConfig.from_dict(data)


def save_config(cfg: CodecConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
