"""Audio clips, WAV I/O and spectral transforms."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile

from .config import SpectrogramConfig


class AudioFormatError(ValueError):
    """Raised for unreadable or unsupported audio files."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"AudioClip must be mono (1-D), got shape {self.samples.shape}")
        if self.samples.size < 1:
            raise ValueError("AudioClip must contain at least one sample")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioClip contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.samples, dtype=dtype)


def load_audio(path: str | Path) -> AudioClip:
    path = Path(path)
    if not path.is_file():
        raise AudioFormatError(f"unreadable file: {path} does not exist")
    try:
        rate, data = wavfile.read(path)
    except (ValueError, OSError) as exc:
        raise AudioFormatError(f"unreadable file: {path}: {exc}") from exc
    if data.ndim > 1:
        if data.shape[1] != 1:
            raise AudioFormatError(f"multi-channel input: {path} has {data.shape[1]} channels")
        data = data[:, 0]
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise AudioFormatError(f"unsupported encoding: {path} has sample type {data.dtype}")
    if samples.size == 0:
        raise AudioFormatError(f"unreadable file: {path} contains no samples")
    return AudioClip(np.clip(samples, -1.0, 1.0), int(rate))


def save_audio(clip: AudioClip, path: str | Path, encoding: str = "pcm16") -> None:
    if encoding == "pcm16":
        data = np.round(np.clip(clip.samples, -1.0, 32767 / 32768) * 32768.0).astype("<i2")
    elif encoding == "float32":
        data = clip.samples.astype("<f4")
    else:
        raise ValueError(f"unsupported encoding {encoding!r}")
    wavfile.write(Path(path), clip.sample_rate, data)


def _as_tensor(x: AudioClip | torch.Tensor | np.ndarray) -> torch.Tensor:
    if isinstance(x, AudioClip):
        return x.tensor(torch.float64)
    if isinstance(x, np.ndarray):
        return torch.from_numpy(x)
    return x


def window_fn(name: str, size: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    if name == "hann":
        return torch.hann_window(size, periodic=True, dtype=dtype)
    if name == "hamming":
        return torch.hamming_window(size, periodic=True, dtype=dtype)
    if name == "rect":
        return torch.ones(size, dtype=dtype)
    raise ValueError(f"unknown window {name!r}")


def stft(x: AudioClip | torch.Tensor, sc: SpectrogramConfig) -> torch.Tensor:
    """Complex spectrogram of shape (..., frames, fft_size // 2 + 1).

    Frames are taken without centering: frame ``t`` covers samples
    ``[t * hop, t * hop + fft_size)``.
    """
    sig = _as_tensor(x)
    n = sig.shape[-1]
    if n < sc.fft_size:
        raise ValueError(f"clip shorter than one window: {n} < fft_size {sc.fft_size}")
    if not torch.isfinite(sig).all():
        raise ValueError("non-finite samples")
    lead = sig.shape[:-1]
    flat = sig.reshape(-1, n)
    spec = torch.stft(
        flat,
        n_fft=sc.fft_size,
        hop_length=sc.hop,
        win_length=sc.fft_size,
        window=window_fn(sc.window, sc.fft_size, dtype=sig.dtype).to(sig.device),
        center=False,
        return_complex=True,
    )
    spec = spec.transpose(-1, -2)
    return spec.reshape(*lead, *spec.shape[-2:])


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, fft_size: int, mel_bins: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular (HTK-scale) filterbank of shape (mel_bins, fft_size // 2 + 1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    freqs = np.linspace(0.0, sample_rate / 2, fft_size // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), mel_bins + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.sum(axis=1) <= 0)
    if empty.size:
        raise ValueError(
            f"mel filter(s) {empty.tolist()} contain no FFT bin; reduce mel_bins ({mel_bins}) or raise fft_size ({fft_size})"
        )
    return fb


def mel(x: AudioClip | torch.Tensor, sc: SpectrogramConfig, sample_rate: int | None = None) -> torch.Tensor:
    """Mel-projected magnitude spectrogram, shape (..., frames, mel_bins)."""
    if sample_rate is None:
        if not isinstance(x, AudioClip):
            raise ValueError("sample_rate is required for raw tensors")
        sample_rate = x.sample_rate
    mag = stft(x, sc).abs()
    fb = mel_filterbank(sample_rate, sc.fft_size, sc.mel_bins, sc.fmin, sc.resolved_fmax(sample_rate))
    return mag @ torch.as_tensor(fb.T, dtype=mag.dtype, device=mag.device)
