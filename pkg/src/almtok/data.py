"""Dataset loading and the synthetic fixture corpus."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .audio import AudioClip, load_audio, save_audio


def synthetic_corpus(n_clips: int = 10, seconds: float = 1.0, sample_rate: int = 8000, seed: int = 0) -> list[AudioClip]:
    """Harmonic tones with a slow amplitude envelope and a little noise."""
    rng = np.random.default_rng(seed)
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    clips = []
    for _ in range(n_clips):
        f0 = rng.uniform(110.0, 440.0)
        sig = np.zeros_like(t)
        for k in range(1, 4):
            sig += rng.uniform(0.2, 1.0) / k * np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi))
        env = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t + rng.uniform(0, 2 * np.pi))
        sig = sig * env
        sig = 0.5 * sig / np.max(np.abs(sig)) + 0.005 * rng.normal(size=t.shape)
        clips.append(AudioClip(np.clip(sig, -1, 1), sample_rate))
    return clips


def write_corpus(clips: list[AudioClip], directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, clip in enumerate(clips):
        p = directory / f"clip_{i:03d}.wav"
        save_audio(clip, p)
        paths.append(p)
    return paths


def load_dir(directory: str | Path) -> list[AudioClip]:
    paths = sorted(Path(directory).glob("*.wav"))
    if not paths:
        raise FileNotFoundError(f"no .wav files in {directory}")
    return [load_audio(p) for p in paths]
