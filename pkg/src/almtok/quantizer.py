"""K-means semantic priors, frozen-codebook residual VQ, bitrate arithmetic."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .config import CodecConfig

CODEBOOK_MAGIC = b"ALMB"
CODEBOOK_VERSION = 1


class CodebookFormatError(ValueError):
    pass


# --------------------------------------------------------------------------- k-means


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # expanded form for speed; only k-means uses it (RVQ keeps exact differences)
    d = (points**2).sum(1)[:, None] - 2.0 * points @ centroids.T + (centroids**2).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    closest = ((points - points[chosen[0]]) ** 2).sum(-1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            remaining = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(remaining))
        chosen.append(idx)
        closest = np.minimum(closest, ((points - points[idx]) ** 2).sum(-1))
    return points[chosen].copy()


def kmeans(
    points: np.ndarray,
    k: int,
    iters: int = 50,
    seed: int = 0,
    return_history: bool = False,
):
    """Lloyd's algorithm from k-means++ seeding.

    Empty clusters are re-seeded to the point farthest from its centroid.
    With ``return_history`` the per-iteration inertia is returned as well.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"points must be a 2-D matrix, got shape {points.shape}")
    n = points.shape[0]
    if k < 1 or n < k:
        raise ValueError(f"need n >= k >= 1, got n={n}, k={k}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not np.all(np.isfinite(points)):
        raise ValueError("points contain non-finite values")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(points, k, rng)
    history = []
    assign = None
    for _ in range(iters):
        d = _sq_dists(points, centroids)
        new_assign = d.argmin(axis=1)
        best = d[np.arange(n), new_assign]
        history.append(float(best.sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, points)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        taken: set[int] = set()
        for c in np.flatnonzero(~nonempty):
            dist = ((points - centroids[assign]) ** 2).sum(-1)
            dist[list(taken)] = -1.0
            far = int(dist.argmax())
            taken.add(far)
            centroids[c] = points[far]
            assign[far] = c
    d = _sq_dists(points, centroids)
    history.append(float(d.min(axis=1).sum()))
    if return_history:
        return centroids, history
    return centroids


# --------------------------------------------------------------------------- codebooks


@dataclass
class CodebookSet:
    layers: np.ndarray  # (L, C, d_vq)
    frozen: bool = True
    provenance: list[list[str]] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self) -> None:
        self.layers = np.asarray(self.layers, dtype=np.float32)
        if self.layers.ndim != 3:
            raise ValueError(f"codebooks must be (L, C, d), got shape {self.layers.shape}")
        if self.layers.shape[0] < 1 or self.layers.shape[1] < 2:
            raise ValueError("need L >= 1 and C >= 2")
        if not np.all(np.isfinite(self.layers)):
            raise ValueError("codebook contains non-finite centroids")
        if not self.provenance:
            self.provenance = [["random", "random"] for _ in range(self.num_layers)]

    @property
    def num_layers(self) -> int:
        return self.layers.shape[0]

    @property
    def size(self) -> int:
        return self.layers.shape[1]

    @property
    def dim(self) -> int:
        return self.layers.shape[2]

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.layers.copy()).to(dtype)

    def checksum(self) -> str:
        return hashlib.sha256(self.layers.astype("<f4").tobytes()).hexdigest()


def build_prior_codebook(speech_feats: np.ndarray, sound_feats: np.ndarray, C: int, seed: int = 0, iters: int = 50) -> np.ndarray:
    """Rows [0, C/2) cluster the speech features, rows [C/2, C) the sound features."""
    if C % 2:
        raise ValueError(f"codebook size must be even, got {C}")
    speech_feats = np.asarray(speech_feats, dtype=np.float64)
    sound_feats = np.asarray(sound_feats, dtype=np.float64)
    if speech_feats.ndim != 2 or sound_feats.ndim != 2 or not len(speech_feats) or not len(sound_feats):
        raise ValueError("feature sets must be non-empty 2-D matrices")
    if speech_feats.shape[1] != sound_feats.shape[1]:
        raise ValueError(f"dimension mismatch: speech d={speech_feats.shape[1]}, sound d={sound_feats.shape[1]}")
    half = C // 2
    return np.concatenate(
        [kmeans(speech_feats, half, iters, seed), kmeans(sound_feats, half, iters, seed + 1)], axis=0
    )


def _greedy_residual(feats: np.ndarray, book: np.ndarray) -> np.ndarray:
    idx = _sq_dists(feats, book).argmin(axis=1)
    return feats - book[idx]


def build_layered_priors(
    speech_feats: np.ndarray, sound_feats: np.ndarray, C: int, L: int, seed: int = 0, iters: int = 50
) -> CodebookSet:
    """Layer ``l`` is clustered on the residuals left by greedy quantization through layers < l."""
    speech = np.asarray(speech_feats, dtype=np.float64)
    sound = np.asarray(sound_feats, dtype=np.float64)
    layers = []
    for layer in range(L):
        book = build_prior_codebook(speech, sound, C, seed + 2 * layer, iters)
        layers.append(book)
        half = C // 2
        speech = _greedy_residual(speech, book[:half]) if layer + 1 < L else speech
        sound = _greedy_residual(sound, book[half:]) if layer + 1 < L else sound
    return CodebookSet(
        np.stack(layers), frozen=True, provenance=[["speech-prior", "sound-prior"] for _ in range(L)], seed=seed
    )


def random_codebooks(C: int, L: int, d: int, seed: int = 0, scale: float = 1.0) -> CodebookSet:
    rng = np.random.default_rng(seed)
    layers = rng.normal(0.0, scale, size=(L, C, d))
    for layer in range(1, L):
        layers[layer] *= 0.5**layer
    return CodebookSet(layers, frozen=True, provenance=[["random", "random"] for _ in range(L)], seed=seed)


def synthetic_features(n: int, d: int, clusters: int, seed: int = 0, spread: float = 0.3) -> np.ndarray:
    """Gaussian-blob stand-in for SSL teacher features."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 1.0, size=(clusters, d))
    labels = rng.integers(clusters, size=n)
    return centers[labels] + spread * rng.normal(size=(n, d))


def synthetic_priors(C: int, L: int, d: int, seed: int = 0, iters: int = 25) -> CodebookSet:
    """Layered priors clustered from synthetic speech/sound stand-in features."""
    n = max(4 * C, 64)
    speech = synthetic_features(n, d, max(2, C // 4), seed=seed)
    sound = synthetic_features(n, d, max(2, C // 4), seed=seed + 1)
    books = build_layered_priors(speech, sound, C, L, seed=seed, iters=iters)
    books.provenance = [["synthetic-speech", "synthetic-sound"] for _ in range(L)]
    return books


def save_codebooks(books: CodebookSet, path: str | Path) -> None:
    payload = books.layers.astype("<f4").tobytes()
    manifest = {
        "layers": books.num_layers,
        "size": books.size,
        "dim": books.dim,
        "dtype": "float32-le",
        "frozen": books.frozen,
        "provenance": books.provenance,
        "seed": books.seed,
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    text = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CODEBOOK_MAGIC)
        fh.write(struct.pack("<II", CODEBOOK_VERSION, len(text)))
        fh.write(text)
        fh.write(payload)


def load_codebooks(path: str | Path) -> CodebookSet:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CODEBOOK_MAGIC:
        raise CodebookFormatError(f"{path}: bad magic (expected {CODEBOOK_MAGIC!r})")
    version, mlen = struct.unpack_from("<II", raw, 4)
    if version != CODEBOOK_VERSION:
        raise CodebookFormatError(f"{path}: unsupported version {version}")
    if 12 + mlen > len(raw):
        raise CodebookFormatError(f"{path}: manifest_length {mlen} exceeds file size")
    try:
        manifest = json.loads(raw[12 : 12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CodebookFormatError(f"{path}: corrupt manifest: {exc}") from exc
    for key in ("layers", "size", "dim", "payload_bytes", "sha256"):
        if key not in manifest:
            raise CodebookFormatError(f"{path}: manifest missing field {key!r}")
    payload = raw[12 + mlen :]
    expected = 4 * manifest["layers"] * manifest["size"] * manifest["dim"]
    if len(payload) != manifest["payload_bytes"] or len(payload) != expected:
        raise CodebookFormatError(f"{path}: payload_bytes mismatch ({len(payload)} on disk, {expected} expected)")
    if hashlib.sha256(payload).hexdigest() != manifest["sha256"]:
        raise CodebookFormatError(f"{path}: sha256 mismatch")
    layers = np.frombuffer(payload, dtype="<f4").reshape(manifest["layers"], manifest["size"], manifest["dim"])
    return CodebookSet(
        layers.astype(np.float32),
        frozen=bool(manifest.get("frozen", True)),
        provenance=manifest.get("provenance", []),
        seed=int(manifest.get("seed", 0)),
    )


# --------------------------------------------------------------------------- RVQ


@dataclass
class RvqResult:
    projected: torch.Tensor  # (..., d_vq)
    quantized_sum: torch.Tensor  # (..., d_vq)
    per_layer_quantized: torch.Tensor  # (..., L, d_vq)
    layer_inputs: torch.Tensor  # (..., L, d_vq) residual entering each layer
    residual: torch.Tensor  # (..., d_vq)
    codes: torch.Tensor  # (..., L) int64


def nearest_code(r: torch.Tensor, book: torch.Tensor) -> torch.Tensor:
    """Index of the nearest centroid by squared Euclidean distance; lowest index on ties."""
    flat = r.reshape(-1, r.shape[-1])
    chunk = max(1, (1 << 22) // max(1, book.numel()))
    out = []
    for start in range(0, flat.shape[0], chunk):
        rows = flat[start : start + chunk]
        dist = ((rows[:, None, :] - book[None, :, :]) ** 2).sum(-1)
        out.append(dist.argmin(dim=-1))
    idx = torch.cat(out) if out else torch.zeros(0, dtype=torch.long)
    return idx.reshape(r.shape[:-1])


def rvq_encode(h: torch.Tensor, books: torch.Tensor | CodebookSet, proj: Callable | None = None) -> RvqResult:
    if isinstance(books, CodebookSet):
        books = books.tensor(h.dtype)
    r = proj(h) if proj is not None else h
    if r.shape[-1] != books.shape[-1]:
        raise ValueError(f"dimension mismatch: projected input has d={r.shape[-1]}, codebooks have d={books.shape[-1]}")
    projected = r
    quantized, inputs, codes = [], [], []
    for layer in range(books.shape[0]):
        with torch.no_grad():
            code = nearest_code(r.detach(), books[layer].detach())
        q = books[layer][code]
        inputs.append(r)
        quantized.append(q)
        codes.append(code)
        r = r - q
    per_layer = torch.stack(quantized, dim=-2)
    total = quantized[0]
    for q in quantized[1:]:
        total = total + q
    return RvqResult(projected, total, per_layer, torch.stack(inputs, dim=-2), r, torch.stack(codes, dim=-1))


def rvq_decode(codes: torch.Tensor, books: torch.Tensor | CodebookSet) -> torch.Tensor:
    if isinstance(books, CodebookSet):
        books = books.tensor()
    L, C = books.shape[:2]
    if codes.shape[-1] != L:
        raise ValueError(f"code grid has {codes.shape[-1]} layers, codebooks have {L}")
    if codes.numel() and (int(codes.min()) < 0 or int(codes.max()) >= C):
        raise ValueError(f"out-of-range code: codes must lie in [0, {C})")
    total = books[0][codes[..., 0]]
    for layer in range(1, L):
        total = total + books[layer][codes[..., layer]]
    return total


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, h_pre, h_quant):
        return h_quant.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def straight_through(h_pre: torch.Tensor, h_quant: torch.Tensor) -> torch.Tensor:
    """Forward value ``h_quant``; gradient passed to ``h_pre`` unchanged."""
    if h_pre.shape != h_quant.shape:
        raise ValueError(f"shape mismatch: {tuple(h_pre.shape)} vs {tuple(h_quant.shape)}")
    return _StraightThrough.apply(h_pre, h_quant)


class ResidualVQ(nn.Module):
    """Input projection plus L codebooks (frozen ones held as buffers)."""

    def __init__(self, input_dim: int, books: CodebookSet, freeze: str = "all"):
        super().__init__()
        self.proj = nn.Linear(input_dim, books.dim)
        table = books.tensor()
        n_frozen = books.num_layers if freeze == "all" else 1
        self.register_buffer("frozen_books", table[:n_frozen].clone())
        self.trainable_books = nn.Parameter(table[n_frozen:].clone()) if n_frozen < books.num_layers else None

    @property
    def num_layers(self) -> int:
        return self.codebooks().shape[0]

    @property
    def codebook_size(self) -> int:
        return self.frozen_books.shape[1]

    def codebooks(self) -> torch.Tensor:
        if self.trainable_books is None:
            return self.frozen_books
        return torch.cat([self.frozen_books, self.trainable_books], dim=0)

    def forward(self, h: torch.Tensor) -> tuple[RvqResult, torch.Tensor, torch.Tensor]:
        """Returns the raw result, the straight-through sum and per-layer straight-through values."""
        res = rvq_encode(h, self.codebooks(), self.proj)
        q_sum = straight_through(res.projected, res.quantized_sum.detach())
        per_layer = straight_through(res.layer_inputs, res.per_layer_quantized.detach())
        return res, q_sum, per_layer

    def commitment(self, res: RvqResult) -> torch.Tensor:
        loss = torch.mean((res.projected - res.quantized_sum.detach()) ** 2)
        n_frozen = self.frozen_books.shape[0]
        if self.trainable_books is not None:
            q = res.per_layer_quantized[..., n_frozen:, :]
            target = res.layer_inputs[..., n_frozen:, :].detach()
            loss = loss + torch.mean((q - target) ** 2)
        return loss

    def decode(self, codes: torch.Tensor) -> torch.Tensor:
        return rvq_decode(codes, self.codebooks())


# --------------------------------------------------------------------------- bitrate & stats


def _log2_exact(c: int) -> Fraction | float:
    if c > 0 and c & (c - 1) == 0:
        return Fraction(c.bit_length() - 1)
    return math.log2(c)


def bitrate(cfg: CodecConfig, w: int):
    """(frames/s, tokens/s, bits/s) for window ``w``; exact Fractions when C is a power of two."""
    fps = Fraction(cfg.sample_rate, cfg.patch_size * w)
    tps = fps * cfg.vq_layers
    bits = _log2_exact(cfg.codebook_size)
    bps = tps * bits if isinstance(bits, Fraction) else float(tps) * bits
    return fps, tps, bps


def bitrate_table(cfg: CodecConfig, windows=None) -> list[dict]:
    rows = []
    for w in windows if windows is not None else cfg.window_sizes:
        fps, tps, bps = bitrate(cfg, w)
        rows.append({"window": w, "fps": fps, "tps": tps, "bps": bps})
    return rows


def codebook_stats(codes: torch.Tensor | np.ndarray, C: int) -> list[tuple[float, float]]:
    """Per-layer (utilization fraction, empirical entropy in bits) of a (..., L) code grid."""
    arr = np.asarray(codes)
    if arr.size == 0:
        raise ValueError("empty code grid")
    arr = arr.reshape(-1, arr.shape[-1])
    out = []
    for layer in range(arr.shape[1]):
        counts = np.bincount(arr[:, layer], minlength=C).astype(np.float64)
        p = counts[counts > 0] / counts.sum()
        entropy = float(-(p * np.log2(p)).sum()) + 0.0
        out.append((np.count_nonzero(counts) / C, entropy))
    return out
