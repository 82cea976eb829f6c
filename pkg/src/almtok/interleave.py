"""Query/mask token interleaving and retrieval.

Layout (0-based, window ``w``, ``Tq`` blocks):

* encoder side: ``[f0 .. f(w-1), cls, fw .. f(2w-1), cls, ...]``
* decoder side: ``[m .. m (w times), q0, m .. m, q1, ...]``

In both layouts the query token of block ``i`` sits at ``(i + 1) * (w + 1) - 1``
and the sequence length is ``Tq * (w + 1)``.  All functions operate on the
last two axes, so leading batch axes pass through.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class InterleavedSequence:
    data: torch.Tensor  # (..., Tq * (w + 1), d)
    window: int
    kind: str  # "encoder" | "decoder"

    @property
    def block_count(self) -> int:
        return self.data.shape[-2] // (self.window + 1)


def query_positions(block_count: int, w: int) -> list[int]:
    return [(i + 1) * (w + 1) - 1 for i in range(block_count)]


def frame_positions(block_count: int, w: int) -> list[int]:
    return [b * (w + 1) + j for b in range(block_count) for j in range(w)]


def pad_frames(frames: torch.Tensor, w: int) -> tuple[torch.Tensor, int]:
    """Pad the time axis up to a multiple of ``w`` by repeating the final frame."""
    if w < 1:
        raise ValueError(f"window must be >= 1, got {w}")
    t = frames.shape[-2]
    extra = -t % w
    if extra == 0:
        return frames, t
    last = frames[..., -1:, :]
    reps = [1] * frames.dim()
    reps[-2] = extra
    return torch.cat([frames, last.repeat(*reps)], dim=-2), t


def _check_blocks(n: int, w: int) -> int:
    if w < 1:
        raise ValueError(f"window must be >= 1, got {w}")
    if n % (w + 1):
        raise ValueError(f"sequence length {n} is not a multiple of window + 1 = {w + 1}")
    return n // (w + 1)


def encoder_interleave(frames: torch.Tensor, cls: torch.Tensor, w: int) -> InterleavedSequence:
    t, d = frames.shape[-2:]
    if w < 1 or t % w:
        raise ValueError(f"frame count {t} is not divisible by window {w}")
    tq = t // w
    blocks = frames.reshape(*frames.shape[:-2], tq, w, d)
    queries = cls.reshape(d).to(frames.dtype).expand(*frames.shape[:-2], tq, 1, d)
    out = torch.cat([blocks, queries], dim=-2).reshape(*frames.shape[:-2], tq * (w + 1), d)
    return InterleavedSequence(out, w, "encoder")


def encoder_retrieve(seq: InterleavedSequence | torch.Tensor, w: int) -> torch.Tensor:
    data = seq.data if isinstance(seq, InterleavedSequence) else seq
    tq = _check_blocks(data.shape[-2], w)
    return data[..., query_positions(tq, w), :]


def decoder_interleave(queries: torch.Tensor, mask: torch.Tensor, w: int) -> InterleavedSequence:
    tq, d = queries.shape[-2:]
    if tq < 1:
        raise ValueError("need at least one query token")
    if w < 1:
        raise ValueError(f"window must be >= 1, got {w}")
    masks = mask.reshape(d).to(queries.dtype).expand(*queries.shape[:-2], tq, w, d)
    out = torch.cat([masks, queries.unsqueeze(-2)], dim=-2).reshape(*queries.shape[:-2], tq * (w + 1), d)
    return InterleavedSequence(out, w, "decoder")


def decoder_retrieve(seq: InterleavedSequence | torch.Tensor, w: int) -> torch.Tensor:
    data = seq.data if isinstance(seq, InterleavedSequence) else seq
    tq = _check_blocks(data.shape[-2], w)
    return data[..., frame_positions(tq, w), :]


def drop_queries(seq: InterleavedSequence | torch.Tensor, w: int) -> torch.Tensor:
    """Frame rows of an encoder-side sequence, in original order."""
    return decoder_retrieve(seq, w)
