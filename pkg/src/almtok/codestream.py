"""Binary container for discrete codes.

Layout (little-endian)::

    offset size field
    0      4    magic  b"ALMC"
    4      2    version (u16)
    6      4    sample_rate (u32)
    10     2    patch_size (u16)
    12     1    window (u8)
    13     1    layers L (u8)
    14     4    codebook size C (u32)
    18     4    Tq (u32)
    22     8    original_sample_count (u64)
    30     ...  Tq * L codes, u16, position-major then layer

Codes are stored as u16 regardless of log2(C), so file size is not the
information bitrate.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"ALMC"
VERSION = 1
HEADER = struct.Struct("<4sHIHBBIIQ")
HEADER_SIZE = HEADER.size  # 30


class CodeStreamError(ValueError):
    pass


@dataclass
class CodeStream:
    sample_rate: int
    patch_size: int
    window: int
    codebook_size: int
    original_len: int
    codes: np.ndarray  # (Tq, L) integer
    version: int = VERSION

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if codes.ndim != 2 or codes.shape[1] < 1:
            raise CodeStreamError(f"codes must be (Tq, L) with L >= 1, got shape {codes.shape}")
        if not np.issubdtype(codes.dtype, np.integer):
            raise CodeStreamError("codes must be integers")
        for name, value, hi in (
            ("sample_rate", self.sample_rate, 2**32 - 1),
            ("patch_size", self.patch_size, 2**16 - 1),
            ("window", self.window, 255),
            ("layers", codes.shape[1], 255),
            ("codebook_size", self.codebook_size, 2**16),
            ("original_sample_count", self.original_len, 2**64 - 1),
        ):
            if not 0 < value <= hi and not (name == "original_sample_count" and value == 0):
                raise CodeStreamError(f"field {name}={value} out of range")
        if codes.size and (codes.min() < 0 or codes.max() >= self.codebook_size):
            raise CodeStreamError(f"field codes: out-of-range code (C={self.codebook_size})")
        self.codes = codes.astype(np.int64)

    @property
    def num_queries(self) -> int:
        return self.codes.shape[0]

    @property
    def layers(self) -> int:
        return self.codes.shape[1]

    def to_bytes(self) -> bytes:
        header = HEADER.pack(
            MAGIC, self.version, self.sample_rate, self.patch_size, self.window, self.layers,
            self.codebook_size, self.num_queries, self.original_len,
        )
        return header + self.codes.astype("<u2").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CodeStream":
        if len(blob) < HEADER_SIZE:
            raise CodeStreamError(f"field header: truncated ({len(blob)} < {HEADER_SIZE} bytes)")
        magic, version, sr, patch, window, layers, c, tq, n = HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise CodeStreamError(f"field magic: expected {MAGIC!r}, got {magic!r}")
        if version != VERSION:
            raise CodeStreamError(f"field version: unsupported {version}")
        if layers < 1:
            raise CodeStreamError("field layers: must be >= 1")
        if c < 1:
            raise CodeStreamError("field codebook_size: must be >= 1")
        expected = 2 * tq * layers
        payload = blob[HEADER_SIZE:]
        if len(payload) != expected:
            raise CodeStreamError(f"field Tq: payload has {len(payload)} bytes, header implies {expected}")
        codes = np.frombuffer(payload, dtype="<u2").reshape(tq, layers)
        return cls(sr, patch, window, c, n, codes, version)

    def check_against(self, sample_rate: int, patch_size: int, layers: int, codebook_size: int, windows) -> None:
        """Raise naming the first header field that disagrees with a model config."""
        for name, got, want in (
            ("sample_rate", self.sample_rate, sample_rate),
            ("patch_size", self.patch_size, patch_size),
            ("layers", self.layers, layers),
            ("codebook_size", self.codebook_size, codebook_size),
        ):
            if got != want:
                raise CodeStreamError(f"field {name}: file has {got}, model expects {want}")
        if self.window not in windows:
            raise CodeStreamError(f"field window: {self.window} not in model window set {list(windows)}")


def write_codestream(stream: CodeStream, path: str | Path) -> None:
    Path(path).write_bytes(stream.to_bytes())


def read_codestream(path: str | Path) -> CodeStream:
    return CodeStream.from_bytes(Path(path).read_bytes())
