"""Checkpoint container: JSON manifest + raw little-endian tensor payload.

Layout::

    magic "ALMK" | u32 version | u64 manifest_length | manifest (UTF-8 JSON) | payload

The manifest lists every tensor as ``{name, dtype, shape, offset, nbytes}``
with offsets relative to the payload start, plus ``payload_bytes`` and the
payload ``sha256``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

MAGIC = b"ALMK"
VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_DTYPES_INV = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    """Corrupt checkpoint or a checkpoint incompatible with the current config."""


@dataclass
class Checkpoint:
    kind: str  # "stage1" | "stage2" | "single"
    tensors: dict[str, torch.Tensor]
    config: dict[str, Any]
    step: int = 0
    meta: dict[str, Any] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list, repr=False)

    def group(self, prefix: str) -> dict[str, torch.Tensor]:
        p = prefix + "/"
        return {k[len(p) :]: v for k, v in self.tensors.items() if k.startswith(p)}

    def checksum(self, prefix: str = "model") -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.group(prefix).items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def module_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    entries, chunks, offset = [], [], 0
    for name, t in ckpt.tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {t.dtype}")
        buf = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    payload = b"".join(chunks)
    manifest = {
        "kind": ckpt.kind,
        "step": ckpt.step,
        "config": ckpt.config,
        "meta": ckpt.meta,
        "tensors": entries,
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    text = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(text)))
        fh.write(text)
        fh.write(payload)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic (expected {MAGIC!r})")
    version, mlen = struct.unpack_from("<IQ", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if 16 + mlen > len(raw):
        raise CheckpointError(f"{path}: manifest_length {mlen} exceeds file size {len(raw)} (truncated file)")
    try:
        manifest = json.loads(raw[16 : 16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest: {exc}") from exc
    for key in ("kind", "step", "config", "tensors", "payload_bytes", "sha256"):
        if key not in manifest:
            raise CheckpointError(f"{path}: manifest missing field {key!r}")
    payload = raw[16 + mlen :]
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(
            f"{path}: payload_bytes mismatch ({len(payload)} on disk, {manifest['payload_bytes']} in manifest; truncated file?)"
        )
    if hashlib.sha256(payload).hexdigest() != manifest["sha256"]:
        raise CheckpointError(f"{path}: sha256 mismatch (payload corrupted)")
    tensors = {}
    for e in manifest["tensors"]:
        dtype = e["dtype"]
        if dtype not in _DTYPES_INV:
            raise CheckpointError(f"{path}: tensor {e['name']!r} has unknown dtype {dtype!r}")
        start, end = e["offset"], e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {e['name']!r} offset beyond payload")
        arr = np.frombuffer(payload[start:end], dtype=dtype).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.copy())
    return Checkpoint(manifest["kind"], tensors, manifest["config"], manifest["step"], manifest.get("meta", {}))


def load_into(module: nn.Module, tensors: dict[str, torch.Tensor], prefix: str = "", strict: bool = True) -> None:
    """Copy tensors into ``module``, naming the offending tensor on any shape mismatch."""
    own = module.state_dict()
    for name, value in tensors.items():
        if name not in own:
            if strict:
                raise CheckpointError(f"unexpected tensor {prefix}{name!r} not present in the current model")
            continue
        if tuple(own[name].shape) != tuple(value.shape):
            raise CheckpointError(
                f"shape mismatch for tensor {prefix}{name!r}: checkpoint {tuple(value.shape)} vs model {tuple(own[name].shape)}"
            )
    if strict:
        missing = sorted(set(own) - set(tensors))
        if missing:
            raise CheckpointError(f"checkpoint lacks tensor {prefix}{missing[0]!r} (and {len(missing) - 1} more)")
    with torch.no_grad():
        for name, value in tensors.items():
            if name in own:
                own[name].copy_(value)


def flatten_optimizer(opt: torch.optim.Optimizer, prefix: str) -> tuple[dict[str, torch.Tensor], dict]:
    sd = opt.state_dict()
    tensors = {}
    for idx, state in sd["state"].items():
        for key, value in state.items():
            t = value if torch.is_tensor(value) else torch.tensor(value)
            tensors[f"{prefix}/{idx}/{key}"] = t
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()} for g in sd["param_groups"]]
    return tensors, {"param_groups": groups}


def restore_optimizer(opt: torch.optim.Optimizer, ckpt: Checkpoint, prefix: str) -> None:
    state: dict[int, dict] = {}
    for name, t in ckpt.group(prefix).items():
        idx, key = name.split("/", 1)
        state.setdefault(int(idx), {})[key] = t.clone()
    groups = ckpt.meta[prefix]["param_groups"]
    for g in groups:
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
    opt.load_state_dict({"state": state, "param_groups": groups})
