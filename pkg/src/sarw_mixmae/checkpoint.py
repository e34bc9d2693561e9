"""Binary checkpoint format.

Layout (little-endian)::

    b"SWCK" | u16 version | 32-byte config fingerprint
    repeated until EOF:
        u16 name length | UTF-8 name | u8 rank | u32 dims[rank] | float32 data

Blob namespaces: ``param/`` model tensors, ``adam_m/`` and ``adam_v/``
optimizer moments, ``meta/`` nonnegative integers (step, seed, ...) split
into four 16-bit limbs so they survive the float32 encoding exactly.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .errors import CheckpointError

MAGIC = b"SWCK"
VERSION = 1
_HEAD = struct.Struct("<4sH32s")
_LIMBS = 4


def _int_to_limbs(n: int) -> np.ndarray:
    if not 0 <= n < 2 ** (16 * _LIMBS):
        raise CheckpointError(f"meta value {n} outside the 64-bit unsigned range")
    return np.array([(n >> (16 * i)) & 0xFFFF for i in range(_LIMBS)], dtype=np.float32)


def _limbs_to_int(a: np.ndarray) -> int:
    return sum(int(v) << (16 * i) for i, v in enumerate(a.tolist()))


def write_blobs(path, fingerprint: bytes, blobs: dict) -> None:
    """Write ``blobs`` (name -> array) atomically."""
    if len(fingerprint) != 32:
        raise CheckpointError("fingerprint must be 32 bytes")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, fingerprint))
        for name, arr in blobs.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw_name)) + raw_name)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    os.replace(tmp, path)


def read_blobs(path):
    """Return ``(fingerprint, {name: float32 array})``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _HEAD.size:
        raise CheckpointError(f"truncated checkpoint header in {path}")
    magic, version, fp = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r} in {path}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = _HEAD.size
    blobs = {}
    try:
        while pos < len(raw):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            end = pos + 4 * count
            if end > len(raw):
                raise CheckpointError(f"truncated blob {name!r} in {path}")
            blobs[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
            pos = end
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint {path}") from exc
    return fp, blobs


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return self.meta.get("step", 0)

    def save(self, path) -> Path:
        blobs = {}
        for prefix, group in (("param/", self.params), ("adam_m/", self.adam_m), ("adam_v/", self.adam_v)):
            for name, value in group.items():
                blobs[prefix + name] = _as_numpy(value)
        for key, value in self.meta.items():
            blobs["meta/" + key] = _int_to_limbs(int(value))
        write_blobs(path, self.config.fingerprint(), blobs)
        return Path(path)

    @classmethod
    def load(cls, path, config: ModelConfig) -> "Checkpoint":
        """Read ``path``, rejecting it unless written for ``config``."""
        fp, blobs = read_blobs(path)
        if fp != config.fingerprint():
            raise CheckpointError(f"checkpoint {path} was written for a different model configuration")
        ck = cls(config, {})
        groups = {"param": ck.params, "adam_m": ck.adam_m, "adam_v": ck.adam_v}
        for name, arr in blobs.items():
            prefix, _, rest = name.partition("/")
            if prefix == "meta":
                ck.meta[rest] = _limbs_to_int(arr)
            elif prefix in groups:
                groups[prefix][rest] = arr
            else:
                raise CheckpointError(f"unknown blob namespace in {name!r}")
        return ck


def _as_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    return np.asarray(value, dtype=np.float32)


def module_state(module: torch.nn.Module) -> dict:
    return {k: v.detach().cpu().numpy().astype(np.float32) for k, v in module.state_dict().items()}


def load_module_state(module: torch.nn.Module, params: dict, prefix: str = "", strict: bool = True) -> list:
    """Copy ``params`` into ``module``; names under ``prefix`` map onto the module.

    Returns module keys that were not found.  Shape disagreements always
    raise; missing keys raise when ``strict``.
    """
    state = module.state_dict()
    missing = []
    with torch.no_grad():
        for key, tensor in state.items():
            src = params.get(prefix + key)
            if src is None:
                missing.append(key)
                continue
            if tuple(src.shape) != tuple(tensor.shape):
                raise CheckpointError(f"shape mismatch for {key}: checkpoint {src.shape} vs model {tuple(tensor.shape)}")
            tensor.copy_(torch.from_numpy(np.asarray(src)).to(tensor.dtype))
    if strict and missing:
        raise CheckpointError(f"checkpoint lacks parameters {missing[:5]}{'...' if len(missing) > 5 else ''}")
    return missing
