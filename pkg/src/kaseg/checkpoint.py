"""Binary checkpoints of named float32 tensors.

Layout (little-endian)::

    b"KADC" | u32 version | u64 config hash | u32 tensor count
    per tensor: u32 name length | UTF-8 name | u8 rank | u64 dims[rank] | f32 payload

Optimizer velocities and loop counters are stored as ordinary named tensors.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .nn import Module

MAGIC = b"KADC"
VERSION = 1
MAX_EXACT_INT = 2**24  # largest range of integers float32 holds exactly


class CheckpointError(ValueError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config_hash: int
    version: int = VERSION

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def scalar(self, name: str) -> int:
        if name not in self.tensors:
            raise CheckpointError(f"checkpoint has no entry {name!r}")
        return int(self.tensors[name].reshape(()))


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], config_hash: int) -> None:
    """Write atomically: a partially written file never replaces a good one."""
    path = Path(path)
    chunks = [MAGIC, struct.pack("<IQI", VERSION, config_hash & (2**64 - 1), len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise CheckpointError(f"{name}: tensors must be float32, got {arr.dtype}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    try:
        version, config_hash, count = struct.unpack_from("<IQI", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        off = 4 + struct.calcsize("<IQI")
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if off + 4 * size > len(buf):
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims)
            tensors[name] = arr.astype(np.float32)
            off += 4 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return Checkpoint(tensors, config_hash, version)


def int_tensor(value: int) -> np.ndarray:
    if not 0 <= value <= MAX_EXACT_INT:
        raise CheckpointError(f"counter {value} cannot be stored exactly")
    return np.asarray(value, dtype=np.float32)


# ---------------------------------------------------------------------------
# module state


def module_state(module: Module, prefix: str) -> dict[str, np.ndarray]:
    out = {f"param.{prefix}.{k}": v.data for k, v in module.named_parameters().items()}
    out.update({f"buffer.{prefix}.{k}": v for k, v in module.named_buffers().items()})
    return out


def load_module_state(module: Module, ckpt: Checkpoint, prefix: str) -> None:
    """Copy saved parameters and buffers into ``module`` in place."""
    targets = {f"param.{prefix}.{k}": v.data for k, v in module.named_parameters().items()}
    targets.update({f"buffer.{prefix}.{k}": v for k, v in module.named_buffers().items()})
    missing = [k for k in targets if k not in ckpt.tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks {len(missing)} entries, e.g. {missing[0]!r}")
    for name, dst in targets.items():
        src = ckpt.tensors[name]
        if src.shape != dst.shape:
            raise CheckpointError(f"{name}: saved shape {src.shape} != model shape {dst.shape}")
        np.copyto(dst, src)


def checksum(module: Module) -> str:
    """SHA-256 over every parameter and buffer, in registry order."""
    h = hashlib.sha256()
    for name, arr in list(module_state(module, "m").items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
