"""Binary checkpoint format.

Layout, all integers little-endian::

    4 bytes   magic b"BTRW"
    u32       format version (1)
    u8        flags (bit 0: backbone-only / partial checkpoint)
    u16       descriptor length, then that many UTF-8 bytes
    u64       training step
    u32       tensor count
    per tensor:
      u16     name length, then the UTF-8 name
      u8      dtype code (0 float32, 1 float64, 2 int64)
      u8      rank
      u32     one extent per axis
      raw     C-order little-endian element data
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import BTranspose, build_model
from .nn import Module

MAGIC = b"BTRW"
VERSION = 1
FLAG_BACKBONE_ONLY = 0x01

DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODE_OF = {np.dtype(v).newbyteorder("="): k for k, v in DTYPE_CODES.items()}


class CheckpointError(Exception):
    """Base class for unreadable or incompatible checkpoints."""


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class UnknownTensorError(CheckpointError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


@dataclass
class Checkpoint:
    descriptor: str
    step: int = 0
    flags: int = 0
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def backbone_only(self) -> bool:
        return bool(self.flags & FLAG_BACKBONE_ONLY)


def encode(ckpt: Checkpoint) -> bytes:
    name = ckpt.descriptor.encode("utf-8")
    parts = [MAGIC, struct.pack("<IBH", VERSION, ckpt.flags, len(name)), name,
             struct.pack("<QI", ckpt.step, len(ckpt.tensors))]
    for key, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        code = _CODE_OF.get(arr.dtype.newbyteorder("="))
        if code is None:
            raise TypeError(f"tensor {key!r} has unsupported dtype {arr.dtype}")
        kb = key.encode("utf-8")
        parts.append(struct.pack("<H", len(kb)) + kb + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"file ends inside {what} (need {n} bytes at offset {self.pos}, "
                                 f"have {len(self.data) - self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"not a checkpoint: magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version}, this reader supports {VERSION}")
    flags, n_name = r.unpack("<BH", "header")
    descriptor = r.take(n_name, "descriptor").decode("utf-8")
    step, count = r.unpack("<QI", "header")
    tensors = {}
    for i in range(count):
        (n_key,) = r.unpack("<H", f"tensor {i} name length")
        key = r.take(n_key, f"tensor {i} name").decode("utf-8")
        code, rank = r.unpack("<BB", f"tensor {key} header")
        if code not in DTYPE_CODES:
            raise CheckpointError(f"tensor {key!r} has unknown dtype code {code}")
        shape = r.unpack(f"<{rank}I", f"tensor {key} extents")
        dt = DTYPE_CODES[code]
        raw = r.take(int(np.prod(shape, dtype=np.int64)) * dt.itemsize, f"tensor {key} data")
        tensors[key] = np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after the last tensor")
    return Checkpoint(descriptor, step, flags, tensors)


def save_checkpoint(model: BTranspose, path, step: int = 0, prefixes: tuple[str, ...] | None = None) -> Path:
    """Write ``model``; with ``prefixes`` only matching tensors are kept and the partial flag is set."""
    state = model.state_dict()
    flags = 0
    if prefixes is not None:
        state = {k: v for k, v in state.items() if k.startswith(prefixes)}
        flags |= FLAG_BACKBONE_ONLY
    ckpt = Checkpoint(model.spec.descriptor(), step, flags, dict(state))
    path = Path(path)
    path.write_bytes(encode(ckpt))
    return path


def read_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def apply_tensors(module: Module, tensors: dict[str, np.ndarray], require_all: bool = True) -> list[str]:
    own = set(module.state_dict())
    unknown = [k for k in tensors if k not in own]
    if unknown:
        raise UnknownTensorError(f"checkpoint tensors not present in the model: {unknown[:5]}")
    if require_all:
        missing = [k for k in own if k not in tensors]
        if missing:
            raise CheckpointError(f"checkpoint lacks model tensors: {missing[:5]}")
    return module.load_state_dict(tensors, strict=False)


def load_checkpoint(path, seed: int = 0) -> tuple[BTranspose, Checkpoint]:
    """Rebuild the model named in the file and load its tensors.

    A partial (backbone-only) file fills the tensors it has; the remaining
    ones keep their seeded initialization.
    """
    ckpt = read_checkpoint(path)
    model = build_model(ckpt.descriptor, seed=seed)
    apply_tensors(model, ckpt.tensors, require_all=not ckpt.backbone_only)
    return model, ckpt


def load_pretrained(model: BTranspose, path) -> list[str]:
    """Initialize ``model`` from a (usually partial) checkpoint; returns the loaded tensor names."""
    return apply_tensors(model, read_checkpoint(path).tensors, require_all=False)
