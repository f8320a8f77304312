"""Binary checkpoint format.

Layout, all integers little-endian:

    magic   4 bytes  b"SOHO"
    version u32      currently 1
    count   u32      number of named tensors
    per tensor:
        name_len u16, name UTF-8,
        rank u8, dims u32 each,
        dtype u8 (0=float64, 1=float32, 2=int64),
        payload: row-major little-endian bytes
    meta_len   u32, meta JSON UTF-8   (epoch, optimizer counters, rng, vocab)
    config_len u32, config text UTF-8 (key = value lines)

Tensors are written sorted by name, so save -> load -> save is
byte-identical. Loading checks sizes as it goes and reports the byte
offset of the first inconsistency.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"SOHO"
VERSION = 1

_DTYPE_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1, np.dtype("<i8"): 2}
_CODE_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8")}


@dataclass
class CheckpointBundle:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    config_text: str = ""


def save_checkpoint(path: Path, bundle: CheckpointBundle) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(bundle.tensors))]
    for name in sorted(bundle.tensors):
        arr = np.ascontiguousarray(bundle.tensors[name])
        dtype = arr.dtype.newbyteorder("<")
        if dtype not in _DTYPE_CODES:
            raise ValueError(f"unsupported tensor dtype {arr.dtype} for {name!r}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        chunks.append(struct.pack("<B", _DTYPE_CODES[dtype]))
        chunks.append(arr.astype(dtype, copy=False).tobytes())
    meta_bytes = json.dumps(bundle.meta, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(meta_bytes)))
    chunks.append(meta_bytes)
    config_bytes = bundle.config_text.encode("utf-8")
    chunks.append(struct.pack("<I", len(config_bytes)))
    chunks.append(config_bytes)
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, raw: bytes, path: str):
        self.raw = raw
        self.path = path
        self.pos = 0

    def need(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"truncated while reading {what}", self.path, self.pos)
        out = self.raw[self.pos: self.pos + n]
        self.pos += n
        return out

    def u8(self, what: str) -> int:
        return self.need(1, what)[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.need(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.need(4, what))[0]


def load_checkpoint(path: Path) -> CheckpointBundle:
    path = Path(path)
    r = _Reader(path.read_bytes(), str(path))
    if r.need(4, "magic") != MAGIC:
        raise FormatError("bad magic", str(path), 0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", str(path), 4)
    count = r.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = r.u16("name length")
        name = r.need(name_len, "name").decode("utf-8")
        rank = r.u8(f"rank of {name}")
        shape = tuple(r.u32(f"dim of {name}") for _ in range(rank))
        code = r.u8(f"dtype of {name}")
        if code not in _CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name!r}", str(path), r.pos - 1)
        dtype = _CODE_DTYPES[code]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        payload = r.need(n_bytes, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    meta_len = r.u32("meta length")
    meta = json.loads(r.need(meta_len, "meta").decode("utf-8")) if meta_len else {}
    config_len = r.u32("config length")
    config_text = r.need(config_len, "config").decode("utf-8")
    return CheckpointBundle(tensors=tensors, meta=meta, config_text=config_text)
