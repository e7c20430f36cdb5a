"""Flat named-tensor container (``.csa`` files).

Layout, all integers little-endian::

    b"CSA1"
    u32 entry_count
    entry_count x { u16 name_len, name (utf-8), u8 dtype (0 = float32),
                    u8 ndim, ndim x u32 dims, row-major float32 payload }
    u32 meta_count
    meta_count x { u16 key_len, key, u16 value_len, value }
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import BadMagic, DuplicateName, MissingFile, TruncatedPayload

MAGIC = b"CSA1"
DTYPE_FLOAT32 = 0


@dataclass
class CheckpointArchive:
    """Ordered float32 tensors plus a string metadata table."""

    entries: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def add(self, name: str, array) -> None:
        if name in self.entries:
            raise DuplicateName(f"duplicate tensor name {name!r}")
        self.entries[name] = np.array(array, dtype="<f4", order="C")

    @classmethod
    def from_items(cls, items: Iterable[tuple[str, np.ndarray]], metadata=None):
        archive = cls(metadata=dict(metadata or {}))
        for name, array in items:
            archive.add(name, array)
        return archive

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.entries.items() if k.startswith(prefix)}

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError(f"string too long for archive: {len(raw)} bytes")
    return struct.pack("<H", len(raw)) + raw


def encode_checkpoint(archive: CheckpointArchive) -> bytes:
    chunks = [MAGIC, struct.pack("<I", len(archive.entries))]
    for name, array in archive.entries.items():
        array = np.asarray(array, dtype="<f4", order="C")
        if array.ndim > 255:
            raise ValueError(f"{name}: rank {array.ndim} exceeds 255")
        chunks.append(_pack_str(name))
        chunks.append(struct.pack("<BB", DTYPE_FLOAT32, array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.tobytes(order="C"))
    chunks.append(struct.pack("<I", len(archive.metadata)))
    for key, value in archive.metadata.items():
        chunks.append(_pack_str(str(key)))
        chunks.append(_pack_str(str(value)))
    return b"".join(chunks)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayload(
                f"needed {n} bytes at offset {self.pos}, only {len(self.buf) - self.pos} left"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def decode_checkpoint(buf: bytes) -> CheckpointArchive:
    if buf[:4] != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, got {bytes(buf[:4])!r}")
    r = _Reader(buf)
    r.take(4)
    (count,) = r.unpack("<I")
    archive = CheckpointArchive()
    for _ in range(count):
        name = r.string()
        dtype, ndim = r.unpack("<BB")
        if dtype != DTYPE_FLOAT32:
            raise ValueError(f"{name}: unsupported dtype tag {dtype}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        data = np.frombuffer(r.take(nbytes), dtype="<f4").reshape(shape).copy()
        archive.add(name, data)
    (meta_count,) = r.unpack("<I")
    for _ in range(meta_count):
        key = r.string()
        archive.metadata[key] = r.string()
    return archive


def write_checkpoint(archive: CheckpointArchive, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(archive))


def read_checkpoint(path) -> CheckpointArchive:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())
