"""ARCK binary checkpoints: named float64 tensors with a per-entry frozen flag.

Layout (little-endian)::

    b"ARCK" | version u32 | count u32
    per entry: name_len u32 | utf-8 name | frozen u8 | rank u32 | extents u32*rank | f64*prod(extents)
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .tensor import Parameter

MAGIC = b"ARCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Entry:
    name: str
    values: np.ndarray
    frozen: bool


class Checkpoint:
    """Ordered mapping of entry name -> :class:`Entry`."""

    def __init__(self, entries: Iterable[Entry] = ()):
        self.entries: dict[str, Entry] = {}
        for e in entries:
            if e.name in self.entries:
                raise CheckpointError(f"duplicate entry name {e.name!r}")
            self.entries[e.name] = e

    @classmethod
    def from_parameters(cls, params: Iterable[Parameter]) -> "Checkpoint":
        return cls(Entry(p.name, p.values.copy(), p.frozen) for p in params)

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __getitem__(self, name: str) -> Entry:
        return self.entries[name]

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return list(self.entries)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<II", VERSION, len(self.entries)))
        for e in self.entries.values():
            name = e.name.encode("utf-8")
            values = np.asarray(e.values, dtype="<f8")
            buf.write(struct.pack("<I", len(name)))
            buf.write(name)
            buf.write(struct.pack("<BI", 1 if e.frozen else 0, values.ndim))
            buf.write(struct.pack(f"<{values.ndim}I", *values.shape))
            buf.write(np.ascontiguousarray(values).tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        view = memoryview(data)
        if len(data) < 12 or bytes(view[:4]) != MAGIC:
            raise CheckpointError("not an ARCK checkpoint (bad magic)")
        version, count = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported ARCK version {version}")
        pos = 12
        entries = []
        try:
            for _ in range(count):
                (name_len,) = struct.unpack_from("<I", data, pos)
                pos += 4
                name = bytes(view[pos:pos + name_len]).decode("utf-8")
                pos += name_len
                frozen, rank = struct.unpack_from("<BI", data, pos)
                pos += 5
                shape = struct.unpack_from(f"<{rank}I", data, pos)
                pos += 4 * rank
                n = int(np.prod(shape, dtype=np.int64))
                if pos + 8 * n > len(data):
                    raise CheckpointError(f"truncated data for entry {name!r}")
                values = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
                pos += 8 * n
                if frozen not in (0, 1):
                    raise CheckpointError(f"bad frozen flag {frozen} for {name!r}")
                entries.append(Entry(name, values, bool(frozen)))
        except struct.error as exc:
            raise CheckpointError(f"truncated checkpoint: {exc}") from None
        if pos != len(data):
            raise CheckpointError("trailing bytes after last entry")
        return cls(entries)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def entries_identical(a: Entry, b: Entry) -> bool:
    """Bit-level comparison of two entries: frozen flag, extents and payload."""
    return a.frozen == b.frozen and a.values.shape == b.values.shape and a.values.astype("<f8").tobytes() == b.values.astype("<f8").tobytes()
