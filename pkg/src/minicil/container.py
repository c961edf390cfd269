"""Flat binary container for named float64 arrays (magic "CILB1").

Layout, all little-endian:
    magic           5 bytes  b"CILB1"
    n_meta          u32
    meta            n_meta x i32
    n_arrays        u32
    per array:
        name_len    u32
        name        utf-8 bytes
        rank        u32
        extents     rank x u32
        payload     float64 raw, row-major

Round-trips bit-exactly; malformed input raises ParseError naming the
offending field and byte offset.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ParseError

MAGIC = b"CILB1"


def write_container(path, meta, arrays) -> None:
    """Write integer metadata and an ordered {name: float64 array} mapping."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(meta)))
        for value in meta:
            fh.write(struct.pack("<i", int(value)))
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(arr.astype("<f8", copy=False).tobytes())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, count: int, field: str) -> bytes:
        if self.offset + count > len(self.blob):
            raise ParseError(
                f"truncated container: needed {count} bytes for {field} "
                f"at offset {self.offset}, have {len(self.blob) - self.offset}"
            )
        piece = self.blob[self.offset : self.offset + count]
        self.offset += count
        return piece

    def u32(self, field: str) -> int:
        return struct.unpack("<I", self.take(4, field))[0]

    def i32(self, field: str) -> int:
        return struct.unpack("<i", self.take(4, field))[0]


def read_container(path):
    """Read back (meta list, {name: array}) written by write_container."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise ParseError(f"bad magic at offset 0: expected {MAGIC!r}")
    meta = [r.i32(f"meta[{i}]") for i in range(r.u32("n_meta"))]
    arrays = {}
    for k in range(r.u32("n_arrays")):
        name_len = r.u32(f"array[{k}].name_len")
        try:
            name = r.take(name_len, f"array[{k}].name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"array[{k}].name is not valid utf-8: {exc}") from None
        rank = r.u32(f"{name}.rank")
        shape = tuple(r.u32(f"{name}.extent[{i}]") for i in range(rank))
        count = int(np.prod(shape)) if shape else 1
        payload = r.take(count * 8, f"{name}.payload")
        arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    if r.offset != len(blob):
        raise ParseError(f"{len(blob) - r.offset} trailing bytes after offset {r.offset}")
    return meta, arrays
