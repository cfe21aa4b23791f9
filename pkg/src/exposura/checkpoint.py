"""Binary weight container.

Layout (little-endian throughout):

    magic   4 bytes  b"EXPW"
    version u32      currently 1
    count   u32      number of tensors
    tensor records, each:
        name_len u16, name UTF-8, rank u8, extents u32[rank],
        float32 payload in C order
    crc32   u32      over every preceding byte

Loaders raise DataError with a distinct message for a bad magic, an
unsupported version, a truncated stream (naming the tensor where the data
ran out), and a checksum mismatch.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib

import numpy as np

from .errors import DataError

MAGIC = b"EXPW"
VERSION = 1
_MAX_RANK = 8


def save_weights(path: str, tensors: dict[str, np.ndarray]) -> None:
    """Write tensors to ``path`` atomically (temp file + rename)."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype=np.float32)
        if a.ndim > _MAX_RANK:
            raise ValueError(f"tensor {name!r} has rank {a.ndim} > {_MAX_RANK}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.astype("<f4", copy=False).tobytes())
    blob = b"".join(parts)
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)

    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".expw-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, blob: bytes, context: str):
        self.blob = blob
        self.pos = 0
        self.context = context

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise DataError(
                f"{self.context}: file truncated while reading {what} "
                f"(needed {n} bytes at offset {self.pos}, have "
                f"{len(self.blob) - self.pos})")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out


def load_weights(path: str) -> dict[str, np.ndarray]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise DataError(f"cannot read weight file {path}: {e}") from e

    r = _Reader(blob, path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise DataError(
            f"{path}: bad magic {magic!r}, expected {MAGIC!r} "
            f"(not a weight container)")
    version, count = struct.unpack("<II", r.take(8, "header"))
    if version != VERSION:
        raise DataError(f"{path}: unsupported container version {version}, "
                        f"this build reads version {VERSION}")

    if len(blob) < 4:
        raise DataError(f"{path}: file truncated before checksum")
    stored = struct.unpack("<I", blob[-4:])[0]
    actual = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored != actual:
        raise DataError(
            f"{path}: checksum mismatch (stored {stored:#010x}, computed "
            f"{actual:#010x}); file is corrupt")
    body_end = len(blob) - 4

    out: dict[str, np.ndarray] = {}
    for i in range(count):
        label = f"#{i}"
        try:
            (nlen,) = struct.unpack("<H", r.take(2, f"tensor {label} name length"))
            name = r.take(nlen, f"tensor {label} name").decode("utf-8")
            label = repr(name)
            (rank,) = struct.unpack("<B", r.take(1, f"tensor {label} rank"))
            if rank > _MAX_RANK:
                raise DataError(f"{path}: tensor {label} declares rank "
                                f"{rank}, limit is {_MAX_RANK}")
            shape = struct.unpack(f"<{rank}I",
                                  r.take(4 * rank, f"tensor {label} extents"))
            n = int(np.prod(shape, dtype=np.int64)) if rank else 1
            payload = r.take(4 * n, f"tensor {label} payload")
        except DataError as e:
            if "truncated" in str(e):
                raise DataError(f"{path}: truncated at tensor {label} "
                                f"({e})") from None
            raise
        if name in out:
            raise DataError(f"{path}: duplicate tensor name {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if r.pos != body_end:
        raise DataError(f"{path}: {body_end - r.pos} trailing bytes after "
                        f"the declared {count} tensors")
    return out
