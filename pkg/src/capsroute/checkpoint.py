"""Binary checkpoint container.

Layout (all multi-byte header ints big-endian, tensor payloads little-endian):

    magic   4 bytes   b"CRCK"
    version 1 byte    currently 1
    u16     number of metadata entries
      per entry: u16 byte-length, then that many UTF-8 bytes of "key=value"
    u16     number of tensors
      per tensor: u16 name length, UTF-8 name,
                  u8 dtype code (0=float32, 1=float64, 2=int64),
                  u8 rank, rank x u32 extents,
                  raw contiguous row-major payload

Any truncation or unknown code raises FormatError with the byte offset.
"""

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"CRCK"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


def save_checkpoint(path: str, tensors: dict[str, np.ndarray], metadata: dict[str, str]) -> None:
    chunks = [MAGIC, struct.pack(">B", VERSION), struct.pack(">H", len(metadata))]
    for key, value in metadata.items():
        entry = f"{key}={value}".encode("utf-8")
        chunks.append(struct.pack(">H", len(entry)) + entry)
    chunks.append(struct.pack(">H", len(tensors)))
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr)
        if a.dtype not in _CODES:
            a = a.astype(np.float64)
        nm = name.encode("utf-8")
        chunks.append(struct.pack(">H", len(nm)) + nm)
        chunks.append(struct.pack(">BB", _CODES[a.dtype], a.ndim))
        chunks.append(struct.pack(f">{a.ndim}I", *a.shape))
        chunks.append(a.astype(a.dtype.newbyteorder("<")).tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"checkpoint truncated at byte {len(self.blob)} (need {self.pos + n})")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0")
    version = r.u8()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    metadata = {}
    for _ in range(r.u16()):
        entry = r.take(r.u16()).decode("utf-8")
        key, _, value = entry.partition("=")
        metadata[key] = value
    tensors = {}
    for _ in range(r.u16()):
        name = r.take(r.u16()).decode("utf-8")
        code = r.u8()
        if code not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code} at byte {r.pos - 1}")
        ndim = r.u8()
        shape = struct.unpack(f">{ndim}I", r.take(4 * ndim))
        dt = _DTYPES[code]
        raw = r.take(int(np.prod(shape, dtype=np.int64)) * dt.itemsize)
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    return tensors, metadata
