"""Binary tensor container used for checkpoints ("PBRK" files).

Layout, all little-endian:

    magic b"PBRK" | u32 version (= 1) | u32 tensor count
    per tensor:
        u16 name length | name bytes (UTF-8) | u8 rank | rank * u64 dims |
        float32 payload, row-major
    trailer: u64 holding the CRC-32 of all payload bytes in file order

Tensors are written in the order of the supplied mapping, so two writes of
the same mapping are byte-identical.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import DataError

MAGIC = b"PBRK"
VERSION = 1


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    crc = 0
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, value in tensors.items():
            arr = np.ascontiguousarray(value, dtype=np.float32)
            name_b = name.encode("utf-8")
            if len(name_b) > 0xFFFF:
                raise DataError(f"tensor name too long: {name!r}")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            payload = arr.tobytes()
            crc = zlib.crc32(payload, crc)
            fh.write(payload)
        fh.write(struct.pack("<Q", crc))


def read_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: not a PBRK container")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    offset = 12
    tensors: dict[str, np.ndarray] = {}
    crc = 0
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        dims = struct.unpack_from(f"<{rank}Q", blob, offset)
        offset += 8 * rank
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = blob[offset : offset + 4 * size]
        if len(payload) != 4 * size:
            raise DataError(f"{path}: truncated payload for tensor {name!r}")
        crc = zlib.crc32(payload, crc)
        offset += 4 * size
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if offset + 8 > len(blob):
        raise DataError(f"{path}: missing CRC trailer")
    (stored,) = struct.unpack_from("<Q", blob, offset)
    if stored != crc:
        raise DataError(f"{path}: CRC mismatch, file is corrupt")
    return tensors
