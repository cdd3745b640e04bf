"""Binary containers for tensors (MMT1) and named tensor archives (MMC1).

MMT1 layout::

    b"MMT1" | u8 dtype code | u8 rank | rank x u64 extents | raw values

MMC1 layout::

    b"MMC1" | u32 count | count x (u32 name length, name utf-8, u64 offset, u64 length) | blobs

Offsets are absolute from the start of the archive and every blob is one
MMT1 record. All integers and values are little-endian. Entries are
written in sorted name order so archives are byte-reproducible.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

PathLike = Union[str, os.PathLike]

TENSOR_MAGIC = b"MMT1"
ARCHIVE_MAGIC = b"MMC1"
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class FormatError(ValueError):
    pass


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dtype = arr.dtype.newbyteorder("<")
    if dtype not in DTYPE_CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    header = TENSOR_MAGIC + struct.pack("<BB", DTYPE_CODES[dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != TENSOR_MAGIC:
        raise FormatError("not an MMT1 tensor")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack_from(f"<{rank}Q", buf, 6)
    start = 6 + 8 * rank
    dtype = CODE_DTYPES[code]
    count = int(np.prod(shape)) if rank else 1
    expected = start + count * dtype.itemsize
    if len(buf) != expected:
        raise FormatError(f"MMT1 payload is {len(buf)} bytes, expected {expected}")
    values = np.frombuffer(buf, dtype=dtype, count=count, offset=start)
    return values.reshape(shape).astype(dtype.newbyteorder("="))


def write_tensor(path: PathLike, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def read_tensor(path: PathLike) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def archive_to_bytes(entries: Mapping[str, np.ndarray]) -> bytes:
    names = sorted(entries)
    blobs = [tensor_to_bytes(entries[n]) for n in names]
    encoded = [n.encode("utf-8") for n in names]
    index_size = 8 + sum(4 + len(e) + 16 for e in encoded)
    out = bytearray(ARCHIVE_MAGIC + struct.pack("<I", len(names)))
    offset = index_size
    for name, blob in zip(encoded, blobs):
        out += struct.pack("<I", len(name)) + name + struct.pack("<QQ", offset, len(blob))
        offset += len(blob)
    for blob in blobs:
        out += blob
    return bytes(out)


def archive_from_bytes(buf: bytes) -> Dict[str, np.ndarray]:
    if buf[:4] != ARCHIVE_MAGIC:
        raise FormatError("not an MMC1 archive")
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    entries: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        name = buf[pos + 4 : pos + 4 + n].decode("utf-8")
        offset, length = struct.unpack_from("<QQ", buf, pos + 4 + n)
        pos += 4 + n + 16
        entries[name] = tensor_from_bytes(buf[offset : offset + length])
    return entries


def write_archive(path: PathLike, entries: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(archive_to_bytes(entries))


def read_archive(path: PathLike) -> Dict[str, np.ndarray]:
    return archive_from_bytes(Path(path).read_bytes())
