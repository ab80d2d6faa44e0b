"""
Binary containers.

HSVT tensor: magic "HSVT", u16 version, u16 rank, rank x u32 dims, then the
row-major little-endian payload (version 1: f32, version 2: f64).

HSVA archive: magic "HSVA", u16 version, u32 manifest length, UTF-8 JSON
manifest {"entries": {name: [offset, length]}, "meta": {...}}, then the
concatenated HSVT blobs. Offsets count from the first byte after the manifest.
"""
import json
import struct
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from hsvlt.core.errors import ContainerError

TENSOR_MAGIC = b"HSVT"
ARCHIVE_MAGIC = b"HSVA"
ARCHIVE_VERSION = 1

PAYLOAD_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}

PathLike = Union[str, Path]


class ContainerKind(str, Enum):
    TENSOR = "tensor"
    ARCHIVE = "archive"
    UNKNOWN = "unknown"


def encode_tensor(array, version: int = 1) -> bytes:
    if version not in PAYLOAD_DTYPES:
        raise ContainerError(f"unsupported tensor container version {version}")
    array = np.asarray(array)
    if array.ndim > 0xFFFF or any(d > 0xFFFFFFFF for d in array.shape):
        raise ContainerError(f"shape {array.shape} does not fit the container header")
    header = TENSOR_MAGIC + struct.pack("<HH", version, array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array, dtype=PAYLOAD_DTYPES[version]).tobytes()
    return header + payload


def decode_tensor(buffer: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Decode one tensor starting at `offset`; returns (array, bytes consumed)."""
    view = memoryview(buffer)[offset:]
    if len(view) < 8 or bytes(view[:4]) != TENSOR_MAGIC:
        raise ContainerError("not an HSVT tensor container (bad magic)")
    version, rank = struct.unpack("<HH", view[4:8])
    if version not in PAYLOAD_DTYPES:
        raise ContainerError(f"unknown HSVT version {version}")
    dims_end = 8 + 4 * rank
    if len(view) < dims_end:
        raise ContainerError("truncated HSVT header")
    shape = struct.unpack(f"<{rank}I", view[8:dims_end])
    dtype = PAYLOAD_DTYPES[version]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(view) < dims_end + nbytes:
        raise ContainerError(f"truncated HSVT payload: expected {nbytes} bytes for shape {shape}")
    array = np.frombuffer(view[dims_end:dims_end + nbytes], dtype=dtype).reshape(shape)
    return array.astype(dtype.newbyteorder("="), copy=True), dims_end + nbytes


def save_tensor(path: PathLike, array, version: int = 1) -> None:
    Path(path).write_bytes(encode_tensor(array, version))


def load_tensor(path: PathLike) -> np.ndarray:
    buffer = _read(path)
    array, consumed = decode_tensor(buffer)
    if consumed != len(buffer):
        raise ContainerError(f"{path}: {len(buffer) - consumed} trailing bytes after tensor payload")
    return array


def save_archive(path: PathLike, tensors: Dict[str, np.ndarray], meta: Optional[Dict[str, Any]] = None,
                 version: int = 2) -> None:
    blobs, entries, offset = [], {}, 0
    for name, array in tensors.items():
        blob = encode_tensor(array, version)
        entries[name] = [offset, len(blob)]
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"entries": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    header = ARCHIVE_MAGIC + struct.pack("<HI", ARCHIVE_VERSION, len(manifest))
    Path(path).write_bytes(header + manifest + b"".join(blobs))


def load_archive(path: PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    buffer = _read(path)
    if len(buffer) < 10 or buffer[:4] != ARCHIVE_MAGIC:
        raise ContainerError(f"{path}: not an HSVA archive (bad magic)")
    version, manifest_len = struct.unpack("<HI", buffer[4:10])
    if version != ARCHIVE_VERSION:
        raise ContainerError(f"{path}: unknown HSVA version {version}")
    data_start = 10 + manifest_len
    try:
        manifest = json.loads(buffer[10:data_start].decode("utf-8"))
        entries = manifest["entries"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise ContainerError(f"{path}: unreadable archive manifest") from exc

    tensors = {}
    for name, (offset, length) in entries.items():
        start = data_start + offset
        if start + length > len(buffer):
            raise ContainerError(f"{path}: entry {name!r} runs past the end of the archive")
        array, consumed = decode_tensor(buffer[start:start + length])
        if consumed != length:
            raise ContainerError(f"{path}: entry {name!r} length does not match its payload")
        tensors[name] = array
    return tensors, manifest.get("meta", {})


def detect_container_kind(path: PathLike) -> ContainerKind:
    """Identify a file by its magic bytes."""
    try:
        with open(path, "rb") as handle:
            magic = handle.read(4)
    except OSError:
        return ContainerKind.UNKNOWN
    if magic == TENSOR_MAGIC:
        return ContainerKind.TENSOR
    if magic == ARCHIVE_MAGIC:
        return ContainerKind.ARCHIVE
    return ContainerKind.UNKNOWN


def _read(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise ContainerError(f"cannot read {path}: {exc}") from exc
