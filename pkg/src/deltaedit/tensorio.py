"""Binary containers: single tensors (F32T) and named-tensor checkpoints (F32K).

F32T layout, all little-endian::

    b"F32T" | u8 version | u32 rank | u32 dim * rank | f32 data (row-major)

F32K layout::

    b"F32K" | u8 version | u32 header_len | header (UTF-8 JSON) | f32 blob

The F32K header holds ``{"config": {...}, "tensors": [{"name", "shape",
"offset"}]}`` where ``offset`` counts float32 elements into the blob.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError

TENSOR_MAGIC = b"F32T"
TENSOR_VERSION = 1
CHECKPOINT_MAGIC = b"F32K"
CHECKPOINT_VERSION = 1


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_tensor(array) -> bytes:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    head = TENSOR_MAGIC + struct.pack("<BI", TENSOR_VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def decode_tensor(payload: bytes) -> np.ndarray:
    if payload[:4] != TENSOR_MAGIC:
        raise FormatError("not an F32T tensor (bad magic)")
    version, rank = struct.unpack_from("<BI", payload, 4)
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported F32T version {version}")
    off = 9
    dims = struct.unpack_from(f"<{rank}I", payload, off)
    off += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(payload) - off != 4 * count:
        raise FormatError(f"F32T payload holds {len(payload) - off} bytes, expected {4 * count}")
    return np.frombuffer(payload, dtype="<f4", count=count, offset=off).reshape(dims).copy()


def save_tensor(path, array) -> None:
    atomic_write_bytes(path, encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def save_checkpoint(path, tensors: dict[str, np.ndarray], config: dict) -> None:
    entries, blobs, offset = [], [], 0
    for name, value in tensors.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype="<f4"))
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes(order="C"))
        offset += arr.size
    header = json.dumps({"config": config, "tensors": entries}, sort_keys=True).encode("utf-8")
    payload = CHECKPOINT_MAGIC + struct.pack("<BI", CHECKPOINT_VERSION, len(header)) + header + b"".join(blobs)
    atomic_write_bytes(path, payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    payload = Path(path).read_bytes()
    if payload[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not an F32K checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<BI", payload, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header = json.loads(payload[9 : 9 + hlen].decode("utf-8"))
    blob = np.frombuffer(payload, dtype="<f4", offset=9 + hlen)
    tensors = {}
    for entry in header["tensors"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + size > blob.size:
            raise FormatError(f"tensor {entry['name']!r} runs past the end of the checkpoint")
        tensors[entry["name"]] = blob[start : start + size].reshape(entry["shape"]).copy()
    return tensors, header["config"]
