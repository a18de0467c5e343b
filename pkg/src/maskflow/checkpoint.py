"""Binary container for named float32 tensors plus JSON metadata.

Layout::

    b"M2F1" | uint32 version | uint64 header length | JSON header | payload

The header holds ``meta`` (free-form) and ``tensors``, a directory mapping
each name to its shape, byte offset into the payload and dtype. The payload
is contiguous little-endian float32. Headers are written with sorted keys so
identical inputs give identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"M2F1"
VERSION = 1
DTYPE = "<f4"


class CheckpointError(ValueError):
    """Raised for malformed or incompatible checkpoint files."""


def to_bytes(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    directory = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=DTYPE)  # tobytes() is C-order; keeps 0-d shapes
        directory[name] = {"shape": list(arr.shape), "offset": offset, "dtype": "float32"}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"meta": meta or {}, "tensors": directory}, sort_keys=True,
                        separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)


def from_bytes(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not an M2F1 file (bad magic)")
    if len(blob) < 16:
        raise CheckpointError("truncated header")
    version, hlen = struct.unpack("<IQ", blob[4:16])
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    try:
        header = json.loads(blob[16:16 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    payload = memoryview(blob)[16 + hlen:]
    tensors = {}
    spans = []
    for name, entry in header["tensors"].items():
        if entry.get("dtype") != "float32":
            raise CheckpointError(f"{name}: unsupported dtype {entry.get('dtype')}")
        shape = tuple(entry["shape"])
        start = int(entry["offset"])
        end = start + 4 * int(np.prod(shape, dtype=np.int64))
        if start < 0 or end > len(payload):
            raise CheckpointError(f"{name}: tensor extends past end of payload")
        spans.append((start, end, name))
        tensors[name] = np.frombuffer(payload[start:end], dtype=DTYPE).reshape(shape).copy()
    spans.sort()
    for (_, e1, n1), (s2, _, n2) in zip(spans, spans[1:]):
        if s2 < e1:
            raise CheckpointError(f"tensors {n1} and {n2} overlap")
    return tensors, header["meta"]


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> str:
    """Write a checkpoint; returns its sha256 hex digest."""
    blob = to_bytes(tensors, meta)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return hashlib.sha256(blob).hexdigest()


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OSError(f"could not read checkpoint {path}: {exc}") from exc
    try:
        return from_bytes(blob)
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from None


def save_matrix(path, matrix, meta: dict | None = None) -> str:
    """A matrix is a one-tensor checkpoint named ``matrix``."""
    return save(path, {"matrix": np.asarray(matrix)}, meta)


def load_matrix(path) -> np.ndarray:
    tensors, _ = load(path)
    if "matrix" not in tensors:
        raise CheckpointError(f"{path}: no 'matrix' tensor")
    return tensors["matrix"]


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
