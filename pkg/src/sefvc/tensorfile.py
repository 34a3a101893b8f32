"""Single-tensor file container.

Layout: one JSON header line ``{"dtype": "f32", "shape": [...], "meta": {...}}``
terminated by ``\\n``, then the raw little-endian float32 payload in row-major
order. Header keys are written sorted so that write -> read -> write is
byte-identical.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .exceptions import TensorFileError

_DTYPE = np.dtype("<f4")


@dataclass
class TensorFile:
    values: np.ndarray
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)


def _encode_header(shape, meta) -> bytes:
    header = {"dtype": "f32", "shape": [int(s) for s in shape], "meta": meta}
    text = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return text.encode("utf-8") + b"\n"


def to_bytes(values, meta: dict[str, Any] | None = None) -> bytes:
    arr = np.ascontiguousarray(np.asarray(values), dtype=_DTYPE)
    return _encode_header(arr.shape, meta or {}) + arr.tobytes(order="C")


def from_bytes(blob: bytes) -> TensorFile:
    nl = blob.find(b"\n")
    if nl < 0:
        raise TensorFileError("missing header terminator")
    try:
        header = json.loads(blob[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorFileError(f"corrupt header: {exc}") from exc
    if not isinstance(header, dict) or header.get("dtype") != "f32":
        raise TensorFileError(f"unsupported dtype {header.get('dtype') if isinstance(header, dict) else None!r}")
    shape = header.get("shape")
    if not isinstance(shape, list) or any(not isinstance(s, int) or s < 0 for s in shape):
        raise TensorFileError(f"bad shape {shape!r}")
    payload = blob[nl + 1 :]
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    if len(payload) != expected:
        raise TensorFileError(f"payload is {len(payload)} bytes, header declares {expected}")
    values = np.frombuffer(payload, dtype=_DTYPE).reshape(shape).copy()
    return TensorFile(values=values, meta=header.get("meta") or {})


def write_tensor(path, values, meta: dict[str, Any] | None = None) -> None:
    """Write ``values`` atomically (tmp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(to_bytes(values, meta))
    os.replace(tmp, path)


def read_tensor(path) -> TensorFile:
    path = Path(path)
    if not path.is_file():
        raise TensorFileError(f"no such file: {path}")
    return from_bytes(path.read_bytes())


def pack_tensors(tensors: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> bytes:
    """Pack several named arrays into one flat TensorFile.

    The index (offset, shape) of every entry is stored under ``meta["index"]``.
    """
    index = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=_DTYPE)
        index[name] = {"offset": offset, "shape": list(arr.shape)}
        chunks.append(arr.reshape(-1))
        offset += arr.size
    flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype=_DTYPE)
    full_meta = dict(meta or {})
    full_meta["index"] = index
    return to_bytes(flat, full_meta)


def unpack_tensors(tf: TensorFile) -> dict[str, np.ndarray]:
    index = tf.meta.get("index")
    if not isinstance(index, dict):
        raise TensorFileError("container has no tensor index")
    flat = tf.values.reshape(-1)
    out = {}
    for name, entry in index.items():
        shape = entry["shape"]
        size = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        if start + size > flat.size:
            raise TensorFileError(f"entry {name!r} runs past the payload")
        out[name] = flat[start : start + size].reshape(shape).copy()
    return out
