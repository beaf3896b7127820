"""Checkpoint container: a human-readable index plus one float32 blob.

A checkpoint is a directory holding ``manifest.json`` (array name ->
shape, dtype, byte offset) and ``arrays.bin``, the concatenation of all
arrays as little-endian 32-bit floats in manifest order. Round trips
are bit-exact for float32 inputs.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ValidationError

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "arrays.bin"
_DTYPE = "<f4"


def save_checkpoint(path, arrays: dict[str, np.ndarray], extra: dict | None = None) -> None:
    """Write arrays (cast to float32) and optional JSON metadata."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index: dict[str, dict] = {}
    blobs: list[bytes] = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(np.asarray(arrays[name], dtype=np.float32), dtype=_DTYPE)
        raw = arr.tobytes()
        index[name] = {
            "shape": [int(s) for s in arr.shape],
            "dtype": _DTYPE,
            "offset": offset,
        }
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format": "gaga-checkpoint",
        "version": 1,
        "extra": extra or {},
        "tensors": index,
    }
    (path / BLOB_NAME).write_bytes(b"".join(blobs))
    (path / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back arrays and metadata written by :func:`save_checkpoint`."""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise ValidationError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != "gaga-checkpoint":
        raise ValidationError(f"{manifest_path} is not a checkpoint manifest")
    blob = (path / BLOB_NAME).read_bytes()
    arrays: dict[str, np.ndarray] = {}
    for name, meta in manifest["tensors"].items():
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = meta["offset"]
        end = start + 4 * count
        if end > len(blob):
            raise ValidationError(f"checkpoint blob truncated while reading '{name}'")
        arrays[name] = np.frombuffer(blob[start:end], dtype=_DTYPE).reshape(shape).copy()
    return arrays, manifest.get("extra", {})
