"""Checkpoint container: a manifest plus one float32 binary blob.

A checkpoint is a directory holding `manifest.json` (UTF-8, lists every
tensor's name, shape, trainable flag, and byte offset) and `params.bin`
(all tensors concatenated row-major as little-endian float32).
Save -> load round-trips bit-exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"
FORMAT_TAG = "nliexpl-checkpoint-v1"
_DTYPE = np.dtype("<f4")


class CheckpointError(RuntimeError):
    """Checkpoint directory is missing pieces or inconsistent."""


def save_checkpoint(path, arrays: dict[str, np.ndarray],
                    trainable: set[str] | None = None,
                    meta: dict | None = None) -> Path:
    """Write `arrays` (insertion order preserved) under directory `path`."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype=_DTYPE)
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": offset,
            "trainable": trainable is None or name in trainable,
        })
        chunks.append(data.tobytes())
        offset += data.nbytes
    manifest = {"format": FORMAT_TAG, "dtype": "<f4", "blob_bytes": offset,
                "tensors": entries, "meta": meta or {}}
    (path / BLOB_NAME).write_bytes(b"".join(chunks))
    (path / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=1, sort_keys=False), encoding="utf-8")
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint directory; returns (arrays, manifest dict)."""
    path = Path(path)
    mpath = path / MANIFEST_NAME
    bpath = path / BLOB_NAME
    if not mpath.exists() or not bpath.exists():
        raise CheckpointError(f"not a checkpoint directory: {path}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT_TAG:
        raise CheckpointError(f"unknown checkpoint format in {mpath}")
    blob = bpath.read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(
            f"blob size {len(blob)} != manifest {manifest['blob_bytes']}")
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype=_DTYPE, count=count,
                            offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(shape).copy()
    return arrays, manifest
