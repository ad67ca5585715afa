"""Checkpoint container: JSON manifest plus one raw float32 blob.

A checkpoint is a directory holding ``manifest.json`` and ``weights.bin``.
The manifest lists tensors in blob order with byte offsets; the blob is
little-endian float32, row-major. Round-trips are bit-exact: loading and
re-saving produces identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.bin"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors, extra=None):
    """Write named arrays to `path` (a directory, created if needed).

    ``tensors`` is an ordered mapping name -> ndarray; values are stored as
    little-endian float32. ``extra`` entries are embedded in the manifest.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        entries.append(
            {
                "name": name,
                "shape": list(data.shape),
                "dtype": "<f4",
                "byte_offset": offset,
            }
        )
        blobs.append(data.tobytes())
        offset += len(blobs[-1])
    manifest = {"format_version": FORMAT_VERSION, "tensors": entries}
    if extra:
        for key, value in extra.items():
            if key in manifest:
                raise CheckpointError(f"reserved manifest key: {key}")
            manifest[key] = value
    (path / WEIGHTS_NAME).write_bytes(b"".join(blobs))
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path):
    """Read a checkpoint directory; returns (tensors, manifest).

    Tensors come back as float32 arrays in manifest order.
    """
    path = Path(path)
    mpath = path / MANIFEST_NAME
    bpath = path / WEIGHTS_NAME
    if not mpath.is_file() or not bpath.is_file():
        raise CheckpointError(f"not a checkpoint directory: {path}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format: {manifest.get('format_version')}"
        )
    blob = bpath.read_bytes()
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["byte_offset"]
        end = start + 4 * count
        if end > len(blob):
            raise CheckpointError(f"blob truncated for tensor {entry['name']!r}")
        arr = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape)
        tensors[entry["name"]] = arr.copy()
    return tensors, manifest
