"""Checkpoint container: a JSON manifest plus a sibling float64 blob.

The manifest records named array shapes in blob order; the blob is the
concatenation of those arrays as little-endian float64. Writing is
deterministic byte-for-byte given the same contents.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

BACKBONE_MAGIC = "MAGP-CKPT-1"
PROMPT_MAGIC = "MAGP-PROMPT-1"


def write_checkpoint(path, magic: str, meta: dict, arrays: dict) -> None:
    """`arrays` maps name -> float array; insertion order fixes blob layout."""
    path = Path(path)
    entries = []
    chunks = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape)})
        chunks.append(arr.astype("<f8").tobytes())
    manifest = {"magic": magic, "meta": meta, "arrays": entries,
                "blob": path.stem + ".bin"}
    blob_path = path.with_name(manifest["blob"])
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    blob_path.write_bytes(b"".join(chunks))


def read_checkpoint(path, magic: str):
    """Return (meta, arrays). Raises ValueError on magic mismatch or short blob."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    manifest = json.loads(path.read_text())
    found = manifest.get("magic")
    if found != magic:
        raise ValueError(f"{path.name}: expected magic {magic!r}, found {found!r}")
    blob_path = path.with_name(manifest["blob"])
    if not blob_path.exists():
        raise FileNotFoundError(f"missing checkpoint blob {blob_path}")
    raw = blob_path.read_bytes()
    arrays = {}
    offset = 0
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(raw):
            raise ValueError(
                f"{blob_path.name}: truncated, need {offset + nbytes} bytes "
                f"for {entry['name']!r} but file has {len(raw)}")
        arrays[entry["name"]] = np.frombuffer(
            raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"{blob_path.name}: {len(raw) - offset} trailing bytes")
    return manifest["meta"], arrays
