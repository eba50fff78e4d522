"""Flat binary weight container with a JSON manifest.

Layout: ``<stem>.bin`` holds little-endian float64 arrays back to back in
manifest order; ``<stem>.json`` lists ``{name, shape, offset}`` per array.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT_VERSION = 1


def save_weights(path: str | Path, arrays: Mapping[str, np.ndarray]) -> tuple[Path, Path]:
    path = Path(path)
    bin_path, man_path = path.with_suffix(".bin"), path.with_suffix(".json")
    entries, offset = [], 0
    with open(bin_path, "wb") as fh:
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    manifest = {"version": FORMAT_VERSION, "dtype": "float64-le", "arrays": entries}
    man_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return bin_path, man_path


def load_weights(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported weight container version {manifest.get('version')}")
    raw = path.with_suffix(".bin").read_bytes()
    out = {}
    for e in manifest["arrays"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        out[e["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"]).copy()
    return out
