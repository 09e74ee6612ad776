"""On-disk tensor and checkpoint formats.

A stored tensor is a pair of files: ``<name>.json`` holding
``{"dtype": "f32", "shape": [...], "byte_order": "little"}`` and
``<name>.bin`` holding the raw little-endian float32 values in row-major
order. A checkpoint is a directory of such pairs plus a ``manifest.json``
listing the entry names and any scalar metadata. Loads validate sizes and
fail loudly rather than return partial data.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import MissingArtifactError, ParseError

__all__ = ["save_tensor", "load_tensor", "save_checkpoint", "load_checkpoint"]

_MANIFEST = "manifest.json"


def save_tensor(dir_path: str | Path, name: str, array: np.ndarray) -> None:
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = {"dtype": "f32", "shape": list(arr.shape), "byte_order": "little"}
    (dir_path / f"{name}.json").write_text(json.dumps(header) + "\n")
    (dir_path / f"{name}.bin").write_bytes(arr.tobytes())


def load_tensor(dir_path: str | Path, name: str) -> np.ndarray:
    dir_path = Path(dir_path)
    header_path = dir_path / f"{name}.json"
    bin_path = dir_path / f"{name}.bin"
    if not header_path.exists() or not bin_path.exists():
        raise MissingArtifactError(f"tensor '{name}' not found under {dir_path}")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"unreadable tensor header {header_path}: {exc}") from exc
    for key in ("dtype", "shape", "byte_order"):
        if key not in header:
            raise ParseError(f"tensor header {header_path} missing '{key}'")
    if header["dtype"] != "f32" or header["byte_order"] != "little":
        raise ParseError(f"unsupported tensor encoding in {header_path}: {header}")
    shape = tuple(int(d) for d in header["shape"])
    raw = bin_path.read_bytes()
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    if len(raw) != expected:
        raise ParseError(
            f"tensor data {bin_path} has {len(raw)} bytes, header implies {expected}"
        )
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def save_checkpoint(
    dir_path: str | Path,
    tensors: Mapping[str, np.ndarray],
    meta: Mapping | None = None,
) -> None:
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    for name, arr in tensors.items():
        save_tensor(dir_path, name, arr)
    entries = {name: list(np.asarray(tensors[name]).shape) for name in sorted(tensors)}
    manifest = {"entries": entries, "meta": dict(meta or {})}
    (dir_path / _MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(dir_path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    dir_path = Path(dir_path)
    manifest_path = dir_path / _MANIFEST
    if not manifest_path.exists():
        raise MissingArtifactError(f"no checkpoint manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"unreadable checkpoint manifest {manifest_path}: {exc}") from exc
    if "entries" not in manifest:
        raise ParseError(f"checkpoint manifest {manifest_path} missing 'entries'")
    tensors = {}
    for name, shape in manifest["entries"].items():
        arr = load_tensor(dir_path, name)
        if list(arr.shape) != list(shape):
            raise ParseError(
                f"checkpoint entry '{name}' has shape {list(arr.shape)}, manifest says {shape}"
            )
        tensors[name] = arr
    return tensors, manifest.get("meta", {})
