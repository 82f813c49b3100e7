"""Checkpoint directories: a JSON manifest plus one little-endian float32 blob."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"
_DTYPE = np.dtype("<f4")


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config_hash: str
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, tensors: dict[str, np.ndarray], config_hash: str, extra: dict | None = None) -> Path:
    """Write ``tensors`` (in key order) to ``path/``; values are stored as float32."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype=_DTYPE)
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "dtype": "float32", "byte_offset": offset, "byte_len": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "entries": entries, "config_hash": config_hash, "extra": extra or {}}
    tmp = path / (BLOB + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path / BLOB)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def validate_manifest(manifest: dict, blob_size: int) -> None:
    """Reject manifests whose entries overlap, run past the blob, or disagree with their shapes."""
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format_version {manifest.get('format_version')!r}")
    entries = manifest.get("entries")
    if not isinstance(entries, list):
        raise CheckpointError("manifest has no entry list")
    spans = []
    names = set()
    for e in entries:
        try:
            name, shape, off, n = e["name"], e["shape"], int(e["byte_offset"]), int(e["byte_len"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"malformed manifest entry {e!r}") from exc
        if name in names:
            raise CheckpointError(f"duplicate entry '{name}'")
        names.add(name)
        if e.get("dtype") != "float32":
            raise CheckpointError(f"entry '{name}' has unsupported dtype {e.get('dtype')!r}")
        if any(int(s) < 0 for s in shape):
            raise CheckpointError(f"entry '{name}' has a negative dimension")
        if n != int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize:
            raise CheckpointError(f"entry '{name}': byte_len {n} does not match shape {shape}")
        if off < 0 or off + n > blob_size:
            raise CheckpointError(f"entry '{name}' [{off}, {off + n}) lies outside the {blob_size}-byte blob")
        spans.append((off, off + n, name))
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CheckpointError(f"entries '{an}' and '{bn}' overlap")


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        return json.loads((path / MANIFEST).read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"{path} is not a checkpoint (no {MANIFEST})") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest in {path}: {exc}") from exc


def load_checkpoint(path, expected_hash: str | None = None) -> Checkpoint:
    path = Path(path)
    manifest = read_manifest(path)
    blob_path = path / BLOB
    if not blob_path.is_file():
        raise CheckpointError(f"{path} has no {BLOB}")
    validate_manifest(manifest, blob_path.stat().st_size)
    if expected_hash is not None and manifest["config_hash"] != expected_hash:
        raise CheckpointError(f"config hash {manifest['config_hash']} does not match expected {expected_hash}")
    blob = blob_path.read_bytes()
    tensors = {}
    for e in manifest["entries"]:
        off, n = e["byte_offset"], e["byte_len"]
        tensors[e["name"]] = np.frombuffer(blob, dtype=_DTYPE, count=n // 4, offset=off).reshape(e["shape"]).astype(np.float32)
    return Checkpoint(tensors, manifest["config_hash"], manifest.get("extra", {}))
