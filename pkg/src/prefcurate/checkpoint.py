"""Deterministic single-file model checkpoints.

Layout: a magic line, one json header line (sorted keys), then the raw
little-endian float64 bytes of every array in the order the header lists
them. No archive container, no timestamps, nothing platform-dependent, so
saving the same model twice yields byte-identical files and the sha256 of
the file doubles as the checkpoint id.

The header records the architecture descriptor, the names/shapes of the
frozen base arrays (sorted by name), and the trainable parameter vector,
stored last under the reserved name ``trainable``.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import InputError, ManifestError
from .models import build_model

__all__ = ["save_checkpoint", "load_checkpoint", "sha256_file"]

_MAGIC = b"prefcurate-checkpoint-v1\n"
_TRAINABLE = "trainable"


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def save_checkpoint(model, path) -> str:
    """Write the model to ``path``; returns the checkpoint id (file sha256)."""
    base = model.base_arrays()
    arrays = [(name, np.asarray(base[name], dtype=np.float64)) for name in sorted(base)]
    arrays.append((_TRAINABLE, model.params))
    header = {
        "architecture": model.architecture(),
        "arrays": [
            {"name": name, "shape": list(array.shape)} for name, array in arrays
        ],
    }
    path = Path(path)
    with path.open("wb") as handle:
        handle.write(_MAGIC)
        handle.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        handle.write(b"\n")
        for _, array in arrays:
            handle.write(np.ascontiguousarray(array, dtype="<f8").tobytes())
    return sha256_file(path)


def load_checkpoint(path):
    """Rebuild the model stored at ``path``. Returns (model, checkpoint_id)."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"checkpoint not found: {path}")
    with path.open("rb") as handle:
        magic = handle.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ManifestError(f"{path} is not a checkpoint file")
        header_line = handle.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ManifestError(f"{path}: unreadable checkpoint header") from exc
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = handle.read(count * 8)
            if len(raw) != count * 8:
                raise ManifestError(f"{path}: truncated checkpoint body")
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if handle.read(1):
            raise ManifestError(f"{path}: trailing bytes after checkpoint body")
    architecture = header["architecture"]
    kind = architecture.pop("kind")
    params = arrays.pop(_TRAINABLE)
    model = build_model(kind, architecture, arrays, params)
    return model, sha256_file(path)
