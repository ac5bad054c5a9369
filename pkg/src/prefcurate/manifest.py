"""Run manifest: config snapshots, artifact paths, and content digests.

Each pipeline stage reads the artifacts it needs through
:meth:`RunManifest.require`, which re-hashes the file and refuses to
proceed on a mismatch, and registers what it wrote with
:meth:`RunManifest.record_artifact`. Paths are stored relative to the run
directory so a run folder can be moved wholesale.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .errors import ManifestError

__all__ = ["RunManifest", "sha256_file"]

_MANIFEST_NAME = "manifest.json"


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class RunManifest:
    def __init__(self, run_dir, data: dict):
        self.run_dir = Path(run_dir)
        self.data = data

    @classmethod
    def create(cls, run_dir, tool_version: str) -> "RunManifest":
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        manifest = cls(
            run_dir,
            {
                "tool": f"prefcurate {tool_version}",
                "configs": {},
                "inputs": {},
                "artifacts": {},
            },
        )
        manifest.save()
        return manifest

    @classmethod
    def load(cls, run_dir) -> "RunManifest":
        path = Path(run_dir) / _MANIFEST_NAME
        if not path.exists():
            raise ManifestError(
                f"no manifest at {path}; run the prepare stage first"
            )
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ManifestError(f"unreadable manifest {path}") from exc
        for key in ("configs", "inputs", "artifacts"):
            if key not in data:
                raise ManifestError(f"manifest {path} is missing {key!r}")
        return cls(Path(run_dir), data)

    @property
    def path(self) -> Path:
        return self.run_dir / _MANIFEST_NAME

    def save(self) -> None:
        with self.path.open("w", encoding="utf-8") as handle:
            json.dump(self.data, handle, indent=2, sort_keys=True)
            handle.write("\n")

    def set_config(self, stage: str, config: dict) -> None:
        self.data["configs"][stage] = config

    def record_input(self, name: str, path) -> None:
        path = Path(path)
        self.data["inputs"][name] = {
            "path": str(path),
            "sha256": sha256_file(path),
        }

    def record_artifact(self, name: str, path) -> None:
        path = Path(path)
        try:
            stored = str(path.relative_to(self.run_dir))
        except ValueError:
            stored = str(path)
        self.data["artifacts"][name] = {
            "path": stored,
            "sha256": sha256_file(path),
        }

    def require(self, name: str) -> Path:
        """Path of a previously recorded artifact, digest-verified."""
        entry = self.data["artifacts"].get(name)
        if entry is None:
            raise ManifestError(
                f"manifest has no artifact {name!r}; run the producing stage first"
            )
        path = Path(entry["path"])
        if not path.is_absolute():
            path = self.run_dir / path
        if not path.exists():
            raise ManifestError(f"artifact {name!r} missing on disk: {path}")
        actual = sha256_file(path)
        if actual != entry["sha256"]:
            raise ManifestError(
                f"artifact {name!r} changed since it was recorded "
                f"(digest {actual[:12]} != {entry['sha256'][:12]}); rerun its stage"
            )
        return path
