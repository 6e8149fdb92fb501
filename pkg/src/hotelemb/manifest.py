"""Run manifests: what went in, what came out, with content digests."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__

MANIFEST_NAME = "manifest.json"


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config_hash: str = ""
    inputs: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    engine_version: str = __version__
    started: str = field(default_factory=_now)
    finished: str = ""
    extra: dict = field(default_factory=dict)

    def add_input(self, name, path):
        self.inputs[name] = {"path": str(path), "digest": file_digest(path)}

    def add_artifact(self, name, path):
        self.artifacts[name] = {"path": str(path), "digest": file_digest(path)}

    def write(self, out_dir) -> Path:
        """Append this run to ``out_dir/manifest.json`` (a list of runs)."""
        self.finished = _now()
        path = Path(out_dir) / MANIFEST_NAME
        runs = json.loads(path.read_text()) if path.exists() else []
        runs.append(asdict(self))
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(runs, indent=2, sort_keys=True) + "\n")
        tmp.replace(path)
        return path


def read_manifest(out_dir) -> list:
    path = Path(out_dir) / MANIFEST_NAME
    return json.loads(path.read_text()) if path.exists() else []
