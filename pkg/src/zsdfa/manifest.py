"""Per-command reproducibility record with output checksums."""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .errors import DataError

MANIFEST_NAME = "run_manifest.json"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seeds: dict
    dataset_hash: str | None = None
    tool_version: str = __version__
    deterministic: bool = False
    threads: int | None = None
    started_unix: float = field(default_factory=time.time)
    wall_clock_seconds: float = 0.0
    phases: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)

    def phase(self, name: str):
        return _Phase(self, name)

    def add_outputs(self, root, paths) -> None:
        root = Path(root)
        for p in paths:
            p = Path(p)
            self.outputs.append({"path": p.relative_to(root).as_posix(), "sha256": sha256_file(p),
                                 "bytes": p.stat().st_size})

    def write(self, root) -> Path:
        self.wall_clock_seconds = time.time() - self.started_unix
        self.outputs.sort(key=lambda o: o["path"])
        path = Path(root) / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True))
        return path


class _Phase:
    def __init__(self, manifest: RunManifest, name: str):
        self.m, self.name = manifest, name

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.m.phases[self.name] = self.m.phases.get(self.name, 0.0) + time.perf_counter() - self.t0
        return False


def read_manifest(root) -> dict:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"no {MANIFEST_NAME} under {root}")
    return json.loads(path.read_text())


def verify_outputs(root) -> list[str]:
    """Paths whose current checksum differs from the recorded one (or that are missing)."""
    root = Path(root)
    bad = []
    for o in read_manifest(root)["outputs"]:
        p = root / o["path"]
        if not p.exists() or sha256_file(p) != o["sha256"]:
            bad.append(o["path"])
    return bad
