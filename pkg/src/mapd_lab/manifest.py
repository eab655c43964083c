"""Run manifests: config hash, content hashes of emitted files, orphan detection."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__

MANIFEST_SUFFIX = ".manifest.json"


def file_hash(path) -> str:
    """Git-style blob hash (sha1 over ``blob <size>\\0`` + content)."""
    data = Path(path).read_bytes()
    h = hashlib.sha1(f"blob {len(data)}\0".encode())
    h.update(data)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    config: dict
    files: dict = field(default_factory=dict)   # relative path -> content hash
    started: str = ""
    finished: str = ""
    version: str = __version__

    def add(self, root: Path, path: Path):
        self.files[str(Path(path).relative_to(root))] = file_hash(path)

    def write(self, root: Path) -> Path:
        self.finished = _now()
        path = Path(root) / f"{self.command}{MANIFEST_SUFFIX}"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def start(command: str, config: dict, config_hash: str) -> RunManifest:
    return RunManifest(command, config_hash, config, started=_now())


def load_manifests(root) -> list[dict]:
    return [json.loads(p.read_text()) for p in sorted(Path(root).glob(f"*{MANIFEST_SUFFIX}"))]


def orphans(root) -> list[str]:
    """Files under ``root`` referenced by no manifest, or by more than one."""
    root = Path(root)
    counts: dict = {}
    for m in load_manifests(root):
        for rel in m["files"]:
            counts[rel] = counts.get(rel, 0) + 1
    bad = []
    for p in sorted(root.rglob("*")):
        if p.is_file() and not p.name.endswith(MANIFEST_SUFFIX):
            rel = str(p.relative_to(root))
            if counts.get(rel, 0) != 1:
                bad.append(rel)
    return bad


def verify(root) -> list[str]:
    """Files whose current content no longer matches the recorded hash."""
    root = Path(root)
    stale = []
    for m in load_manifests(root):
        for rel, h in m["files"].items():
            p = root / rel
            if not p.exists() or file_hash(p) != h:
                stale.append(rel)
    return stale
