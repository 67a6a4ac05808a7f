"""Run manifests: enough to rerun a command and get identical outputs."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__

MANIFEST_SCHEMA = "harvestnet.manifest/1"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def input_hashes(paths) -> dict:
    """Hash every input file; container manifests also pull in their blob."""
    out = {}
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        out[str(p)] = sha256_file(p)
        blob = p.with_suffix(".bin")
        if p.suffix == ".json" and blob.exists():
            out[str(blob)] = sha256_file(blob)
    return out


@dataclass
class RunManifest:
    command: str
    argv: list
    seed: int | None
    output_dir: str
    inputs: dict = field(default_factory=dict)
    config_paths: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    tool_version: str = __version__

    def to_dict(self) -> dict:
        return {"schema": MANIFEST_SCHEMA, **asdict(self)}

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_manifest(path) -> RunManifest:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    d.pop("schema", None)
    return RunManifest(**d)
