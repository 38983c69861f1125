"""Flat ``key=value`` run configs and the JSON manifest written beside outputs."""

from __future__ import annotations

import json
import os
import platform
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .errors import FormatError, UsageError


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; keys are normalised to
    snake_case so ``pretrain-epochs`` and ``pretrain_epochs`` are the same."""
    out: dict[str, str] = {}
    for no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{no}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        k = k.strip().replace("-", "_")
        if not k:
            raise FormatError(f"{source}:{no}: empty key")
        out[k] = v.strip()
    return out


def load_config(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file {path} does not exist")
    return parse_config_text(path.read_text(), str(path))


def now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict[str, object]
    seed: int | None
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    tool_version: str = __version__
    python: str = field(default_factory=lambda: platform.python_version())
    started: str = field(default_factory=now)
    finished: str = ""

    def write_beside(self, artifact) -> Path:
        """Atomically write ``<artifact>.manifest.json``."""
        artifact = Path(artifact)
        if not self.finished:
            self.finished = now()
        path = artifact.with_name(artifact.name + ".manifest.json")
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str) + "\n")
        os.replace(tmp, path)
        return path


def read_manifest(path) -> RunManifest:
    data = json.loads(Path(path).read_text())
    return RunManifest(**data)


def data_root() -> Path | None:
    root = os.environ.get("ANAV_DATA_DIR")
    return Path(root) if root else None


def resolve_input(path) -> Path:
    """Existing paths are used as given; otherwise relative paths are looked up
    under ``$ANAV_DATA_DIR``."""
    p = Path(path)
    if p.exists() or p.is_absolute():
        return p
    root = data_root()
    if root is not None and (root / p).exists():
        return root / p
    return p


def argv() -> list[str]:
    return list(sys.argv)
