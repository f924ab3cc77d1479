"""Run manifests: every artifact directory records how it was produced.

Reruns with identical inputs and seed reproduce metric files byte for
byte; the manifest's timestamp is the only field allowed to differ.
"""

from __future__ import annotations

import hashlib
import json
from datetime import datetime, timezone
from pathlib import Path

from . import __version__

MANIFEST_NAME = "manifest.json"


def hash_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def hash_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_manifest(out_dir: str | Path, command: str, config: dict,
                   seeds: list[int], inputs: dict[str, str],
                   outputs: list[str]) -> Path:
    blob = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": inputs,           # path -> sha256
        "outputs": sorted(outputs),
        "tool_version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    path = Path(out_dir) / MANIFEST_NAME
    path.write_text(json.dumps(blob, sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")
    return path


def read_manifest(out_dir: str | Path) -> dict:
    return json.loads((Path(out_dir) / MANIFEST_NAME).read_text(encoding="utf-8"))
