"""Run manifests: resolved config, seeds and input hashes, written before any computation."""
import hashlib
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from config import read_json, write_json

MANIFEST_VERSION = 1


def file_digest(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def hash_paths(paths: Iterable) -> dict:
    """SHA-256 of every file; directories contribute every file beneath them."""
    hashes = {}
    for path in paths:
        if path is None:
            continue
        path = Path(path)
        if path.is_dir():
            for child in sorted(p for p in path.rglob("*") if p.is_file()):
                hashes[str(child)] = file_digest(child)
        elif path.exists():
            hashes[str(path)] = file_digest(path)
    return hashes


def manifest_path(out_dir, command: str) -> Path:
    return Path(out_dir) / f"manifest-{command}.json"


def write_manifest(out_dir, command: str, config: dict, seeds, inputs: Iterable = ()) -> Path:
    path = manifest_path(out_dir, command)
    write_json(path, {
        "format_version": MANIFEST_VERSION,
        "command": command,
        "argv": sys.argv[1:],
        "started": datetime.now(timezone.utc).isoformat(),
        "status": "running",
        "config": config,
        "seeds": list(seeds),
        "inputs": hash_paths(inputs),
        "outputs": {},
        "environment": {"python": platform.python_version(), "numpy": np.__version__},
    })
    print(f"📝 [manifest] {path}")
    return path


def finalize_manifest(path, status: str, outputs: Iterable = (), error: Optional[str] = None):
    """Record the outcome and hash the produced artifacts."""
    payload = read_json(path)
    payload["status"] = status
    payload["finished"] = datetime.now(timezone.utc).isoformat()
    payload["outputs"] = {name: digest for name, digest in hash_paths(outputs).items()
                          if not Path(name).name.startswith("manifest-")}
    if error:
        payload["error"] = error
    write_json(path, payload)


def relocate_manifest(path, out_dir, config: dict, stop=None) -> Path:
    """Move a running manifest to `out_dir` with an updated config; emptied directories up to `stop` go too."""
    path = Path(path)
    payload = read_json(path)
    payload["config"] = config
    target = manifest_path(out_dir, payload["command"])
    write_json(target, payload)
    path.unlink()
    directory = path.parent
    stop = Path(stop) if stop is not None else None
    while directory != stop and directory.exists() and not any(directory.iterdir()):
        directory.rmdir()
        directory = directory.parent
    print(f"📝 [manifest] {path} -> {target}")
    return target
