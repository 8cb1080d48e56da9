"""module contains general purpose tools"""

import hashlib
import json
import os
from pathlib import Path
import sys
from typing import Any

import numpy as np
from loguru import logger


def get_resource_path(relative_path: str) -> Path:
    """
    Get absolute path to a resource shipped next to the sources.

    Args:
        relative_path: Path relative to the application root (e.g., "static/help.md")

    Returns:
        Path object pointing to the resource
    """
    return Path(__file__).parent / relative_path


def _key(part: str | int) -> int:
    if isinstance(part, int):
        return part
    digest = hashlib.sha256(part.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


def derive_seed(master: int, *path: str | int) -> int:
    """
    Child seed for a named stage/job.

    The master seed is the SeedSequence entropy and `path` its spawn key; string
    parts are mapped to the first 4 bytes of their sha256 so the key is stable
    across runs and platforms.
    """
    seq = np.random.SeedSequence(entropy=master, spawn_key=tuple(_key(p) for p in path))
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def rng_for(master: int, *path: str | int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *path))


def canonical_json(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def config_hash(doc: dict[str, Any]) -> str:
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()


def file_md5(path: Path) -> str:
    digest = hashlib.md5()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def default_jobs(jobs: int | None) -> int:
    if jobs is not None and jobs > 0:
        return jobs
    return os.cpu_count() or 1


def setup_logging(out_dir: Path | None, verbose: bool = False) -> None:
    logger.remove()
    logger.add(sys.stderr, level="DEBUG" if verbose else "INFO")
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        logger.add(out_dir / "run_{time}.log", level="DEBUG")


def write_json(path: Path, doc: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
