"""Run directories, reports and process-level error conventions.

Every CLI command owns one run directory guarded by a lockfile and leaves
behind the materialised config, a log file and a JSON report carrying the
config digest. Exit codes: 0 success, 2 bad config, 3 missing input
artifact, 4 numeric failure.
"""

from __future__ import annotations

import json
import logging
import os
import time
from contextlib import contextmanager
from pathlib import Path

from .config import ConfigError, RunConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4

log = logging.getLogger("paha")


class MissingArtifactError(FileNotFoundError):
    """A required checkpoint or dataset for this stage does not exist."""


class NumericError(RuntimeError):
    """Non-finite values encountered in a numeric computation."""


@contextmanager
def run_directory(path: str | Path, config: RunConfig):
    """Create (or reuse) a run directory, holding its lock for the duration."""
    run_dir = Path(path)
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    if lock.exists():
        raise ConfigError(f"run directory {run_dir} is locked by another process")
    lock.write_text(str(os.getpid()))
    handler = logging.FileHandler(run_dir / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    try:
        config.save(run_dir / "config.json")
        yield run_dir
    finally:
        log.removeHandler(handler)
        handler.close()
        lock.unlink(missing_ok=True)


def write_report(run_dir: str | Path, name: str, payload: dict, config: RunConfig) -> Path:
    """Write a JSON report stamped with the config digest."""
    out = dict(payload)
    out["config_digest"] = config.digest()
    out["written_at"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    path = Path(run_dir) / name
    path.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return path


def read_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
