"""Run configuration: YAML files, flag overrides, frozen snapshots.

Precedence, lowest to highest: dataclass defaults, the YAML config file,
explicit command-line flags.  Every key that shaped a run is echoed into the
run directory as ``config.yaml`` so the run is reconstructible.
"""

from __future__ import annotations

import dataclasses
import logging
import os
from pathlib import Path
from typing import Optional

import yaml

logger = logging.getLogger(__name__)

RUN_ROOT_ENV = "EDGE_LBAM_RUN_ROOT"
DEFAULT_RUN_ROOT = "runs"
SNAPSHOT_NAME = "config.yaml"


def run_root() -> Path:
    """Directory that holds run directories; overridable by environment."""
    return Path(os.environ.get(RUN_ROOT_ENV, DEFAULT_RUN_ROOT))


def resolve_run_dir(name: str, root: Optional[Path] = None) -> Path:
    """Create (if needed) and return the run directory for ``name``."""
    base = Path(root) if root is not None else run_root()
    run_dir = base / name
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def load_config_file(path) -> dict:
    """Load a YAML mapping; an empty file yields an empty dict."""
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"config file {path} must contain a mapping")
    return data


def merge_config(defaults, file_values: dict, flag_values: dict):
    """Layer config sources over a dataclass instance of defaults.

    Unknown keys in the file are rejected so typos fail loudly.  Flag values
    of None mean "not given on the command line" and are skipped.
    """
    known = {f.name for f in dataclasses.fields(defaults)}
    unknown = set(file_values) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    merged = dataclasses.asdict(defaults)
    merged.update(file_values)
    for key, value in flag_values.items():
        if value is None:
            continue
        if key not in known:
            raise ValueError(f"unknown config key from flags: {key}")
        merged[key] = value
    return type(defaults)(**merged)


def snapshot_config(run_dir, config) -> Path:
    """Freeze the effective config into the run directory."""
    if dataclasses.is_dataclass(config):
        payload = dataclasses.asdict(config)
    else:
        payload = dict(config)
    path = Path(run_dir) / SNAPSHOT_NAME
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(payload, fh, sort_keys=True)
    logger.info("config snapshot written to %s", path)
    return path
