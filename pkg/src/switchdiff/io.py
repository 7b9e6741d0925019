"""Config parsing, CSV/JSON emission and the run manifest."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import platform
from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np

from .averaging import Path
from .model import Model, ModelConfigError, build_model, model_to_config

FLOAT_FMT = "%.17g"


class ConfigError(ValueError):
    """Unreadable or inconsistent configuration (CLI exit code 2)."""


# ----------------------------------------------------------------- config


@dataclass
class RunConfig:
    model: Model
    model_config: dict[str, Any]
    run: dict[str, Any]
    sha256: str
    source: str | None = None


def parse_config(text: str | bytes, source: str | None = None) -> RunConfig:
    """Parse a config document; errors carry line and column for bad JSON."""
    raw = text.encode() if isinstance(text, str) else bytes(text)
    try:
        doc = json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{source or 'config'}: not UTF-8 ({exc.reason})") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source or 'config'}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{source or 'config'}: top level must be a JSON object")
    run = doc.pop("run", {}) or {}
    if not isinstance(run, dict):
        raise ConfigError("'run' section must be an object")
    try:
        model = build_model(doc)
    except ModelConfigError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(model=model, model_config=doc, run=run, sha256=hashlib.sha256(raw).hexdigest(), source=source)


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config '{path}': {exc.strerror}") from None
    return parse_config(raw, source=path)


def dump_config(model: Model, run: dict[str, Any] | None = None) -> str:
    """Canonical JSON for a model (1-based T_set); parses back to an identical model."""
    doc = model_to_config(model)
    if run:
        doc["run"] = run
    return json.dumps(doc, indent=2, sort_keys=True)


# -------------------------------------------------------------------- csv


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT % float(v)
    return str(v)


def write_csv(path: str, header: Iterable[str], rows: Iterable[Iterable[Any]]) -> None:
    """Header row first; floats with 17 significant digits so the text round-trips exactly."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header))
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path: str) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"'{path}' is empty")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise ConfigError(f"'{path}': {exc}") from None
    return rows[0], data.reshape(-1, len(rows[0]))


def read_path_csv(path: str, d: int) -> Path:
    """Path from a CSV with columns t, x_1..x_d."""
    try:
        header, data = read_csv(path)
    except OSError as exc:
        raise ConfigError(f"cannot read path '{path}': {exc.strerror}") from None
    if len(header) != d + 1:
        raise ConfigError(f"'{path}': expected columns t, x_1..x_{d}, got {header}")
    try:
        return Path(data[:, 0], data[:, 1:])
    except ValueError as exc:
        raise ConfigError(f"'{path}': {exc}") from None


def path_rows(path: Path):
    for t, x in zip(path.grid, path.values):
        yield [t, *x]


def path_header(d: int) -> list[str]:
    return ["t", *[f"x_{k + 1}" for k in range(d)]]


# ------------------------------------------------------------------- json


def jsonable(obj):
    """Plain JSON types; non-finite floats become the strings 'nan', 'inf', '-inf'."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isfinite(v):
            return v
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    if hasattr(obj, "to_json"):
        return jsonable(obj.to_json())
    return obj


def write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------- manifest


@dataclass
class RunManifest:
    subcommand: str
    config_sha256: str
    seed: int | None
    params: dict[str, Any]
    files: list[str] = field(default_factory=list)
    wall_clock: float = 0.0
    threads: int = 1

    def to_json(self) -> dict[str, Any]:
        return {
            "subcommand": self.subcommand,
            "config_sha256": self.config_sha256,
            "seed": self.seed,
            "params": self.params,
            "files": sorted(self.files),
            "wall_clock_seconds": self.wall_clock,
            "threads": self.threads,
            "python": platform.python_version(),
            "numpy": np.__version__,
        }


class OutputDir:
    """Output files relative to ``root``; remembers what it wrote for the manifest."""

    def __init__(self, root: str):
        self.root = root
        self.files: list[str] = []
        os.makedirs(root, exist_ok=True)

    def _path(self, name: str) -> str:
        if name not in self.files:
            self.files.append(name)
        return os.path.join(self.root, name)

    def csv(self, name: str, header, rows) -> str:
        p = self._path(name)
        write_csv(p, header, rows)
        return p

    def json(self, name: str, obj) -> str:
        p = self._path(name)
        write_json(p, obj)
        return p

    def manifest(self, manifest: RunManifest) -> str:
        manifest.files = list(self.files)
        p = os.path.join(self.root, "run.json")
        write_json(p, manifest.to_json())
        return p
