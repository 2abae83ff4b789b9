"""JSON run configuration with strict keys and documented defaults."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from .curriculum import CurriculumConfig
from .dataio import SyntheticSpec
from .distill import DistillationConfig
from .evaluation import EvalConfig
from .model import ModelConfig
from .training import OptimConfig


class ConfigError(ValueError):
    pass


PATH_KEYS = {"target", "sources", "teachers", "output_dir", "data_dir"}
DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class TeacherEntry:
    path: Path
    model: ModelConfig


@dataclass(frozen=True)
class Paths:
    target: Path | None = None
    sources: tuple[Path, ...] = ()
    teachers: tuple[TeacherEntry, ...] = ()
    output_dir: Path = Path("runs")
    data_dir: Path | None = None


@dataclass(frozen=True)
class TeacherTraining:
    model: ModelConfig
    sources: tuple[int, ...] | None = None
    source_epochs: int = 5


@dataclass(frozen=True)
class RunConfig:
    seed: int
    paths: Paths
    model: ModelConfig = ModelConfig()
    dtype: str = "float32"
    distill: DistillationConfig = DistillationConfig()
    curriculum: CurriculumConfig = CurriculumConfig()
    eval: EvalConfig = EvalConfig()
    optim: OptimConfig = OptimConfig()
    teacher: TeacherTraining = TeacherTraining(ModelConfig())
    synthetic: SyntheticSpec = SyntheticSpec()
    teacher_subset: tuple[int, ...] | None = None
    sweep: dict[str, tuple] = field(default_factory=dict)

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]


SWEEP_KEYS = {
    "temperature": ("distill", "temperature"),
    "kd_weight": ("distill", "kd_weight"),
    "embedding_dim": ("model", "embedding_dim"),
    "alpha": ("curriculum", "alpha"),
}

_SECTIONS = {
    "model": ModelConfig,
    "distill": DistillationConfig,
    "curriculum": CurriculumConfig,
    "eval": EvalConfig,
    "optim": OptimConfig,
    "synthetic": SyntheticSpec,
}
_TOP_KEYS = {"seed", "paths", "dtype", "teacher", "ablation", "sweep"} | set(_SECTIONS)
_TEACHER_KEYS = {"model", "sources", "source_epochs"}
_ABLATION_KEYS = {"teachers"}


def _known(cls) -> dict[str, Any]:
    return {f.name: f for f in fields(cls)}


def _build(cls, raw: Any, where: str, base=None):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    known = _known(cls)
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown key {where}.{key}")
    obj = base if base is not None else cls()
    values = {}
    for key, value in raw.items():
        default = getattr(obj, key)
        values[key] = _coerce(value, default, f"{where}.{key}")
    obj = replace(obj, **values)
    try:
        obj.validate()
    except ValueError as exc:
        raise ConfigError(f"invalid value in {where}: {exc}") from None
    return obj


def _coerce(value, default, key: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        if default:
            return tuple(_coerce(v, default[0], key) for v in value)
        return tuple(value)
    return value


def _resolve(base: Path, p) -> Path:
    if not isinstance(p, str):
        raise ConfigError(f"path entries must be strings, got {p!r}")
    path = Path(p)
    return path if path.is_absolute() else base / path


def parse_config(doc: dict, base_dir: str | os.PathLike = ".") -> RunConfig:
    """Build a :class:`RunConfig` from a decoded JSON document."""
    base = Path(base_dir)
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    for key in doc:
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown key {key}")
    for key in ("seed", "paths"):
        if key not in doc:
            raise ConfigError(f"missing required key {key}")
    seed = doc["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed: expected a non-negative integer, got {seed!r}")

    sections = {name: _build(cls, doc.get(name), name) for name, cls in _SECTIONS.items()}
    dtype = doc.get("dtype", "float32")
    if dtype not in DTYPES:
        raise ConfigError(f"dtype: expected one of {sorted(DTYPES)}, got {dtype!r}")

    teacher_raw = doc.get("teacher") or {}
    if not isinstance(teacher_raw, dict):
        raise ConfigError("teacher: expected an object")
    for key in teacher_raw:
        if key not in _TEACHER_KEYS:
            raise ConfigError(f"unknown key teacher.{key}")
    teacher_model = _build(ModelConfig, teacher_raw.get("model"), "teacher.model", sections["model"])
    t_sources = teacher_raw.get("sources")
    if t_sources is not None and (not isinstance(t_sources, list)
                                  or not all(isinstance(i, int) for i in t_sources)):
        raise ConfigError("teacher.sources: expected a list of source indices")
    source_epochs = teacher_raw.get("source_epochs", 5)
    if isinstance(source_epochs, bool) or not isinstance(source_epochs, int) or source_epochs < 0:
        raise ConfigError("teacher.source_epochs: expected a non-negative integer")
    teacher = TeacherTraining(teacher_model, None if t_sources is None else tuple(t_sources), source_epochs)

    paths_raw = doc["paths"]
    if not isinstance(paths_raw, dict):
        raise ConfigError("paths: expected an object")
    for key in paths_raw:
        if key not in PATH_KEYS:
            raise ConfigError(f"unknown key paths.{key}")
    entries = []
    for i, item in enumerate(paths_raw.get("teachers", [])):
        if isinstance(item, str):
            entries.append(TeacherEntry(_resolve(base, item), teacher_model))
        elif isinstance(item, dict):
            for key in item:
                if key not in ("path", "model"):
                    raise ConfigError(f"unknown key paths.teachers[{i}].{key}")
            if "path" not in item:
                raise ConfigError(f"missing required key paths.teachers[{i}].path")
            m = _build(ModelConfig, item.get("model"), f"paths.teachers[{i}].model", teacher_model)
            entries.append(TeacherEntry(_resolve(base, item["path"]), m))
        else:
            raise ConfigError(f"paths.teachers[{i}]: expected a path or an object")
    output_dir = _resolve(base, paths_raw.get("output_dir", "runs"))
    paths = Paths(
        target=_resolve(base, paths_raw["target"]) if "target" in paths_raw else None,
        sources=tuple(_resolve(base, p) for p in paths_raw.get("sources", [])),
        teachers=tuple(entries),
        output_dir=output_dir,
        data_dir=_resolve(base, paths_raw["data_dir"]) if "data_dir" in paths_raw else None,
    )
    if teacher.sources is not None and any(not 0 <= i < len(paths.sources) for i in teacher.sources):
        raise ConfigError("teacher.sources: index out of range of paths.sources")

    ablation = doc.get("ablation") or {}
    if not isinstance(ablation, dict):
        raise ConfigError("ablation: expected an object")
    for key in ablation:
        if key not in _ABLATION_KEYS:
            raise ConfigError(f"unknown key ablation.{key}")
    subset = ablation.get("teachers")
    if subset is not None:
        if not isinstance(subset, list) or not all(isinstance(i, int) for i in subset):
            raise ConfigError("ablation.teachers: expected a list of teacher indices")
        if any(not 0 <= i < len(paths.teachers) for i in subset):
            raise ConfigError("ablation.teachers: index out of range of paths.teachers")
        subset = tuple(subset)

    sweep_raw = doc.get("sweep") or {}
    if not isinstance(sweep_raw, dict):
        raise ConfigError("sweep: expected an object")
    sweep = {}
    for key, values in sweep_raw.items():
        if key not in SWEEP_KEYS:
            raise ConfigError(f"unknown key sweep.{key}")
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep.{key}: expected a non-empty list")
        sweep[key] = tuple(values)

    return RunConfig(seed=seed, paths=paths, dtype=dtype, teacher=teacher,
                     teacher_subset=subset, sweep=sweep, **sections)


def load_config(path: str | os.PathLike, overrides: list[str] | None = None) -> RunConfig:
    """Read, apply ``key=value`` overrides, and validate a JSON config file.

    Relative paths inside the file resolve against the file's directory.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    for item in overrides or []:
        apply_override(doc, item)
    return parse_config(doc, path.parent)


def apply_override(doc: dict, item: str) -> None:
    """Set a dotted key in the raw document; the value is parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    node = doc
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key}: {part} is not an object")
    node[parts[-1]] = value


def require_inputs(cfg: RunConfig, command: str) -> None:
    """Check that every input file the command reads exists."""
    needed: list[Path] = []
    if command in ("pretrain-teacher", "export-teacher", "train", "evaluate", "sweep"):
        if cfg.paths.target is None:
            raise ConfigError("missing required key paths.target")
        needed.append(cfg.paths.target)
    if command == "pretrain-teacher":
        idx = cfg.teacher.sources if cfg.teacher.sources is not None else range(len(cfg.paths.sources))
        needed.extend(cfg.paths.sources[i] for i in idx)
    if command in ("train", "sweep"):
        subset = cfg.teacher_subset if cfg.teacher_subset is not None else range(len(cfg.paths.teachers))
        needed.extend(cfg.paths.teachers[i].path for i in subset)
    for p in needed:
        if not p.exists():
            raise ConfigError(f"input path does not exist: {p}")
