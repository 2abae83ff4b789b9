"""End-to-end steps driven by a :class:`~ckdrec.config.RunConfig`."""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import SWEEP_KEYS, ConfigError, RunConfig, TeacherEntry
from .dataio import (InteractionDataset, SplitDataset, generate_synthetic, leave_one_out_split,
                     load_interactions, remap_items)
from .distill import TrainResult, distill_train
from .evaluation import MetricReport, evaluate
from .model import CKPT_MAGIC, init_model, load_checkpoint, save_checkpoint
from .plots import plot_sweep, plot_training
from .teacher import (SCORES_MAGIC, ModelTeacher, TeacherPanel, export_score_matrix,
                      open_score_matrix, pretrain_teacher)

log = logging.getLogger(__name__)


@dataclass
class TargetData:
    dataset: InteractionDataset
    split: SplitDataset


def load_target(cfg: RunConfig) -> TargetData:
    ds = load_interactions(cfg.paths.target)
    return TargetData(ds, leave_one_out_split(ds))


def gen_data(cfg: RunConfig, seed: int | None = None) -> list[Path]:
    spec = cfg.synthetic if seed is None else replace(cfg.synthetic, seed=seed)
    out = cfg.paths.data_dir or cfg.paths.output_dir / "data"
    return generate_synthetic(spec, out)


def load_teacher(entry: TeacherEntry, num_items: int, dtype=np.float32):
    """Open a teacher file, dispatching on its magic bytes."""
    with open(entry.path, "rb") as fh:
        magic = fh.read(4)
    if magic == SCORES_MAGIC:
        teacher = open_score_matrix(entry.path)
    elif magic == CKPT_MAGIC:
        teacher = ModelTeacher(load_checkpoint(entry.path, entry.model, num_items, dtype=dtype),
                               name=entry.path.stem)
    else:
        raise ConfigError(f"{entry.path}: neither a model checkpoint nor a score matrix")
    if teacher.num_items != num_items:
        raise ConfigError(f"{entry.path}: teacher has {teacher.num_items} items, dataset has {num_items}")
    return teacher


def build_panel(cfg: RunConfig, num_items: int) -> TeacherPanel | None:
    subset = cfg.teacher_subset if cfg.teacher_subset is not None else range(len(cfg.paths.teachers))
    subset = list(subset)
    if not subset:
        return None
    teachers = [load_teacher(cfg.paths.teachers[i], num_items, cfg.np_dtype) for i in subset]
    weights = cfg.distill.teacher_weights
    if weights:
        if len(weights) != len(cfg.paths.teachers):
            raise ConfigError("distill.teacher_weights: need one weight per entry of paths.teachers")
        w = np.array([weights[i] for i in subset], dtype=np.float64)
        if w.sum() <= 0:
            raise ConfigError("distill.teacher_weights: selected teachers have zero total weight")
        return TeacherPanel(teachers, w / w.sum())
    return TeacherPanel.uniform(teachers)


def pretrain_from_config(cfg: RunConfig, target: TargetData):
    idx = cfg.teacher.sources if cfg.teacher.sources is not None else range(len(cfg.paths.sources))
    sources = []
    for i in idx:
        sources.extend(remap_items(load_interactions(cfg.paths.sources[i]), target.dataset))
    model, _ = pretrain_teacher(target.split, cfg.teacher.model, cfg.optim, cfg.seed,
                                source_sequences=sources, dtype=cfg.np_dtype,
                                source_epochs=cfg.teacher.source_epochs)
    return model


def export_teacher(cfg: RunConfig, target: TargetData, teacher_path: Path, out: Path):
    model = load_checkpoint(teacher_path, cfg.teacher.model, target.split.num_items, dtype=cfg.np_dtype)
    return export_score_matrix(ModelTeacher(model), target.split, out)


def train_student(cfg: RunConfig, target: TargetData, panel: TeacherPanel | None) -> TrainResult:
    student = init_model(cfg.model, target.split.num_items, cfg.seed, dtype=cfg.np_dtype)
    return distill_train(student, panel, target.split, cfg.distill, cfg.curriculum, cfg.optim, cfg.seed)


def split_report(cfg: RunConfig, target: TargetData, model) -> MetricReport:
    rows = target.split.test if cfg.eval.split == "test" else target.split.valid
    return evaluate(model, rows, cfg.eval)


def write_report(report: MetricReport, stem: Path) -> None:
    """Write ``<stem>.json`` and ``<stem>.txt``."""
    Path(f"{stem}.json").write_text(report.to_json() + "\n", encoding="utf-8")
    Path(f"{stem}.txt").write_text(report.to_table() + "\n", encoding="utf-8")


def run_train(cfg: RunConfig, out_dir: Path) -> MetricReport:
    """Train a student; write checkpoint, metrics log, report and figure to ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    target = load_target(cfg)
    panel = build_panel(cfg, target.split.num_items)
    result = train_student(cfg, target, panel)
    save_checkpoint(result.model, out_dir / "student.ckpt")
    result.write_metrics_log(out_dir / "metrics.tsv")
    report = split_report(cfg, target, result.model)
    write_report(report, out_dir / "report")
    plot_training(result.history, out_dir / "training.png")
    return report


def sweep_cells(cfg: RunConfig) -> list[dict[str, float]]:
    keys = list(cfg.sweep)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(cfg.sweep[k] for k in keys))]


def apply_cell(cfg: RunConfig, cell: dict[str, float]) -> RunConfig:
    for key, value in cell.items():
        section, attr = SWEEP_KEYS[key]
        sub = getattr(cfg, section)
        cast = type(getattr(sub, attr))
        sub = replace(sub, **{attr: cast(value)})
        try:
            sub.validate()
        except ValueError as exc:
            raise ConfigError(f"sweep.{key}={value}: {exc}") from None
        cfg = replace(cfg, **{section: sub})
    return cfg


def run_sweep(cfg: RunConfig, out_dir: Path) -> list[dict]:
    """Train one student per grid cell; write ``sweep.tsv`` plus one figure per swept key."""
    out_dir.mkdir(parents=True, exist_ok=True)
    target = load_target(cfg)
    panel = build_panel(cfg, target.split.num_items)
    cells = sweep_cells(cfg) if cfg.sweep else [{}]
    rows = []
    for i, cell in enumerate(cells):
        cell_cfg = apply_cell(cfg, cell)
        result = train_student(cell_cfg, target, panel)
        cell_dir = out_dir / f"cell_{i:03d}"
        cell_dir.mkdir(exist_ok=True)
        result.write_metrics_log(cell_dir / "metrics.tsv")
        report = split_report(cell_cfg, target, result.model)
        rows.append({**cell, **report.to_dict()})
        log.info("sweep cell %d/%d %s -> %s", i + 1, len(cells), cell, report.to_dict())

    columns = list(cfg.sweep) + [k for k in rows[0] if k not in cfg.sweep]
    with open(out_dir / "sweep.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            fh.write("\t".join(_fmt(row[c]) for c in columns) + "\n")
    (out_dir / "sweep.json").write_text(json.dumps(rows, indent=1) + "\n", encoding="utf-8")

    for key in cfg.sweep:
        values = sorted(set(cfg.sweep[key]))
        if len(values) < 2:
            continue
        metrics = {}
        for name in ("ndcg@10", "recall@10"):
            if name not in rows[0]:
                continue
            metrics[name] = [float(np.mean([r[name] for r in rows if r[key] == v])) for v in values]
        plot_sweep(values, metrics, key, out_dir / f"sweep_{key}.png")
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)
