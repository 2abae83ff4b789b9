"""Desk-scale multi-domain benchmark and the ablation harness.

Three source domains and one target domain are generated from shared latent
factors.  Three heterogeneous teachers are pre-trained on overlapping source
mixtures and tuned on the target; students are then distilled under the
full method, the ablation variants and the no-distillation baseline.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .curriculum import CurriculumConfig
from .dataio import SplitDataset, SyntheticSpec, leave_one_out_split, remap_items, synthesize
from .distill import DistillationConfig, TrainResult, distill_train
from .evaluation import EvalConfig, MetricReport, evaluate
from .model import ModelConfig, SequentialModel, init_model
from .teacher import ModelTeacher, TeacherPanel, pretrain_teacher
from .training import OptimConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TeacherRecipe:
    name: str
    sources: tuple[int, ...]
    model: ModelConfig


@dataclass(frozen=True)
class BenchmarkConfig:
    synthetic: SyntheticSpec = SyntheticSpec()
    student: ModelConfig = ModelConfig(embedding_dim=32, num_heads=2, num_layers=1)
    teachers: tuple[TeacherRecipe, ...] = (
        TeacherRecipe("attn_01", (0, 1), ModelConfig(embedding_dim=32, num_heads=2, num_layers=1)),
        TeacherRecipe("attn_12", (1, 2), ModelConfig(embedding_dim=32, num_heads=2, num_layers=1)),
        TeacherRecipe("pool_02", (0, 2), ModelConfig(embedding_dim=32, architecture="mean_pool")),
    )
    teacher_optim: OptimConfig = OptimConfig(epochs=30, patience=5)
    teacher_source_epochs: int = 5
    student_optim: OptimConfig = OptimConfig(epochs=40, patience=5)
    distill: DistillationConfig = DistillationConfig()
    curriculum: CurriculumConfig = CurriculumConfig()
    dtype: str = "float32"
    teacher_seed: int = 1000


def ablation_variants(num_teachers: int = 3) -> dict[str, dict]:
    """Name -> overrides for the full method, each ablation and the baseline.

    ``w/o MT<k>`` keeps only teacher ``k`` (the multi-teacher ablation);
    ``w/o CSS`` disables the curriculum; ``w/o IN`` distills over the full
    item corpus; ``w/o WA`` uses the fixed base weights.
    """
    variants: dict[str, dict] = {"CKD": {}}
    for k in range(num_teachers):
        variants[f"w/o MT{k + 1}"] = {"teachers": (k,)}
    variants["w/o CSS"] = {"curriculum": {"enabled": False}}
    variants["w/o IN"] = {"distill": {"kd_candidates": "full_corpus"}}
    variants["w/o WA"] = {"distill": {"weight_mode": "fixed"}}
    variants["baseline"] = {"distill": {"kd_weight": 0.0}}
    return variants


@dataclass
class Benchmark:
    config: BenchmarkConfig
    split: SplitDataset
    teachers: list[SequentialModel] = field(default_factory=list)
    teacher_reports: list[MetricReport] = field(default_factory=list)

    @classmethod
    def prepare(cls, config: BenchmarkConfig = BenchmarkConfig()) -> "Benchmark":
        domains = synthesize(config.synthetic)
        target = domains[-1].dataset
        split = leave_one_out_split(target)
        bench = cls(config, split)
        dtype = np.dtype(config.dtype)
        for i, recipe in enumerate(config.teachers):
            sources = []
            for k in recipe.sources:
                sources.extend(remap_items(domains[k].dataset, target))
            model, _ = pretrain_teacher(split, recipe.model, config.teacher_optim,
                                        config.teacher_seed + i, source_sequences=sources,
                                        dtype=dtype, source_epochs=config.teacher_source_epochs)
            bench.teachers.append(model)
            bench.teacher_reports.append(evaluate(model, split.test, EvalConfig()))
            log.info("teacher %s test %s", recipe.name, bench.teacher_reports[-1].to_dict())
        return bench

    def panel(self, subset=None) -> TeacherPanel:
        idx = range(len(self.teachers)) if subset is None else subset
        return TeacherPanel.uniform([ModelTeacher(self.teachers[i], self.config.teachers[i].name)
                                     for i in idx])

    def train(self, seed: int, variant: dict | None = None,
              panel: TeacherPanel | None = None) -> TrainResult:
        """Distill a fresh student; ``variant`` holds overrides as in :func:`ablation_variants`."""
        variant = variant or {}
        cfg = self.config
        dcfg = replace(cfg.distill, **variant.get("distill", {}))
        ccfg = replace(cfg.curriculum, **variant.get("curriculum", {}))
        if panel is None:
            panel = self.panel(variant.get("teachers"))
        student = init_model(cfg.student, self.split.num_items, seed, dtype=np.dtype(cfg.dtype))
        return distill_train(student, panel, self.split, dcfg, ccfg, cfg.student_optim, seed)

    def test_ndcg(self, model: SequentialModel, k: int = 10) -> float:
        return evaluate(model, self.split.test, EvalConfig((k,))).ndcg[k]
