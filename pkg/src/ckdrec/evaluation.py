"""Full-corpus leave-one-out ranking with Recall@K and NDCG@K."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import SequentialModel, encode_batch


@dataclass(frozen=True)
class EvalConfig:
    cutoffs: tuple[int, ...] = (5, 10, 20)
    split: str = "test"

    def validate(self) -> None:
        if not self.cutoffs or any(k < 1 for k in self.cutoffs):
            raise ValueError(f"cutoffs must all be >= 1, got {list(self.cutoffs)}")
        if self.split not in ("valid", "test"):
            raise ValueError(f"split must be 'valid' or 'test', got {self.split!r}")


@dataclass
class MetricReport:
    recall: dict[int, float] = field(default_factory=dict)
    ndcg: dict[int, float] = field(default_factory=dict)
    users: int = 0

    def to_dict(self) -> dict:
        out = {}
        for k in sorted(self.recall):
            out[f"recall@{k}"] = self.recall[k]
        for k in sorted(self.ndcg):
            out[f"ndcg@{k}"] = self.ndcg[k]
        out["users"] = self.users
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)

    def to_table(self) -> str:
        lines = [f"{'K':>4}  {'Recall@K':>10}  {'NDCG@K':>10}"]
        for k in sorted(self.recall):
            lines.append(f"{k:>4}  {self.recall[k]:>10.6f}  {self.ndcg[k]:>10.6f}")
        lines.append(f"users: {self.users}")
        return "\n".join(lines)


def metrics_at_k(rank: int, k: int) -> tuple[float, float]:
    if rank < 1 or k < 1:
        raise ValueError("rank and k must be >= 1")
    if rank > k:
        return 0.0, 0.0
    return 1.0, 1.0 / math.log2(rank + 1)


def ranks_from_scores(scores: np.ndarray, prefixes: Sequence[Sequence[int]],
                      targets: Sequence[int]) -> np.ndarray:
    """Pessimistic 1-based rank of each target among the non-prefix items.

    Items in a user's prefix are removed from the candidate set (the target
    itself never is).  Every other item scoring at least as high as the
    target counts against it.
    """
    scores = np.asarray(scores)
    targets = np.asarray(targets, dtype=np.int64)
    rows = np.arange(len(targets))
    t_score = scores[rows, targets]
    beats = scores >= t_score[:, None]
    beats[rows, targets] = False
    for b, prefix in enumerate(prefixes):
        if len(prefix):
            seen = np.fromiter(prefix, dtype=np.int64)
            seen = seen[seen != targets[b]]
            beats[b, seen] = False
    return 1 + beats.sum(axis=1)


def rank_target(model: SequentialModel, prefix: Sequence[int], target: int) -> int:
    if not 0 <= target < model.vocab:
        raise ValueError(f"target {target} out of vocabulary (size {model.vocab})")
    u = encode_batch(model, [prefix])
    scores = u @ model.params["item_emb"].T
    return int(ranks_from_scores(scores, [prefix], [target])[0])


def model_ranks(model: SequentialModel, rows, chunk: int = 512) -> np.ndarray:
    """Ranks for ``(user, prefix, target)`` rows, scored in eval mode."""
    rows = list(rows)
    out = []
    emb = model.params["item_emb"]
    for start in range(0, len(rows), chunk):
        part = rows[start:start + chunk]
        prefixes = [r[1][-model.config.max_len:] for r in part]
        targets = [r[2] for r in part]
        if min(targets) < 0 or max(targets) >= model.vocab:
            raise ValueError(f"target out of vocabulary (size {model.vocab})")
        u = encode_batch(model, prefixes, chunk=chunk)
        out.append(ranks_from_scores(u @ emb.T, [r[1] for r in part], targets))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def report_from_ranks(ranks: np.ndarray, cutoffs: Sequence[int]) -> MetricReport:
    ranks = np.asarray(ranks)
    report = MetricReport(users=int(ranks.size))
    for k in cutoffs:
        if ranks.size == 0:
            report.recall[k], report.ndcg[k] = 0.0, 0.0
            continue
        hit = ranks <= k
        report.recall[k] = float(hit.mean())
        report.ndcg[k] = float(np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0).mean())
    return report


def evaluate(model: SequentialModel, rows, config: EvalConfig = EvalConfig()) -> MetricReport:
    """Mean metrics over ``rows`` (a split's valid or test part)."""
    config.validate()
    return report_from_ranks(model_ranks(model, rows), config.cutoffs)


def merge_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """User-weighted mean of partial reports over disjoint user sets."""
    total = sum(r.users for r in reports)
    merged = MetricReport(users=total)
    if not reports:
        return merged
    for k in reports[0].recall:
        merged.recall[k] = sum(r.recall[k] * r.users for r in reports) / max(total, 1)
        merged.ndcg[k] = sum(r.ndcg[k] * r.users for r in reports) / max(total, 1)
    return merged
