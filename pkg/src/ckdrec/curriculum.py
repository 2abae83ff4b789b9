"""Sequence difficulty scoring and the easy-to-hard bucket schedule."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .dataio import N_MAX, PopularityTable


@dataclass(frozen=True)
class CurriculumConfig:
    alpha: float = 0.5
    num_buckets: int = 4
    epochs_per_stage: int = 1
    enabled: bool = True

    def validate(self) -> None:
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.num_buckets < 1:
            raise ValueError(f"num_buckets must be >= 1, got {self.num_buckets}")
        if self.epochs_per_stage < 1:
            raise ValueError(f"epochs_per_stage must be >= 1, got {self.epochs_per_stage}")


@dataclass(frozen=True)
class CurriculumPlan:
    ordered_samples: tuple[int, ...]
    bucket_bounds: tuple[int, ...]
    ssl: tuple[float, ...]

    @property
    def num_buckets(self) -> int:
        return len(self.bucket_bounds) - 1

    def bucket(self, r: int) -> tuple[int, ...]:
        """Samples of bucket ``r`` (1-based)."""
        lo, hi = self.bucket_bounds[r - 1], self.bucket_bounds[r]
        return self.ordered_samples[lo:hi]


def ssl_score(sample: Sequence[int], stats: PopularityTable, n_max: int = N_MAX,
              alpha: float = 0.5) -> float:
    """Length ratio minus ``alpha`` times the mean item popularity.

    Larger is harder: long sequences of unpopular items score highest.
    """
    n = len(sample)
    if n == 0:
        raise ValueError("ssl_score of an empty sequence")
    if n > n_max:
        raise ValueError(f"sequence length {n} exceeds n_max={n_max}")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    mean_pop = sum(stats(v) for v in sample) / n
    return n / n_max - alpha * mean_pop


def build_plan(samples: Sequence[Sequence[int]], stats: PopularityTable,
               config: CurriculumConfig, n_max: int | None = None) -> CurriculumPlan:
    """Sort samples by difficulty (ties by id) and cut into even buckets.

    Sample ids are positions in ``samples``.  ``n_max`` defaults to the
    longest sample so that untruncated sequences stay in range.
    """
    if len(samples) == 0:
        raise ValueError("build_plan needs at least one sample")
    config.validate()
    if n_max is None:
        n_max = max(N_MAX, max(len(s) for s in samples))
    ssl = [ssl_score(s, stats, n_max, config.alpha) for s in samples]
    order = sorted(range(len(samples)), key=lambda i: (ssl[i], i))
    b = config.num_buckets
    base, extra = divmod(len(samples), b)
    bounds = [0]
    for r in range(b):
        bounds.append(bounds[-1] + base + (1 if r < extra else 0))
    return CurriculumPlan(tuple(order), tuple(bounds), tuple(ssl))


def stage_samples(plan: CurriculumPlan, r: int) -> tuple[int, ...]:
    """Union of buckets ``1..r`` in difficulty order."""
    if not 1 <= r <= plan.num_buckets:
        raise ValueError(f"stage {r} out of range 1..{plan.num_buckets}")
    return plan.ordered_samples[: plan.bucket_bounds[r]]


def epoch_stream(num_samples: int, plan: CurriculumPlan | None, config: CurriculumConfig,
                 rng: np.random.Generator) -> Iterator[tuple[int, np.ndarray]]:
    """Endless ``(stage, sample order)`` per epoch.

    With a plan and the curriculum enabled, the first
    ``num_buckets * epochs_per_stage`` epochs train on growing bucket prefixes
    (each shuffled); afterwards, or when disabled, every epoch is a uniform
    shuffle of all samples.  Stage 0 marks uniform epochs.
    """
    if config.enabled and plan is not None:
        for r in range(1, plan.num_buckets + 1):
            pool = np.asarray(stage_samples(plan, r), dtype=np.int64)
            for _ in range(config.epochs_per_stage):
                yield r, rng.permutation(pool)
    while True:
        yield 0, rng.permutation(num_samples)
