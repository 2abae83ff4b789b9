"""Optimizer and loop helpers shared by teacher pre-training and distillation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    l2: float = 1e-5
    batch_size: int = 512
    epochs: int = 200
    patience: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.l2 < 0:
            raise ValueError(f"l2 must be >= 0, got {self.l2}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 0 or self.patience < 1:
            raise ValueError("epochs must be >= 0 and patience >= 1")


class Adam:
    """Adam with classic (coupled) L2: ``grad + l2 * param``."""

    def __init__(self, params: dict[str, np.ndarray], cfg: OptimConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        corr1 = 1.0 - c.beta1 ** self.t
        corr2 = 1.0 - c.beta2 ** self.t
        for name, p in params.items():
            g = grads[name].astype(p.dtype, copy=False)
            if c.l2:
                g = g + c.l2 * p
            m, v = self.m[name], self.v[name]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            p -= (c.lr * (m / corr1) / (np.sqrt(v / corr2) + c.eps)).astype(p.dtype, copy=False)


def inbatch_candidates(positives) -> tuple[np.ndarray, np.ndarray]:
    """Deduplicated in-batch item set (sorted) and each row's positive index in it."""
    positives = np.asarray(positives, dtype=np.int64)
    cands = np.unique(positives)
    return cands, np.searchsorted(cands, positives)


class EarlyStopping:
    """Tracks the best validation score and a copy of the matching parameters."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = -1
        self.best_params: dict[str, np.ndarray] | None = None
        self.bad_epochs = 0

    def update(self, epoch: int, score: float, params: dict[str, np.ndarray]) -> None:
        if score > self.best:
            self.best = score
            self.best_epoch = epoch
            self.best_params = {k: v.copy() for k, v in params.items()}
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience
