"""Consistency-weighted multi-teacher distillation into a sequential student.

Per batch, every teacher's raw scores over the candidate items become a
temperature softmax; teachers that disagree most with the others (summed
squared differences above ``epsilon``) are dropped for that user and their
weight is shared out; the blended distribution supervises the student's
in-batch softmax through a KL term added to the cross-entropy loss.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from decimal import Decimal

import numpy as np

from . import numerics as nx
from .curriculum import CurriculumConfig, build_plan, epoch_stream
from .dataio import PopularityTable, SplitDataset, popularity_table
from .evaluation import EvalConfig, evaluate
from .model import SequentialModel, bind_params, encode_graph
from .teacher import TeacherPanel, distillation_inputs
from .training import Adam, EarlyStopping, OptimConfig, inbatch_candidates

log = logging.getLogger(__name__)

WEIGHT_MODES = ("consistency", "fixed")
KD_CANDIDATES = ("in_batch", "full_corpus")
KL_DIRECTIONS = ("student_teacher", "teacher_student")
Q_FLOOR = 1e-12


@dataclass(frozen=True)
class DistillationConfig:
    temperature: float = 0.2
    kd_weight: float = 1.0
    epsilon: float = 0.05
    weight_mode: str = "consistency"
    kd_candidates: str = "in_batch"
    kl_direction: str = "student_teacher"
    teacher_weights: tuple[float, ...] = ()  # empty: uniform

    def validate(self) -> None:
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.kd_weight < 0:
            raise ValueError(f"kd_weight must be >= 0, got {self.kd_weight}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}, got {self.weight_mode!r}")
        if self.kd_candidates not in KD_CANDIDATES:
            raise ValueError(f"kd_candidates must be one of {KD_CANDIDATES}, got {self.kd_candidates!r}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ValueError(f"kl_direction must be one of {KL_DIRECTIONS}, got {self.kl_direction!r}")
        if any(w < 0 for w in self.teacher_weights):
            raise ValueError("teacher_weights must be non-negative")


# ---------------------------------------------------------------------------
# supervision pipeline (numpy, per row or batched over rows)
# ---------------------------------------------------------------------------

def teacher_inbatch_distribution(scores, temperature: float) -> np.ndarray:
    """Temperature softmax over the last axis with max subtraction."""
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    z = np.asarray(scores, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def disagreement(rows: np.ndarray) -> np.ndarray:
    """Per-teacher summed squared difference to every other teacher.

    ``rows`` has shape (..., K, T); the result (..., K) is the negated
    confidence of each teacher.
    """
    diff = rows[..., :, None, :] - rows[..., None, :, :]
    # pairwise sums first: the matrix is exactly symmetric, so mathematically
    # tied teachers stay tied in floating point
    pairwise = (diff ** 2).sum(axis=-1)
    return pairwise.sum(axis=-1)


def _redistribution_table(w: np.ndarray) -> np.ndarray:
    """Row ``k``: base weights with teacher ``k`` dropped and its share split evenly.

    Computed in decimal arithmetic on each weight's shortest repr, so
    weights written as decimals (0.4, 0.3, ...) give the exact decimal
    result rather than a binary rounding tie.
    """
    k = len(w)
    dec = [Decimal(repr(float(x))) for x in w]
    table = np.empty((k, k))
    for drop in range(k):
        share = dec[drop] / (k - 1)
        for j in range(k):
            table[drop, j] = 0.0 if j == drop else float(dec[j] + share)
    return table


def consistency_weights(rows, weights, epsilon: float, mode: str = "consistency") -> np.ndarray:
    """Adjusted teacher weights for one user or a batch of users.

    ``rows`` is (K, T) or (B, K, T); returns (K,) or (B, K).  When the largest
    disagreement reaches ``epsilon`` the most inconsistent teacher (lowest
    index on ties) is zeroed and its weight split evenly among the others.
    """
    rows = np.asarray(rows, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    k = w.shape[-1]
    single = rows.ndim == 2
    batch = rows[None] if single else rows
    out = np.broadcast_to(w, batch.shape[:-1]).copy()
    if mode == "fixed" or k == 1:
        return out[0] if single else out
    if mode != "consistency":
        raise ValueError(f"unknown weight mode {mode!r}")
    dis = disagreement(batch)
    worst = dis.argmax(axis=-1)
    drop = dis.max(axis=-1) >= epsilon
    out[drop] = _redistribution_table(w)[worst[drop]]
    return out[0] if single else out


def blended_supervision(adjusted, rows) -> np.ndarray:
    """Weighted mixture of teacher rows, renormalized to sum to one."""
    adjusted = np.asarray(adjusted, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.float64)
    mix = (adjusted[..., :, None] * rows).sum(axis=-2)
    total = mix.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise ValueError("blended supervision row has zero mass")
    return mix / total


def supervision(raw: np.ndarray, weights, cfg: DistillationConfig) -> np.ndarray:
    """Raw teacher scores (K, B, T) to supervision rows q (B, T)."""
    rows = teacher_inbatch_distribution(np.swapaxes(raw, 0, 1), cfg.temperature)
    adjusted = consistency_weights(rows, weights, cfg.epsilon, cfg.weight_mode)
    return blended_supervision(adjusted, rows)


def kl_terms(p: np.ndarray, q: np.ndarray, direction: str = "student_teacher") -> np.ndarray:
    q = np.maximum(q, Q_FLOOR)
    if direction == "student_teacher":
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(p > 0, p * (np.log(np.maximum(p, 1e-300)) - np.log(q)), 0.0).sum(axis=-1)
    return (q * (np.log(q) - np.log(np.maximum(p, 1e-300)))).sum(axis=-1)


def batch_losses(logits, positive: int, q, kd_weight: float,
                 direction: str = "student_teacher") -> tuple[float, float, float]:
    """Cross-entropy, KL and joint loss for one row of student logits."""
    logits = np.asarray(logits, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if not 0 <= positive < logits.shape[-1]:
        raise ValueError(f"positive index {positive} out of range for {logits.shape[-1]} candidates")
    z = logits - logits.max()
    log_p = z - np.log(np.exp(z).sum())
    p = np.exp(log_p)
    ce = float(-log_p[positive])
    kd = float(kl_terms(p, q, direction))
    total = ce + kd_weight * kd if kd_weight else ce
    return ce, kd, total


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    stage: int
    ce: float
    kd: float
    valid_recall: float
    valid_ndcg: float

    def line(self) -> str:
        return (f"{self.epoch}\t{self.stage}\t{self.ce:.6f}\t{self.kd:.6f}"
                f"\t{self.valid_recall:.6f}\t{self.valid_ndcg:.6f}")


@dataclass
class TrainResult:
    model: SequentialModel
    history: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def metrics_log(self) -> str:
        return "".join(r.line() + "\n" for r in self.history)

    def write_metrics_log(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.metrics_log())


def distill_step(model: SequentialModel, inputs, positives, rng, teacher_raw, weights,
                 dcfg: DistillationConfig):
    """Record one training step.

    ``teacher_raw`` holds raw teacher scores over every item, shape
    (K, B, num_items), or ``None`` for a plain cross-entropy step.  Returns
    ``(graph, loss, ce, kd)`` nodes (``kd`` is ``None`` without teachers).
    """
    g = nx.Graph(model.dtype)
    nodes = bind_params(g, model)
    users = encode_graph(g, nodes, model, inputs, training=True, rng=rng)
    cands, pos = inbatch_candidates(positives)
    logits = nx.matmul(users, nx.transpose(nx.gather(nodes["item_emb"], cands), (1, 0)))
    log_p = nx.log_softmax(logits)
    onehot = np.zeros((len(positives), len(cands)))
    onehot[np.arange(len(positives)), pos] = 1.0
    ce = nx.scale(nx.mean(nx.sum(nx.mul(log_p, g.const(onehot)), axis=1)), -1.0)
    if teacher_raw is None or dcfg.kd_weight == 0:
        return g, ce, ce, None

    if dcfg.kd_candidates == "full_corpus":
        kd_items = np.arange(model.vocab)
        log_p_kd = nx.log_softmax(nx.matmul(users, nx.transpose(nodes["item_emb"], (1, 0))))
    else:
        kd_items = cands
        log_p_kd = log_p
    q = supervision(teacher_raw[:, :, kd_items], weights, dcfg)
    log_q = np.log(np.maximum(q, Q_FLOOR))
    if dcfg.kl_direction == "student_teacher":
        terms = nx.mul(nx.exp(log_p_kd), nx.sub(log_p_kd, g.const(log_q)))
    else:
        terms = nx.mul(g.const(q), nx.sub(g.const(log_q), log_p_kd))
    kd = nx.mean(nx.sum(terms, axis=1))
    loss = nx.add(ce, nx.scale(kd, dcfg.kd_weight))
    return g, loss, ce, kd


def distill_train(student: SequentialModel, panel: TeacherPanel | None, data: SplitDataset,
                  dcfg: DistillationConfig = DistillationConfig(),
                  ccfg: CurriculumConfig = CurriculumConfig(),
                  optim: OptimConfig = OptimConfig(), seed: int = 0,
                  stats: PopularityTable | None = None) -> TrainResult:
    """Curriculum-scheduled distillation; mutates and returns ``student``.

    With no teachers or ``kd_weight == 0`` this is the plain cross-entropy
    baseline and never queries a teacher.  Early stopping watches valid
    NDCG@10 once the curriculum stages are done; the best parameters are
    restored at the end.
    """
    dcfg.validate()
    ccfg.validate()
    optim.validate()
    use_kd = panel is not None and len(panel) > 0 and dcfg.kd_weight > 0
    if panel is not None and len(panel) > 0 and panel.num_items != data.num_items:
        raise ValueError(
            f"teacher vocabulary ({panel.num_items} items) does not match the dataset ({data.num_items})"
        )
    if student.vocab != data.num_items:
        raise ValueError(f"student vocabulary {student.vocab} != dataset items {data.num_items}")
    pairs = distillation_inputs(data, student.config.max_len)
    if not pairs:
        raise ValueError("distill_train needs at least one training pair")

    teacher_raw = None
    if use_kd:
        teacher_raw = panel.precompute([p[0] for p in pairs], [p[1] for p in pairs])

    plan = None
    if ccfg.enabled:
        stats = stats or popularity_table(data)
        full = [data.train[p[0]] for p in pairs]
        plan = build_plan(full, stats, ccfg)
    n_stage_epochs = ccfg.num_buckets * ccfg.epochs_per_stage if ccfg.enabled else 0

    streams = np.random.SeedSequence(seed).spawn(2)
    stream = epoch_stream(len(pairs), plan, ccfg, np.random.default_rng(streams[0]))
    drop_rng = np.random.default_rng(streams[1])
    adam = Adam(student.params, optim)
    stopper = EarlyStopping(optim.patience)
    result = TrainResult(student)
    eval_cfg = EvalConfig((10,), "valid")

    for epoch in range(1, optim.epochs + 1):
        stage, order = next(stream)
        ce_sum = kd_sum = 0.0
        seen = 0
        for start in range(0, len(order), optim.batch_size):
            idx = order[start:start + optim.batch_size]
            if len(idx) < 2:
                continue
            raw = teacher_raw[:, idx] if use_kd else None
            g, loss, ce, kd = distill_step(
                student, [pairs[i][1] for i in idx], [pairs[i][2] for i in idx],
                drop_rng, raw, panel.weights if use_kd else None, dcfg,
            )
            adam.step(student.params, g.gradients(loss))
            result.step_losses.append(float(loss.value[0]))
            ce_sum += float(ce.value[0]) * len(idx)
            kd_sum += (float(kd.value[0]) if kd is not None else 0.0) * len(idx)
            seen += len(idx)
        if data.valid:
            rep = evaluate(student, data.valid, eval_cfg)
            recall, ndcg = rep.recall[10], rep.ndcg[10]
        else:
            recall = ndcg = 0.0
        result.history.append(EpochRecord(epoch, stage, ce_sum / max(seen, 1),
                                          kd_sum / max(seen, 1), recall, ndcg))
        stopper.update(epoch, ndcg, student.params)
        if epoch > n_stage_epochs and stopper.should_stop:
            break
    if stopper.best_params is not None:
        student.params = stopper.best_params
    result.best_epoch = stopper.best_epoch
    log.info("distillation finished after %d epochs (best %d, valid NDCG@10 %.4f)",
             len(result.history), stopper.best_epoch, stopper.best)
    return result
