"""Teachers as score oracles: frozen in-framework models and score-matrix files."""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .dataio import SplitDataset
from .evaluation import EvalConfig, evaluate
from .model import ModelConfig, SequentialModel, bind_params, encode_batch, encode_graph, init_model
from .training import Adam, EarlyStopping, OptimConfig, inbatch_candidates

log = logging.getLogger(__name__)

SCORES_MAGIC = b"CKDS"
SCORES_VERSION = 1
_SCORES_HEADER = struct.Struct("<4sIQQ")


class ScoreFileError(ValueError):
    pass


def distillation_inputs(split: SplitDataset, max_len: int) -> list[tuple[int, tuple[int, ...], int]]:
    """One ``(user, input, positive)`` training pair per user.

    The input is the training prefix minus its last item (truncated to
    ``max_len``); the positive is that last item.  Users whose training
    prefix has fewer than two items yield no pair.
    """
    out = []
    for u, seq in enumerate(split.train):
        if len(seq) >= 2:
            out.append((u, tuple(seq[:-1][-max_len:]), seq[-1]))
    return out


class ModelTeacher:
    """Frozen sequential model queried in eval mode."""

    def __init__(self, model: SequentialModel, name: str = "model"):
        self.model = model if model.frozen else model.freeze()
        self.name = name

    @property
    def num_items(self) -> int:
        return self.model.vocab

    def scores(self, user: int, sequence: Sequence[int], candidates: Sequence[int]) -> np.ndarray:
        cands = _check_candidates(candidates, self.num_items)
        u = encode_batch(self.model, [tuple(sequence)[-self.model.config.max_len:]])[0]
        return self.model.params["item_emb"][cands] @ u

    def score_rows(self, users: Sequence[int], sequences: Sequence[Sequence[int]]) -> np.ndarray:
        """Raw scores of every item for each query, shape (len(users), num_items)."""
        u = encode_batch(self.model, [tuple(s)[-self.model.config.max_len:] for s in sequences])
        return u @ self.model.params["item_emb"].T


class ScoreMatrix:
    """Precomputed ``users x items`` raw logits loaded from a score file."""

    def __init__(self, logits: np.ndarray, name: str = "scores"):
        logits = np.asarray(logits)
        if logits.ndim != 2:
            raise ScoreFileError("score matrix must be 2-D")
        if not np.all(np.isfinite(logits)):
            raise ScoreFileError("score matrix has non-finite entries")
        self.logits = logits
        self.name = name

    @property
    def num_users(self) -> int:
        return self.logits.shape[0]

    @property
    def num_items(self) -> int:
        return self.logits.shape[1]

    def _row(self, user: int) -> np.ndarray:
        if not 0 <= user < self.num_users:
            raise KeyError(f"unknown user id {user} (score matrix has {self.num_users} users)")
        return self.logits[user]

    def scores(self, user: int, sequence: Sequence[int], candidates: Sequence[int]) -> np.ndarray:
        cands = _check_candidates(candidates, self.num_items)
        return self._row(user)[cands]

    def score_rows(self, users: Sequence[int], sequences: Sequence[Sequence[int]]) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        if users.size and (users.min() < 0 or users.max() >= self.num_users):
            raise KeyError(f"unknown user id in query (score matrix has {self.num_users} users)")
        return self.logits[users]


def _check_candidates(candidates, num_items: int) -> np.ndarray:
    cands = np.asarray(candidates, dtype=np.int64)
    if cands.size == 0:
        raise ValueError("teacher query needs at least one candidate")
    if cands.min() < 0 or cands.max() >= num_items:
        raise ValueError(f"candidate out of vocabulary (size {num_items})")
    return cands


def teacher_scores(teacher, user: int, sequence: Sequence[int], candidates: Sequence[int]) -> np.ndarray:
    return teacher.scores(user, sequence, candidates)


@dataclass
class TeacherPanel:
    teachers: list
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.teachers) < 1:
            raise ValueError("a teacher panel needs at least one teacher")
        if self.weights.shape != (len(self.teachers),):
            raise ValueError("one base weight per teacher required")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"teacher weights must be non-negative and sum to 1, got {self.weights.tolist()}")
        sizes = {t.num_items for t in self.teachers}
        if len(sizes) != 1:
            raise ValueError(f"teachers disagree on the item vocabulary: {sorted(sizes)}")

    @classmethod
    def uniform(cls, teachers: list) -> "TeacherPanel":
        k = len(teachers)
        return cls(list(teachers), np.full(k, 1.0 / k) if k else np.zeros(0))

    @property
    def num_items(self) -> int:
        return self.teachers[0].num_items

    def __len__(self) -> int:
        return len(self.teachers)

    def subset(self, indices: Sequence[int]) -> "TeacherPanel":
        """Panel of the chosen teachers with their base weights renormalized."""
        idx = list(indices)
        w = self.weights[idx]
        return TeacherPanel([self.teachers[i] for i in idx], w / w.sum())

    def precompute(self, users: Sequence[int], sequences: Sequence[Sequence[int]]) -> np.ndarray:
        """Raw scores of every teacher on every item, shape (K, len(users), num_items)."""
        return np.stack([np.asarray(t.score_rows(users, sequences), dtype=np.float64)
                         for t in self.teachers])


# ---------------------------------------------------------------------------
# score-matrix files
# ---------------------------------------------------------------------------

def write_score_matrix(logits: np.ndarray, path: str | os.PathLike) -> None:
    logits = np.ascontiguousarray(logits, dtype="<f4")
    try:
        with open(path, "wb") as fh:
            fh.write(_SCORES_HEADER.pack(SCORES_MAGIC, SCORES_VERSION, logits.shape[0], logits.shape[1]))
            fh.write(logits.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write score matrix {path}: {exc.strerror}") from exc


def open_score_matrix(path: str | os.PathLike) -> ScoreMatrix:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read score matrix {path}: {exc.strerror}") from exc
    if len(data) < _SCORES_HEADER.size:
        raise ScoreFileError(f"{path}: truncated header")
    magic, version, n_users, n_items = _SCORES_HEADER.unpack_from(data)
    if magic != SCORES_MAGIC:
        raise ScoreFileError(f"{path}: bad magic")
    if version != SCORES_VERSION:
        raise ScoreFileError(f"{path}: unsupported version {version}")
    payload = data[_SCORES_HEADER.size:]
    if len(payload) < 4 * n_users * n_items:
        raise ScoreFileError(f"{path}: truncated payload")
    if len(payload) > 4 * n_users * n_items:
        raise ScoreFileError(f"{path}: trailing bytes after payload")
    logits = np.frombuffer(payload, dtype="<f4").reshape(n_users, n_items).copy()
    return ScoreMatrix(logits, name=Path(path).stem)


def export_score_matrix(teacher: ModelTeacher | SequentialModel, split: SplitDataset,
                        path: str | os.PathLike) -> ScoreMatrix:
    """Write the teacher's logits for every user and item.

    Row ``u`` scores user ``u``'s distillation input (see
    :func:`distillation_inputs`); users without one get a zero row.
    """
    if isinstance(teacher, SequentialModel):
        teacher = ModelTeacher(teacher)
    if teacher.num_items != split.num_items:
        raise ValueError(f"teacher vocab {teacher.num_items} != dataset items {split.num_items}")
    pairs = distillation_inputs(split, teacher.model.config.max_len)
    logits = np.zeros((split.num_users, split.num_items), dtype=np.float32)
    if pairs:
        rows = teacher.score_rows([p[0] for p in pairs], [p[1] for p in pairs])
        logits[[p[0] for p in pairs]] = rows
    write_score_matrix(logits, path)
    return ScoreMatrix(logits, name=Path(path).stem)


# ---------------------------------------------------------------------------
# pre-training
# ---------------------------------------------------------------------------

def next_item_pairs(sequences: Sequence[Sequence[int]], max_len: int) -> list[tuple[tuple[int, ...], int]]:
    """Every ``(prefix, next item)`` pair of every sequence."""
    pairs = []
    for seq in sequences:
        for t in range(1, len(seq)):
            pairs.append((tuple(seq[max(0, t - max_len):t]), seq[t]))
    return pairs


def inbatch_ce_step(model: SequentialModel, inputs, positives, rng: np.random.Generator):
    """Record encoder + in-batch cross-entropy; returns ``(graph, loss node)``."""
    g = nx.Graph(model.dtype)
    nodes = bind_params(g, model)
    users = encode_graph(g, nodes, model, inputs, training=True, rng=rng)
    cands, pos = inbatch_candidates(positives)
    logits = nx.matmul(users, nx.transpose(nx.gather(nodes["item_emb"], cands), (1, 0)))
    onehot = np.zeros((len(positives), len(cands)))
    onehot[np.arange(len(positives)), pos] = 1.0
    ce = nx.scale(nx.mean(nx.sum(nx.mul(nx.log_softmax(logits), g.const(onehot)), axis=1)), -1.0)
    return g, ce


def pretrain_teacher(target: SplitDataset, config: ModelConfig, optim: OptimConfig, seed: int,
                     source_sequences: Sequence[Sequence[int]] = (), dtype=np.float32,
                     source_epochs: int | None = None) -> tuple[SequentialModel, list[float]]:
    """Pre-train on source sequences, then tune on the target training split.

    Source sequences must already be expressed in the target item vocabulary.
    Tuning stops early once valid NDCG@10 has not improved for
    ``optim.patience`` epochs; the best-scoring parameters are returned
    frozen, together with the per-epoch mean training losses.
    """
    target_pairs = next_item_pairs(target.train, config.max_len)
    if not target_pairs and not source_sequences:
        raise ValueError("pretrain_teacher needs non-empty training data")
    optim.validate()
    model = init_model(config, target.num_items, seed, dtype=dtype)
    streams = np.random.SeedSequence(seed).spawn(2)
    order_rng = np.random.default_rng(streams[0])
    drop_rng = np.random.default_rng(streams[1])
    adam = Adam(model.params, optim)
    losses: list[float] = []

    def run_epoch(pairs) -> float:
        order = order_rng.permutation(len(pairs))
        total, count = 0.0, 0
        for start in range(0, len(order), optim.batch_size):
            idx = order[start:start + optim.batch_size]
            if len(idx) < 2:
                continue
            g, loss = inbatch_ce_step(model, [pairs[i][0] for i in idx], [pairs[i][1] for i in idx], drop_rng)
            adam.step(model.params, g.gradients(loss))
            total += float(loss.value[0]) * len(idx)
            count += len(idx)
        return total / max(count, 1)

    source_pairs = next_item_pairs(source_sequences, config.max_len)
    n_source = optim.epochs if source_epochs is None else source_epochs
    for _ in range(n_source if source_pairs else 0):
        losses.append(run_epoch(source_pairs + target_pairs))

    stopper = EarlyStopping(optim.patience)
    for epoch in range(optim.epochs):
        losses.append(run_epoch(target_pairs))
        if target.valid:
            ndcg = evaluate(model, target.valid, EvalConfig((10,), "valid")).ndcg[10]
            stopper.update(epoch, ndcg, model.params)
            if stopper.should_stop:
                break
    if stopper.best_params is not None:
        model.params = stopper.best_params
    log.info("teacher seed=%d trained %d epochs, best valid NDCG@10 %.4f", seed, len(losses), stopper.best)
    return model.freeze(), losses
