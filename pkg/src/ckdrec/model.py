"""Self-attentive and mean-pooling sequential recommenders."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .dataio import N_MAX

ARCHITECTURES = ("attention", "mean_pool")

CKPT_MAGIC = b"CKDM"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    embedding_dim: int = 300
    num_heads: int = 2
    num_layers: int = 2
    max_len: int = N_MAX
    dropout: float = 0.1
    architecture: str = "attention"

    def validate(self) -> None:
        for name in ("embedding_dim", "num_heads", "num_layers", "max_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.embedding_dim % self.num_heads:
            raise ValueError(
                f"embedding_dim {self.embedding_dim} not divisible by num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")


@dataclass
class SequentialModel:
    config: ModelConfig
    vocab: int
    params: dict[str, np.ndarray] = field(default_factory=dict)
    frozen: bool = False

    @property
    def dtype(self):
        return self.params["item_emb"].dtype

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def astype(self, dtype) -> "SequentialModel":
        return replace(self, params={k: v.astype(dtype) for k, v in self.params.items()})

    def freeze(self) -> "SequentialModel":
        """Read-only copy; used for teachers and served students."""
        params = {k: v.copy() for k, v in self.params.items()}
        for v in params.values():
            v.flags.writeable = False
        return replace(self, params=params, frozen=True)


def parameter_shapes(config: ModelConfig, vocab: int) -> dict[str, tuple[int, ...]]:
    d = config.embedding_dim
    shapes = {"item_emb": (vocab, d)}
    if config.architecture == "mean_pool":
        return shapes
    shapes["pos_emb"] = (config.max_len, d)
    for layer in range(config.num_layers):
        p = f"layer{layer}."
        shapes.update({
            p + "ln1.gain": (d,), p + "ln1.bias": (d,),
            p + "wq": (d, d), p + "wk": (d, d), p + "wv": (d, d), p + "wo": (d, d),
            p + "ln2.gain": (d,), p + "ln2.bias": (d,),
            p + "ff1.w": (d, d), p + "ff1.b": (d,),
            p + "ff2.w": (d, d), p + "ff2.b": (d,),
        })
    shapes["final_ln.gain"] = (d,)
    shapes["final_ln.bias"] = (d,)
    return shapes


def init_model(config: ModelConfig, vocab: int, seed: int, dtype=np.float64) -> SequentialModel:
    """Uniform(-1/sqrt(d), 1/sqrt(d)) weights; layer-norm gains 1, biases 0."""
    config.validate()
    if vocab <= 0:
        raise ValueError("vocab must be positive")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(config.embedding_dim)
    params = {}
    for name, shape in parameter_shapes(config, vocab).items():
        if name.endswith("ln1.gain") or name.endswith("ln2.gain") or name == "final_ln.gain":
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(".bias") or name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return SequentialModel(config, vocab, params)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def pad_batch(sequences: Sequence[Sequence[int]], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad the most recent ``max_len`` items of each sequence with item 0.

    Returns ``(ids, lengths)``.  Right padding keeps every real position at its
    absolute index, so the causal mask alone hides the padding.
    """
    seqs = [tuple(s[-max_len:]) for s in sequences]
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    if lengths.size == 0 or lengths.min() < 1:
        raise ValueError("cannot encode an empty sequence")
    width = int(lengths.max())
    ids = np.zeros((len(seqs), width), dtype=np.int64)
    for b, s in enumerate(seqs):
        ids[b, : len(s)] = s
    return ids, lengths


def bind_params(graph: nx.Graph, model: SequentialModel) -> dict[str, nx.Node]:
    return {name: graph.param(name, value) for name, value in model.params.items()}


def encode_graph(graph: nx.Graph, nodes: dict[str, nx.Node], model: SequentialModel,
                 sequences: Sequence[Sequence[int]], training: bool = False,
                 rng: np.random.Generator | None = None) -> nx.Node:
    """Record the encoder for a batch of sequences; returns user vectors (B, d)."""
    cfg = model.config
    ids, lengths = pad_batch(sequences, cfg.max_len)
    if ids.max() >= model.vocab or ids.min() < 0:
        raise ValueError(f"item id out of vocabulary (size {model.vocab})")
    batch, width = ids.shape
    d = cfg.embedding_dim
    valid = (np.arange(width)[None, :] < lengths[:, None]).astype(graph.dtype)

    emb = nx.gather(nodes["item_emb"], ids)
    if cfg.architecture == "mean_pool":
        weights = valid / lengths[:, None]
        pooled = nx.mul(emb, graph.const(weights[:, :, None] * np.ones((1, 1, d))))
        return nx.sum(pooled, axis=1)

    pos = nx.gather(nodes["pos_emb"], np.arange(width))
    x = nx.add(emb, pos)
    x = nx.dropout(x, cfg.dropout, rng, training)
    x = nx.mul(x, graph.const(valid[:, :, None] * np.ones((1, 1, d))))

    h_count = cfg.num_heads
    dh = d // h_count
    causal = np.tril(np.ones((width, width), dtype=bool))
    for layer in range(cfg.num_layers):
        p = f"layer{layer}."
        h = nx.layer_norm(x, nodes[p + "ln1.gain"], nodes[p + "ln1.bias"])

        def heads(t):
            return nx.transpose(nx.reshape(t, (batch, width, h_count, dh)), (0, 2, 1, 3))

        q = heads(nx.matmul(h, nodes[p + "wq"]))
        k = heads(nx.matmul(h, nodes[p + "wk"]))
        v = heads(nx.matmul(h, nodes[p + "wv"]))
        att = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        att = nx.masked_softmax(att, causal)
        att = nx.dropout(att, cfg.dropout, rng, training)
        ctx = nx.reshape(nx.transpose(nx.matmul(att, v), (0, 2, 1, 3)), (batch, width, d))
        out = nx.dropout(nx.matmul(ctx, nodes[p + "wo"]), cfg.dropout, rng, training)
        x = nx.add(x, out)

        h = nx.layer_norm(x, nodes[p + "ln2.gain"], nodes[p + "ln2.bias"])
        ff = nx.relu(nx.add(nx.matmul(h, nodes[p + "ff1.w"]), nodes[p + "ff1.b"]))
        ff = nx.add(nx.matmul(ff, nodes[p + "ff2.w"]), nodes[p + "ff2.b"])
        x = nx.add(x, nx.dropout(ff, cfg.dropout, rng, training))

    x = nx.layer_norm(x, nodes["final_ln.gain"], nodes["final_ln.bias"])
    last = np.zeros((batch, width, 1), dtype=graph.dtype)
    last[np.arange(batch), lengths - 1, 0] = 1.0
    return nx.sum(nx.mul(x, graph.const(last * np.ones((1, 1, d)))), axis=1)


def encode_batch(model: SequentialModel, sequences: Sequence[Sequence[int]],
                 chunk: int = 512) -> np.ndarray:
    """Evaluation-mode user vectors for many sequences, shape (B, d)."""
    out = []
    for start in range(0, len(sequences), chunk):
        g = nx.Graph(model.dtype)
        nodes = bind_params(g, model)
        out.append(encode_graph(g, nodes, model, sequences[start:start + chunk]).value)
    if not out:
        return np.zeros((0, model.config.embedding_dim), dtype=model.dtype)
    return np.concatenate(out, axis=0)


def encode_sequence(model: SequentialModel, sequence: Sequence[int], mode: str = "eval",
                    rng: np.random.Generator | None = None) -> np.ndarray:
    if len(sequence) == 0:
        raise ValueError("cannot encode an empty sequence")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if len(sequence) > model.config.max_len:
        raise ValueError(
            f"sequence length {len(sequence)} exceeds max_len {model.config.max_len}; truncate first"
        )
    g = nx.Graph(model.dtype)
    nodes = bind_params(g, model)
    return encode_graph(g, nodes, model, [sequence], training=mode == "train", rng=rng).value[0]


def score_items(u: np.ndarray, items: Sequence[int], model: SequentialModel) -> np.ndarray:
    """Dot products of ``u`` with the (tied) item embeddings, in input order."""
    ids = np.asarray(items, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("score_items needs at least one item")
    if ids.min() < 0 or ids.max() >= model.vocab:
        raise ValueError(f"item id out of vocabulary (size {model.vocab})")
    return model.params["item_emb"][ids] @ np.asarray(u)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: SequentialModel, path: str | os.PathLike) -> None:
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<II", CKPT_VERSION, len(model.params))
    for name, value in model.params.items():
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", value.ndim)
        buf += struct.pack(f"<{value.ndim}Q", *value.shape)
        buf += np.ascontiguousarray(value, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def read_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated file")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{path}: tensor name is not UTF-8") from None
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).copy()
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after {count} tensors")
    return tensors


def load_checkpoint(path: str | os.PathLike, config: ModelConfig, vocab: int,
                    dtype=np.float32) -> SequentialModel:
    """Load a checkpoint and check it against the declared architecture."""
    config.validate()
    tensors = read_checkpoint(path)
    expected = parameter_shapes(config, vocab)
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointError(
            f"{path}: tensor names do not match config (missing {missing}, unexpected {extra})"
        )
    params = {}
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name}: file {tensors[name].shape}, config {shape}"
            )
        params[name] = tensors[name].astype(dtype)
    return SequentialModel(config, vocab, params)


def checkpoint_roundtrip(model: SequentialModel, path: str | os.PathLike) -> SequentialModel:
    save_checkpoint(model, path)
    return load_checkpoint(path, model.config, model.vocab, dtype=model.dtype)
