"""Interaction logs, leave-one-out splits, popularity and synthetic domains."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

#: Most recent items kept as model input.
N_MAX = 50
#: Shortest sequence that yields valid and test rows.
MIN_SPLIT_LEN = 3


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class InteractionDataset:
    """Users and items re-indexed densely; one chronological sequence per user."""

    sequences: tuple[tuple[int, ...], ...]
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    domain_tag: str = ""

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    def item_index(self) -> dict[str, int]:
        return {raw: i for i, raw in enumerate(self.item_ids)}


@dataclass(frozen=True)
class SplitDataset:
    """Leave-one-out split.

    ``train[u]`` is the training prefix of user ``u`` (possibly the whole
    sequence for short users).  ``valid`` and ``test`` hold
    ``(user, input prefix, target)`` rows for eligible users only.
    """

    train: tuple[tuple[int, ...], ...]
    valid: tuple[tuple[int, tuple[int, ...], int], ...]
    test: tuple[tuple[int, tuple[int, ...], int], ...]
    num_items: int

    @property
    def num_users(self) -> int:
        return len(self.train)


@dataclass(frozen=True)
class PopularityTable:
    counts: np.ndarray
    pop: np.ndarray

    def __call__(self, item: int) -> float:
        if 0 <= item < len(self.pop):
            return float(self.pop[item])
        return 0.0


def load_interactions(path: str | os.PathLike, domain_tag: str | None = None) -> InteractionDataset:
    """Parse a ``user<TAB>item<TAB>timestamp`` file.

    Ids are assigned in order of first appearance.  Sequences are sorted by
    timestamp with ties kept in file order.
    """
    path = Path(path)
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    events: list[list[tuple[int, int, int]]] = []
    n_rows = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise DataFormatError(
                    f"{path}: line {lineno}: expected 3 tab-separated fields, got {len(fields)}"
                )
            raw_user, raw_item, raw_ts = fields
            if not raw_user or not raw_item:
                raise DataFormatError(f"{path}: line {lineno}: empty user or item id")
            try:
                ts = int(raw_ts, 10)
            except ValueError:
                raise DataFormatError(
                    f"{path}: line {lineno}: timestamp {raw_ts!r} is not a base-10 integer"
                ) from None
            u = users.setdefault(raw_user, len(users))
            i = items.setdefault(raw_item, len(items))
            if u == len(events):
                events.append([])
            events[u].append((ts, n_rows, i))
            n_rows += 1
    if n_rows == 0:
        raise DataFormatError(f"{path}: no interactions")
    sequences = tuple(tuple(i for _, _, i in sorted(ev)) for ev in events)
    return InteractionDataset(
        sequences=sequences,
        user_ids=tuple(users),
        item_ids=tuple(items),
        domain_tag=path.stem if domain_tag is None else domain_tag,
    )


def write_interactions(ds: InteractionDataset, path: str | os.PathLike) -> None:
    """Write ``ds`` with timestamps equal to the position in each sequence."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, seq in enumerate(ds.sequences):
            raw_user = ds.user_ids[u]
            for t, item in enumerate(seq):
                fh.write(f"{raw_user}\t{ds.item_ids[item]}\t{t}\n")


def leave_one_out_split(ds: InteractionDataset) -> SplitDataset:
    train, valid, test = [], [], []
    for u, seq in enumerate(ds.sequences):
        if len(seq) >= MIN_SPLIT_LEN:
            test.append((u, tuple(seq[:-1]), seq[-1]))
            valid.append((u, tuple(seq[:-2]), seq[-2]))
            train.append(tuple(seq[:-2]))
        else:
            train.append(tuple(seq))
    return SplitDataset(tuple(train), tuple(valid), tuple(test), ds.num_items)


def popularity_table(train: SplitDataset | tuple, num_items: int | None = None) -> PopularityTable:
    """Per-item counts over the training sequences, normalized by the max count."""
    if isinstance(train, SplitDataset):
        num_items = train.num_items if num_items is None else num_items
        seqs = train.train
    else:
        seqs = train
    flat = np.fromiter((i for s in seqs for i in s), dtype=np.int64)
    if flat.size == 0:
        raise ValueError("popularity needs at least one training interaction")
    if num_items is None:
        num_items = int(flat.max()) + 1
    counts = np.bincount(flat, minlength=num_items).astype(np.int64)
    pop = counts / counts.max()
    return PopularityTable(counts=counts, pop=pop)


def truncate(seq, n_max: int = N_MAX) -> tuple[int, ...]:
    return tuple(seq[-n_max:]) if n_max > 0 else ()


# ---------------------------------------------------------------------------
# synthetic multi-domain data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Shared-latent-factor generator settings.

    Each domain samples ``items_per_domain`` items from a global pool of
    ``pool_items`` latent item vectors, so domains overlap in items and the
    latent factors carry over.  Sequences are generated by a Gumbel-max choice
    over ``preference + transition + bias`` scores; ``noise`` is the Gumbel
    scale, ``domain_shift`` the per-domain perturbation of item factors.
    """

    num_domains: int = 4
    users_per_domain: int = 2000
    items_per_domain: int = 500
    pool_items: int = 700
    latent_dim: int = 8
    avg_len: float = 8.0
    noise: float = 1.0
    domain_shift: float = 0.3
    transition: float = 1.0
    pop_scale: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_domains < 2:
            raise ValueError(f"num_domains must be >= 2, got {self.num_domains}")
        for name in ("users_per_domain", "items_per_domain", "pool_items", "latent_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.pool_items < self.items_per_domain:
            raise ValueError("pool_items must be >= items_per_domain")
        if self.avg_len < MIN_SPLIT_LEN:
            raise ValueError(f"avg_len must be >= {MIN_SPLIT_LEN}")
        if self.avg_len > self.items_per_domain:
            raise ValueError("avg_len cannot exceed items_per_domain")
        if self.noise < 0 or self.domain_shift < 0:
            raise ValueError("noise and domain_shift must be non-negative")


@dataclass
class SyntheticDomain:
    """One generated domain plus the latent quantities that produced it."""

    dataset: InteractionDataset
    items: np.ndarray            # global pool ids, local item order
    user_factors: np.ndarray     # (users, latent_dim)
    item_factors: np.ndarray     # (items, latent_dim), domain-shifted
    item_bias: np.ndarray        # (items,)
    lengths: np.ndarray = field(repr=False, default=None)

    def preference_scores(self) -> np.ndarray:
        """Static user-item preference (no transition term), users x items."""
        return self.user_factors @ self.item_factors.T + self.item_bias


def _generate_domain(spec: SyntheticSpec, k: int, pool: np.ndarray, pool_bias: np.ndarray,
                     rng: np.random.Generator) -> SyntheticDomain:
    r = spec.latent_dim
    items = np.sort(rng.choice(spec.pool_items, size=spec.items_per_domain, replace=False))
    shift = spec.domain_shift * rng.standard_normal((spec.items_per_domain, r))
    item_f = (pool[items] + shift) / np.sqrt(r)
    bias = pool_bias[items]
    users = rng.standard_normal((spec.users_per_domain, r))
    lengths = MIN_SPLIT_LEN + rng.poisson(spec.avg_len - MIN_SPLIT_LEN, size=spec.users_per_domain)
    lengths = np.minimum(lengths, spec.items_per_domain)
    static = users @ item_f.T + bias
    trans = spec.transition * (item_f @ item_f.T)
    seqs = []
    for u in range(spec.users_per_domain):
        seen = np.zeros(spec.items_per_domain, dtype=bool)
        seq = []
        prev = None
        for _ in range(lengths[u]):
            score = static[u].copy()
            if prev is not None:
                score += trans[prev]
            if spec.noise > 0:
                score += spec.noise * rng.gumbel(size=score.shape)
            score[seen] = -np.inf
            nxt = int(np.argmax(score))
            seen[nxt] = True
            seq.append(nxt)
            prev = nxt
        seqs.append(tuple(seq))
    ds = InteractionDataset(
        sequences=tuple(seqs),
        user_ids=tuple(f"d{k}u{u}" for u in range(spec.users_per_domain)),
        item_ids=tuple(f"i{g}" for g in items),
        domain_tag=f"domain_{k}",
    )
    return SyntheticDomain(ds, items, users, item_f, bias, lengths)


def synthesize(spec: SyntheticSpec) -> list[SyntheticDomain]:
    """Generate every domain in memory; deterministic given ``spec.seed``."""
    spec.validate()
    root = np.random.default_rng(spec.seed)
    pool = root.standard_normal((spec.pool_items, spec.latent_dim))
    pool_bias = spec.pop_scale * root.standard_normal(spec.pool_items)
    children = np.random.SeedSequence(spec.seed).spawn(spec.num_domains)
    return [
        _generate_domain(spec, k, pool, pool_bias, np.random.default_rng(children[k]))
        for k in range(spec.num_domains)
    ]


def generate_synthetic(spec: SyntheticSpec, out_dir: str | os.PathLike) -> list[Path]:
    """Write one interaction file per domain (``domain_<k>.tsv``) and return the paths.

    Item ids are shared across domains (``i<pool id>``), user ids are not.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, dom in enumerate(synthesize(spec)):
        p = out / f"domain_{k}.tsv"
        write_interactions(dom.dataset, p)
        paths.append(p)
    return paths


def remap_items(ds: InteractionDataset, vocab: InteractionDataset, min_len: int = 2) -> list[tuple[int, ...]]:
    """Express ``ds`` sequences in ``vocab``'s item ids.

    Items unknown to ``vocab`` are dropped; sequences left shorter than
    ``min_len`` are discarded.
    """
    index = vocab.item_index()
    out = []
    for seq in ds.sequences:
        mapped = tuple(index[ds.item_ids[i]] for i in seq if ds.item_ids[i] in index)
        if len(mapped) >= min_len:
            out.append(mapped)
    return out
