"""Synthetic data, CSV ingestion, label-skew partitioners and train/test splitting."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


class PartitionInfeasible(RuntimeError):
    pass


class SplitError(ValueError):
    pass


class DatasetParseError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray  # [n, D]
    labels: np.ndarray  # [n]
    U: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(f"features {self.features.shape} do not match labels {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.U):
            raise ValueError(f"labels must lie in [0, {self.U})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def D(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.U)


@dataclass
class ClientShard:
    client_id: int
    train: Dataset
    test: Dataset
    train_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def indices(self) -> np.ndarray:
        return np.concatenate([self.train_idx, self.test_idx])


# ---------------------------------------------------------------------------
# generation and IO
# ---------------------------------------------------------------------------

def gen_synthetic(U: int, D: int, n: int, spread: float = 0.5, seed: int = 0,
                  separation: float = 3.0, unit_range: bool = False) -> Dataset:
    """Gaussian class clusters with balanced labels (class sizes differ by at most one).

    Class means are ``separation * N(0, I)``; samples are ``N(mean, spread^2 I)``.
    With ``unit_range`` every feature is min-max scaled to [0, 1] afterwards.
    """
    if U < 2 or D < 2:
        raise ConfigError("synthetic data needs U >= 2 and D >= 2")
    if n < 1:
        raise ConfigError("synthetic data needs n >= 1")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((U, D)) * separation
    labels = np.arange(n) % U
    rng.shuffle(labels)
    x = means[labels] + spread * rng.standard_normal((n, D))
    if unit_range:
        lo, hi = x.min(axis=0), x.max(axis=0)
        x = (x - lo) / np.where(hi > lo, hi - lo, 1.0)
    return Dataset(x, labels, U)


def save_csv_dataset(ds: Dataset, path, header: bool = True) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow([f"x{j}" for j in range(ds.D)] + ["label"])
        for row, lab in zip(ds.features, ds.labels):
            w.writerow([f"{v:.17g}" for v in row] + [int(lab)])


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_csv_dataset(path, U: int | None = None) -> Dataset:
    """Rows of ``D`` floats followed by an integer label; a single header line is optional."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [(i + 1, r) for i, r in enumerate(csv.reader(fh)) if any(c.strip() for c in r)]
    if rows and not all(_is_number(c) for c in rows[0][1]):
        rows = rows[1:]
    if not rows:
        raise DatasetParseError(f"{path}: no data rows")
    width = len(rows[0][1])
    if width < 2:
        raise DatasetParseError(f"{path}:{rows[0][0]}: need at least one feature and a label")
    feats, labels = [], []
    for lineno, r in rows:
        if len(r) != width:
            raise DatasetParseError(f"{path}:{lineno}: expected {width} columns, found {len(r)}")
        try:
            vals = [float(c) for c in r[:-1]]
            lab_f = float(r[-1])
        except ValueError:
            raise DatasetParseError(f"{path}:{lineno}: non-numeric cell") from None
        if lab_f != int(lab_f) or lab_f < 0:
            raise DatasetParseError(f"{path}:{lineno}: label must be a non-negative integer, got {r[-1]!r}")
        feats.append(vals)
        labels.append(int(lab_f))
    labels = np.asarray(labels, dtype=np.int64)
    inferred = int(labels.max()) + 1
    if U is not None and U < inferred:
        raise DatasetParseError(f"{path}: label {inferred - 1} exceeds U={U}")
    return Dataset(np.asarray(feats), labels, inferred if U is None else U)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def largest_remainder(total: int, weights) -> np.ndarray:
    """Integer counts proportional to ``weights`` summing exactly to ``total``."""
    w = np.asarray(weights, dtype=np.float64)
    ideal = w / w.sum() * total
    counts = np.floor(ideal).astype(np.int64)
    short = total - int(counts.sum())
    if short:
        # ties go to the lower index
        order = np.lexsort((np.arange(w.size), -(ideal - counts)))
        counts[order[:short]] += 1
    return counts


def split_indices(labels, train_fraction: float = 0.75, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Stratified random split of positions ``0..n-1``; train gets ``floor(fraction * n)``."""
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    if n < 2:
        raise SplitError(f"cannot split a shard of {n} sample(s)")
    rng = np.random.default_rng(seed)
    n_train = int(np.floor(train_fraction * n))
    classes, counts = np.unique(labels, return_counts=True)
    per_class = largest_remainder(n_train, counts.astype(np.float64))
    train, test = [], []
    for c, k in zip(classes, per_class):
        pos = np.flatnonzero(labels == c)
        rng.shuffle(pos)
        train.append(pos[:k])
        test.append(pos[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def split_shard(ds: Dataset, idx, client_id: int, train_fraction: float = 0.75, seed: int = 0) -> ClientShard:
    idx = np.asarray(idx, dtype=np.int64)
    tr, te = split_indices(ds.labels[idx], train_fraction, seed)
    return ClientShard(client_id, ds.subset(idx[tr]), ds.subset(idx[te]), idx[tr], idx[te])


def _client_seeds(seed: int, n: int) -> list[int]:
    ss = np.random.SeedSequence([seed, 0x5B11])
    return [int(s.generate_state(1)[0]) for s in ss.spawn(n)]


def _build_shards(ds, parts, seed, train_fraction) -> list[ClientShard]:
    seeds = _client_seeds(seed, len(parts))
    return [split_shard(ds, np.sort(p), i, train_fraction, seeds[i]) for i, p in enumerate(parts)]


# ---------------------------------------------------------------------------
# partitioners
# ---------------------------------------------------------------------------

def partition_pathological(ds: Dataset, N: int, S: int, seed: int = 0,
                           train_fraction: float = 0.75) -> list[ClientShard]:
    """Every client holds exactly ``S`` classes; class samples are split in unequal Dir(1) chunks."""
    U = ds.U
    if N < 1 or S < 1 or S > U or S * N < U:
        raise ConfigError(f"pathological partition infeasible for U={U}, N={N}, S={S} (need S <= U <= S*N)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(U)
    assigned = [[int(perm[(i * S + j) % U]) for j in range(S)] for i in range(N)]
    holders: dict[int, list[int]] = {c: [] for c in range(U)}
    for i, cls in enumerate(assigned):
        for c in cls:
            holders[c].append(i)
    parts: list[list[np.ndarray]] = [[] for _ in range(N)]
    # every assignee really holds the class, and every shard can be split into train and test
    floor = -(-2 // S)
    for c in range(U):
        pos = np.flatnonzero(ds.labels == c)
        who = holders[c]
        if pos.size < floor * len(who):
            raise ConfigError(f"class {c} has {pos.size} samples for {len(who)} clients")
        rng.shuffle(pos)
        # a guaranteed floor each, the rest in Dir(1) shares
        extra = largest_remainder(pos.size - floor * len(who), rng.dirichlet(np.ones(len(who))))
        bounds = np.concatenate([[0], np.cumsum(extra + floor)])
        for k, i in enumerate(who):
            parts[i].append(pos[bounds[k]:bounds[k + 1]])
    merged = [np.concatenate(p) for p in parts]
    return _build_shards(ds, merged, seed, train_fraction)


def partition_dirichlet(ds: Dataset, N: int, beta: float, min_samples: int = 4, seed: int = 0,
                        train_fraction: float = 0.75, max_retries: int = 1000) -> list[ClientShard]:
    """Class ``c`` is spread over clients by proportions ``q_c ~ Dir(beta * 1_N)``."""
    if beta <= 0:
        raise ConfigError("dirichlet beta must be positive")
    if N < 1:
        raise ConfigError("need at least one client")
    rng = np.random.default_rng(seed)
    by_class = [np.flatnonzero(ds.labels == c) for c in range(ds.U)]
    for _ in range(max_retries):
        parts: list[list[np.ndarray]] = [[] for _ in range(N)]
        ok = True
        for pos in by_class:
            if pos.size == 0:
                continue
            q = rng.dirichlet(np.full(N, float(beta)))
            if not np.all(np.isfinite(q)) or q.sum() <= 0:
                ok = False
                break
            pos = rng.permutation(pos)
            bounds = np.concatenate([[0], np.cumsum(largest_remainder(pos.size, q))])
            for i in range(N):
                parts[i].append(pos[bounds[i]:bounds[i + 1]])
        if not ok:
            continue
        merged = [np.concatenate(p) for p in parts]
        if min(m.size for m in merged) >= max(min_samples, 2):
            return _build_shards(ds, merged, seed, train_fraction)
    raise PartitionInfeasible(
        f"no Dirichlet draw gave every client >= {min_samples} samples after {max_retries} tries; "
        "increase beta or the dataset size, or lower min_samples")


def partition_iid(ds: Dataset, N: int, seed: int = 0, train_fraction: float = 0.75) -> list[ClientShard]:
    if N < 1 or len(ds) < 2 * N:
        raise ConfigError(f"iid partition needs at least 2 samples per client (n={len(ds)}, N={N})")
    rng = np.random.default_rng(seed)
    return _build_shards(ds, np.array_split(rng.permutation(len(ds)), N), seed, train_fraction)


def client_weights(shards) -> np.ndarray:
    """Aggregation weights from training-split sizes."""
    sizes = np.array([len(s.train) for s in shards], dtype=np.float64)
    return sizes / sizes.sum()


def shard_hash(shards) -> str:
    h = hashlib.sha256()
    for s in shards:
        h.update(np.int64(s.client_id).tobytes())
        h.update(np.ascontiguousarray(s.train_idx, dtype=np.int64).tobytes())
        h.update(b"|")
        h.update(np.ascontiguousarray(s.test_idx, dtype=np.int64).tobytes())
    return h.hexdigest()
