"""Partitioning target rows into labelled bags."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset


class BaggingError(ValueError):
    pass


@dataclass(frozen=True)
class Bag:
    indices: np.ndarray
    label: float

    def __len__(self):
        return len(self.indices)


@dataclass
class BagCollection:
    bags: list[Bag]
    regime: str
    seed: int | None
    params: dict = field(default_factory=dict)
    dropped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    n_rows: int = 0

    def __len__(self):
        return len(self.bags)

    def __iter__(self):
        return iter(self.bags)

    def __getitem__(self, i):
        return self.bags[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([b.label for b in self.bags])

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(b) for b in self.bags], dtype=np.int64)

    def member_indices(self) -> np.ndarray:
        if not self.bags:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([b.indices for b in self.bags])

    def subset(self, which) -> "BagCollection":
        bags = [self.bags[i] for i in which]
        return BagCollection(bags, self.regime, self.seed, dict(self.params), self.dropped, self.n_rows)


def make_bags(dataset: Dataset, groups: Sequence[np.ndarray], regime, seed, params, n_rows=None) -> BagCollection:
    """Build bags from index groups; labels are member-label means."""
    n = len(dataset) if n_rows is None else n_rows
    bags = [Bag(np.asarray(g, dtype=np.int64), float(np.mean(dataset.labels[g]))) for g in groups]
    used = np.zeros(n, dtype=bool)
    for b in bags:
        if used[b.indices].any() or len(np.unique(b.indices)) != len(b.indices):
            raise BaggingError("bags must be disjoint with unique members")
        used[b.indices] = True
    return BagCollection(bags, regime, seed, params, np.flatnonzero(~used), n)


def _blocks(order: np.ndarray, k: int) -> list[np.ndarray]:
    m = len(order) // k
    return [order[j * k:(j + 1) * k] for j in range(m)]


def random_bags(dataset: Dataset, k: int, seed: int) -> BagCollection:
    """Seeded shuffle, then consecutive ``k``-blocks; the remainder is dropped."""
    n = len(dataset)
    if k < 1:
        raise BaggingError(f"bag size must be >= 1, got {k}")
    if k > n:
        raise BaggingError(f"bag size {k} exceeds dataset size {n}")
    order = np.random.default_rng(seed).permutation(n)
    return make_bags(dataset, _blocks(order, k), "random", seed, {"k": k})


def _resolve_feature(dataset: Dataset, feature) -> tuple[str, np.ndarray]:
    if feature in dataset.categorical_names:
        return "categorical", dataset.categorical[:, dataset.categorical_names.index(feature)]
    if feature in dataset.feature_names:
        return "numeric", dataset.features[:, dataset.feature_names.index(feature)]
    raise BaggingError(f"unknown feature {feature!r}")


def correlated_bags(dataset: Dataset, feature: str, k: int, seed: int) -> BagCollection:
    """Bags that are homogeneous in a categorical feature, or contiguous in a sorted numeric one."""
    if k < 1:
        raise BaggingError(f"bag size must be >= 1, got {k}")
    kind, values = _resolve_feature(dataset, feature)
    groups: list[np.ndarray] = []
    if kind == "categorical":
        rng = np.random.default_rng(seed)
        for v in np.unique(values):
            members = np.flatnonzero(values == v)
            groups += _blocks(rng.permutation(members), k)
    else:
        groups = _blocks(np.argsort(values, kind="stable"), k)
    return make_bags(dataset, groups, "correlated", seed, {"k": k, "feature": feature})


MIXED_SIZES = (8, 32, 128, 256)


def mixed_bag_counts(n: int, sizes: Sequence[int], mode: str) -> list[int]:
    """Number of bags per size class (each class floored independently)."""
    sizes = [int(s) for s in sizes]
    if mode == "SBB":
        per_class = n // len(sizes)
        return [per_class // s for s in sizes]
    if mode == "BBB":
        per_size = n // sum(sizes)
        return [per_size] * len(sizes)
    raise BaggingError(f"mode must be 'SBB' or 'BBB', got {mode!r}")


def mixed_bags(dataset: Dataset, sizes: Sequence[int] = MIXED_SIZES, mode: str = "SBB", seed: int = 0) -> BagCollection:
    """Mixed bag sizes, sample balanced (SBB) or bag balanced (BBB)."""
    sizes = [int(s) for s in sizes]
    if not sizes or min(sizes) < 1:
        raise BaggingError("sizes must be a nonempty list of positive ints")
    n = len(dataset)
    if n < max(sizes):
        raise BaggingError(f"dataset of {n} rows cannot hold one bag of size {max(sizes)}")
    counts = mixed_bag_counts(n, sizes, mode)
    order = np.random.default_rng(seed).permutation(n)
    groups, start = [], 0
    for size, count in zip(sizes, counts):
        for _ in range(count):
            groups.append(order[start:start + size])
            start += size
    return make_bags(dataset, groups, f"mixed-{mode}", seed, {"sizes": sizes, "counts": counts})


def two_stage_selection(m: int, k: int, rng: np.random.Generator, resamples: int | None = None) -> np.ndarray:
    """Random ``k``-subsets of each consecutive ``2k``-block of ``range(2mk)``.

    Returns an ``(m, k)`` index array, or ``(resamples, m, k)`` when
    ``resamples`` is given.
    """
    shape = (m, 2 * k) if resamples is None else (resamples, m, 2 * k)
    pick = np.argsort(rng.random(shape), axis=-1)[..., :k]
    return pick + (2 * k) * np.arange(m)[:, None]


def two_stage_bags(dataset: Dataset, k: int, seed: int) -> BagCollection:
    n = len(dataset)
    if k < 1 or n == 0 or n % (2 * k):
        raise BaggingError(f"dataset size {n} is not a positive multiple of 2k = {2 * k}")
    sel = two_stage_selection(n // (2 * k), k, np.random.default_rng(seed))
    return make_bags(dataset, [np.sort(r) for r in sel], "two-stage", seed, {"k": k})


# --------------------------------------------------------------------------
# persistence


def save_bags(collection: BagCollection, path) -> None:
    """CSV of ``bag_id,row_index`` preceded by a ``#`` JSON metadata line."""
    meta = {
        "regime": collection.regime,
        "seed": collection.seed,
        "params": collection.params,
        "n_rows": collection.n_rows,
        "dropped": collection.dropped.tolist(),
        "labels": [repr(b.label) for b in collection.bags],
    }
    lines = ["# " + json.dumps(meta, sort_keys=True), "bag_id,row_index"]
    for j, b in enumerate(collection.bags):
        lines += [f"{j},{i}" for i in b.indices]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_bags(path) -> BagCollection:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith("# "):
        raise BaggingError(f"{path}: missing metadata header")
    meta = json.loads(text[0][2:])
    if text[1].strip() != "bag_id,row_index":
        raise BaggingError(f"{path}: expected 'bag_id,row_index' header")
    members: dict[int, list[int]] = {}
    for line in text[2:]:
        if line.strip():
            j, i = line.split(",")
            members.setdefault(int(j), []).append(int(i))
    labels = [float(v) for v in meta["labels"]]
    bags = [Bag(np.array(members.get(j, []), dtype=np.int64), labels[j]) for j in range(len(labels))]
    return BagCollection(bags, meta["regime"], meta["seed"], meta["params"],
                         np.array(meta["dropped"], dtype=np.int64), meta["n_rows"])
