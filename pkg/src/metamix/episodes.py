"""Synthetic class-structured data and N-way K-shot episode sampling."""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "val", "test")
SPLIT_PROPORTIONS = (64, 16, 20)

_MAGIC = b"MMIXDS01"
_SPLIT_CODE = {"train": 0, "val": 1, "test": 2}


class EpisodeError(ValueError):
    pass


class InsufficientClassesError(EpisodeError):
    pass


class InsufficientExamplesError(EpisodeError):
    pass


@dataclass(frozen=True, eq=False)
class ClassDataset:
    """Per-class feature blocks; class ``c`` owns ``features[c]`` of shape ``[count, dim]``."""

    dim: int
    features: tuple[np.ndarray, ...]
    split: dict[str, tuple[int, ...]]

    def __post_init__(self):
        ids = [c for s in SPLITS for c in self.split.get(s, ())]
        if len(ids) != len(set(ids)):
            raise ValueError("train/val/test class sets must be pairwise disjoint")
        if sorted(ids) != list(range(len(self.features))):
            raise ValueError("split must cover every class id exactly once")
        for block in self.features:
            if block.ndim != 2 or block.shape[1] != self.dim:
                raise ValueError(f"class block has shape {block.shape}, expected [count, {self.dim}]")
            block.flags.writeable = False

    @property
    def num_classes(self) -> int:
        return len(self.features)

    def counts(self) -> list[int]:
        return [len(f) for f in self.features]

    def split_sizes(self) -> tuple[int, int, int]:
        return tuple(len(self.split[s]) for s in SPLITS)

    def __eq__(self, other):
        if not isinstance(other, ClassDataset):
            return NotImplemented
        return (
            self.dim == other.dim
            and {k: tuple(v) for k, v in self.split.items()} == {k: tuple(v) for k, v in other.split.items()}
            and len(self.features) == len(other.features)
            and all(np.array_equal(a, b) for a, b in zip(self.features, other.features))
        )

    __hash__ = None


def split_sizes(num_classes: int) -> tuple[int, int, int]:
    """64/16/20 proportional split; val and test are floored, train takes the remainder."""
    total = sum(SPLIT_PROPORTIONS)
    val = num_classes * SPLIT_PROPORTIONS[1] // total
    test = num_classes * SPLIT_PROPORTIONS[2] // total
    return num_classes - val - test, val, test


def generate_synthetic(
    num_classes: int,
    per_class: int,
    dim: int,
    spread: float,
    seed: int,
    min_per_class: int | None = None,
) -> ClassDataset:
    """Gaussian blobs: class means uniform on ``[-1, 1]^dim``, isotropic noise of scale ``spread``.

    ``min_per_class`` lets a caller that already knows ``K + H`` fail early.
    """
    if min_per_class is not None and per_class < min_per_class:
        raise EpisodeError(f"per_class={per_class} is below the required {min_per_class} examples (K+H)")
    if num_classes < 3 or per_class < 1 or dim < 1:
        raise ValueError("need num_classes >= 3, per_class >= 1, dim >= 1")
    if spread < 0:
        raise ValueError(f"spread must be non-negative, got {spread}")
    rng = np.random.default_rng(seed)
    means = rng.uniform(-1.0, 1.0, size=(num_classes, dim))
    features = tuple(means[c] + spread * rng.standard_normal((per_class, dim)) for c in range(num_classes))
    n_train, n_val, _ = split_sizes(num_classes)
    ids = list(range(num_classes))
    split = {
        "train": tuple(ids[:n_train]),
        "val": tuple(ids[n_train : n_train + n_val]),
        "test": tuple(ids[n_train + n_val :]),
    }
    return ClassDataset(dim, features, split)


def _kept_count(fraction: float, count: int) -> int:
    # round() guards against 0.3 * 40 == 12.000000000000002
    return max(1, math.ceil(round(fraction * count, 9)))


def apply_fraction(dataset: ClassDataset, fraction: float, seed: int) -> ClassDataset:
    """Keep ``ceil(fraction * count)`` examples of every training class; val/test untouched."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1:
        return dataset
    rng = np.random.default_rng(seed)
    train = set(dataset.split["train"])
    features = []
    for c, block in enumerate(dataset.features):
        if c in train:
            keep = np.sort(rng.permutation(len(block))[: _kept_count(fraction, len(block))])
            block = block[keep]
        features.append(block)
    return ClassDataset(dataset.dim, tuple(features), dataset.split)


@dataclass(frozen=True)
class Episode:
    """One N-way task.  Labels are one-hot rows (soft rows after mixing).

    ``support_ids``/``query_ids`` are ``(class_id, row)`` pairs into the source
    dataset, kept for provenance checks.
    """

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    way_classes: tuple[int, ...]
    support_ids: np.ndarray = field(repr=False)
    query_ids: np.ndarray = field(repr=False)

    @property
    def n_way(self) -> int:
        return len(self.way_classes)

    @property
    def query_labels(self) -> np.ndarray:
        return self.query_y.argmax(axis=1)


@dataclass(frozen=True, eq=False)
class TaskDistribution:
    dataset: ClassDataset
    split: str = "train"
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 16
    fraction: float = 1.0
    fraction_seed: int = 0
    label_dim: int | None = None  # one-hot width; defaults to n_way

    def __post_init__(self):
        if self.label_dim is None:
            object.__setattr__(self, "label_dim", self.n_way)
        if self.label_dim < self.n_way:
            raise ValueError(f"label_dim {self.label_dim} is smaller than n_way {self.n_way}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if min(self.n_way, self.k_shot, self.n_query) < 1:
            raise ValueError("n_way, k_shot and n_query must be positive")
        if not 0 < self.fraction <= 1:
            raise ValueError(f"fraction must lie in (0, 1], got {self.fraction}")

    @functools.cached_property
    def pool(self) -> ClassDataset:
        return apply_fraction(self.dataset, self.fraction, self.fraction_seed)

    @property
    def class_ids(self) -> tuple[int, ...]:
        return self.dataset.split[self.split]


def sample_episode(dist: TaskDistribution, rng: np.random.Generator) -> Episode:
    """Draw N classes, then K+H rows per class without replacement (first K to support)."""
    ids = dist.class_ids
    n, k, h = dist.n_way, dist.k_shot, dist.n_query
    if len(ids) < n:
        raise InsufficientClassesError(f"split {dist.split!r} has {len(ids)} classes, need N={n}")
    pool = dist.pool
    ways = tuple(int(c) for c in rng.choice(ids, size=n, replace=False))
    d = pool.dim
    sx, qx = np.empty((n * k, d)), np.empty((n * h, d))
    sy, qy = np.zeros((n * k, dist.label_dim)), np.zeros((n * h, dist.label_dim))
    sid, qid = np.empty((n * k, 2), dtype=np.int64), np.empty((n * h, 2), dtype=np.int64)
    for label, c in enumerate(ways):
        block = pool.features[c]
        if len(block) < k + h:
            raise InsufficientExamplesError(f"class {c} has {len(block)} examples, need K+H={k + h}")
        rows = rng.choice(len(block), size=k + h, replace=False)
        s, q = slice(label * k, (label + 1) * k), slice(label * h, (label + 1) * h)
        sx[s], qx[q] = block[rows[:k]], block[rows[k:]]
        sy[s, label] = qy[q, label] = 1.0
        sid[s, 0] = qid[q, 0] = c
        sid[s, 1], qid[q, 1] = rows[:k], rows[k:]
    for arr in (sx, sy, qx, qy, sid, qid):
        arr.flags.writeable = False
    return Episode(sx, sy, qx, qy, ways, sid, qid)


# -- on-disk format -----------------------------------------------------------
#
# magic "MMIXDS01" | uint32 dim | uint32 num_classes
# per class: uint32 class_id | uint32 split code (0 train, 1 val, 2 test) | uint32 count
# per class, in class-id order: count*dim float64, row-major
# All integers and floats little-endian.


def save_dataset(dataset: ClassDataset, path: str | Path) -> None:
    split_of = {c: s for s in SPLITS for c in dataset.split[s]}
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", dataset.dim, dataset.num_classes))
        for c, block in enumerate(dataset.features):
            fh.write(struct.pack("<III", c, _SPLIT_CODE[split_of[c]], len(block)))
        for block in dataset.features:
            fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def load_dataset(path: str | Path) -> ClassDataset:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a dataset file (bad magic)")
    dim, num_classes = struct.unpack_from("<II", raw, 8)
    offset = 16
    split: dict[str, list[int]] = {s: [] for s in SPLITS}
    counts = []
    for _ in range(num_classes):
        c, code, count = struct.unpack_from("<III", raw, offset)
        offset += 12
        split[SPLITS[code]].append(c)
        counts.append(count)
    features = []
    for count in counts:
        n = count * dim
        block = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(count, dim)
        offset += 8 * n
        features.append(block)
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return ClassDataset(dim, tuple(features), {s: tuple(v) for s, v in split.items()})
