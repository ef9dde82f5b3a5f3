"""Feature pools and N-way K-shot episode sampling.

A :class:`FeatureStore` holds one feature vector per record together with
its class id and an outlier flag; every class belongs to exactly one split.
Stores come from the synthetic Gaussian generator or from a text feature
file (one record per line).
"""
from __future__ import annotations

import enum
import os
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np


class Split(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class FeatureFileError(ValueError):
    """Malformed feature file; the message names the offending line."""


class SamplingError(ValueError):
    """The store cannot supply the requested episode."""


@dataclass(frozen=True)
class FeatureStore:
    dim: int
    class_ids: np.ndarray
    features: np.ndarray
    outlier: np.ndarray
    splits: Mapping[int, Split]
    _by_class: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        class_ids = np.asarray(self.class_ids, dtype=np.int64)
        outlier = np.asarray(self.outlier, dtype=bool)
        if features.ndim != 2 or features.shape[1] != self.dim:
            raise ValueError(f"features must be [n, {self.dim}], got {features.shape}")
        if not (class_ids.shape == outlier.shape == (features.shape[0],)):
            raise ValueError("class_ids, outlier flags and features disagree on record count")
        missing = set(np.unique(class_ids).tolist()) - set(self.splits)
        if missing:
            raise ValueError(f"classes without a split: {sorted(missing)}")
        for arr in (features, class_ids, outlier):
            arr.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "class_ids", class_ids)
        object.__setattr__(self, "outlier", outlier)
        object.__setattr__(self, "splits", {int(c): Split(s) for c, s in self.splits.items()})
        by_class = {}
        for c in np.unique(class_ids):
            by_class[int(c)] = np.flatnonzero(class_ids == c)
        object.__setattr__(self, "_by_class", by_class)

    def __len__(self) -> int:
        return self.features.shape[0]

    def classes(self, split=None) -> list[int]:
        if split is None:
            return sorted(self._by_class)
        split = Split(split)
        return sorted(c for c in self._by_class if self.splits[c] is split)

    def records_of(self, class_id: int) -> np.ndarray:
        return self._by_class[class_id]

    def has_outlier_flags(self) -> bool:
        return bool(self.outlier.any())


@dataclass(frozen=True)
class Provenance:
    """Diagnostics-only metadata; never fed to a model."""

    class_ids: np.ndarray
    support_records: np.ndarray
    query_records: np.ndarray
    support_outlier: np.ndarray
    query_outlier: np.ndarray


@dataclass(frozen=True)
class Episode:
    """One N-way K-shot task. Supports are class-major: K rows of class 0, then class 1, ..."""

    n_way: int
    k_shot: int
    q_queries: int
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    provenance: Provenance | None = field(default=None, repr=False, compare=False)


@dataclass
class SyntheticConfig:
    n_train_classes: int = 64
    n_val_classes: int = 16
    n_test_classes: int = 20
    records_per_class: int = 100
    dim: int = 16
    intra_std: float = 1.0
    inter_scale: float = 6.0
    outlier_rate: float = 0.15
    outlier_scale: float = 6.0
    overlap_pairs: int = 1
    overlap_dist: float = 2.0
    seed: int = 0

    def validate(self) -> None:
        if self.dim < 1:
            raise ValueError(f"dim must be positive, got {self.dim}")
        if min(self.n_train_classes, self.n_val_classes, self.n_test_classes) < 0:
            raise ValueError("class counts must be non-negative")
        if self.records_per_class < 1:
            raise ValueError("records_per_class must be positive")
        if self.intra_std <= 0 or self.inter_scale <= 0:
            raise ValueError("intra_std and inter_scale must be positive")
        if not 0.0 <= self.outlier_rate < 1.0:
            raise ValueError(f"outlier_rate must lie in [0, 1), got {self.outlier_rate}")
        if self.outlier_scale < 1.0:
            raise ValueError(f"outlier_scale must be >= 1, got {self.outlier_scale}")
        if self.overlap_pairs < 0 or self.overlap_dist < 0:
            raise ValueError("overlap_pairs and overlap_dist must be non-negative")


def generate_synthetic_pool(cfg: SyntheticConfig) -> FeatureStore:
    """Gaussian classes with flagged outliers and deliberately overlapping class pairs.

    Class means are uniform in a centred hypercube of side ``inter_scale``.
    Within each split, ``overlap_pairs`` disjoint class pairs have the second
    mean moved to ``overlap_dist`` from the first. Instances are
    ``mean + intra_std * z``; with probability ``outlier_rate`` the deviation is
    multiplied by ``outlier_scale`` and the record flagged.
    """
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 0])
    counts = {Split.TRAIN: cfg.n_train_classes, Split.VAL: cfg.n_val_classes,
              Split.TEST: cfg.n_test_classes}
    n_classes = sum(counts.values())
    means = rng.uniform(-0.5, 0.5, (n_classes, cfg.dim)) * cfg.inter_scale
    splits, start = {}, 0
    for split, n in counts.items():
        members = list(range(start, start + n))
        for c in members:
            splits[c] = split
        order = rng.permutation(members) if members else []
        for p in range(min(cfg.overlap_pairs, n // 2)):
            a, b = int(order[2 * p]), int(order[2 * p + 1])
            direction = rng.normal(size=cfg.dim)
            direction /= np.linalg.norm(direction)
            means[b] = means[a] + cfg.overlap_dist * direction
        start += n
    r = cfg.records_per_class
    class_ids = np.repeat(np.arange(n_classes), r)
    deviation = rng.normal(0.0, cfg.intra_std, (n_classes * r, cfg.dim))
    outlier = rng.random(n_classes * r) < cfg.outlier_rate
    deviation[outlier] *= cfg.outlier_scale
    features = means[class_ids] + deviation
    return FeatureStore(cfg.dim, class_ids, features, outlier, splits)


def split_meta(store: FeatureStore, assignment: Mapping) -> FeatureStore:
    """Reassign classes to splits. ``assignment`` maps split -> iterable of class ids."""
    splits = {}
    for split, classes in assignment.items():
        split = Split(split)
        for c in classes:
            c = int(c)
            if c in splits:
                raise ValueError(f"class {c} assigned to both {splits[c].value} and {split.value}")
            splits[c] = split
    missing = set(store.classes()) - set(splits)
    if missing:
        raise ValueError(f"assignment misses classes {sorted(missing)}")
    if not any(s is Split.TEST for s in splits.values()):
        warnings.warn("split assignment leaves the TEST split empty", stacklevel=2)
    return FeatureStore(store.dim, store.class_ids, store.features, store.outlier, splits)


def sample_episode(store: FeatureStore, n_way: int, k_shot: int, q_queries: int,
                   rng: np.random.Generator, split=Split.TRAIN) -> Episode:
    """Draw N classes of ``split`` and K+Q distinct records per class.

    Episode class index = position in the draw order, so global ids are
    reshuffled every episode.
    """
    if min(n_way, k_shot, q_queries) < 1:
        raise ValueError("n_way, k_shot and q_queries must be positive")
    pool = [c for c in store.classes(split) if store.records_of(c).size >= k_shot + q_queries]
    if len(pool) < n_way:
        raise SamplingError(f"{Split(split).value} split has {len(pool)} classes with >= "
                            f"{k_shot + q_queries} records, need {n_way}")
    chosen = rng.choice(pool, size=n_way, replace=False)
    sup, qry = [], []
    for c in chosen:
        picked = rng.choice(store.records_of(int(c)), size=k_shot + q_queries, replace=False)
        sup.append(picked[:k_shot])
        qry.append(picked[k_shot:])
    sup_idx, qry_idx = np.concatenate(sup), np.concatenate(qry)
    labels = np.arange(n_way)
    return Episode(
        n_way, k_shot, q_queries,
        support_x=store.features[sup_idx].copy(),
        support_y=np.repeat(labels, k_shot),
        query_x=store.features[qry_idx].copy(),
        query_y=np.repeat(labels, q_queries),
        provenance=Provenance(np.asarray(chosen), sup_idx, qry_idx,
                              store.outlier[sup_idx], store.outlier[qry_idx]),
    )


def episode_stream(store: FeatureStore, n_way: int, k_shot: int, q_queries: int, seed: int,
                   split=Split.TRAIN) -> Iterable[Episode]:
    rng = np.random.default_rng([seed, 2])
    while True:
        yield sample_episode(store, n_way, k_shot, q_queries, rng, split)


def task_episode(store: FeatureStore, n_way: int, k_shot: int, q_queries: int, seed: int,
                 task: int, split=Split.TEST) -> Episode:
    """Episode with its own generator derived from (seed, task index)."""
    rng = np.random.default_rng([seed, 3, task])
    return sample_episode(store, n_way, k_shot, q_queries, rng, split)


# ------------------------------------------------------------------ file I/O

def format_feature_file(store: FeatureStore) -> str:
    lines = [f"#dim={store.dim}"]
    flagged = np.flatnonzero(store.outlier)
    if flagged.size:
        lines.append("#outliers=" + ",".join(str(i) for i in flagged))
    for cid, row in zip(store.class_ids, store.features):
        values = ",".join(repr(float(v)) for v in row)
        lines.append(f"{store.splits[int(cid)].value},{int(cid)},{values}")
    return "\n".join(lines) + "\n"


def save_feature_file(store: FeatureStore, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_feature_file(store))


def parse_feature_file(text: str) -> FeatureStore:
    """Parse ``#dim=<d>`` then ``<split>,<class_id>,<v_0>,...`` lines.

    Other ``#`` lines are comments, except ``#outliers=<row indices>`` which
    restores outlier flags written by :func:`save_feature_file`.
    """
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#dim="):
        raise FeatureFileError("line 1: expected header '#dim=<d>'")
    try:
        dim = int(lines[0][5:])
    except ValueError:
        raise FeatureFileError(f"line 1: bad dimension {lines[0][5:]!r}") from None
    if dim < 1:
        raise FeatureFileError(f"line 1: dimension must be positive, got {dim}")
    class_ids, rows, splits, flagged = [], [], {}, []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#"):
            if line.startswith("#outliers="):
                body = line[len("#outliers="):].strip()
                try:
                    flagged.extend(int(t) for t in body.split(",") if t)
                except ValueError:
                    raise FeatureFileError(f"line {lineno}: bad outlier index list") from None
            continue
        parts = line.split(",")
        if len(parts) != dim + 2:
            raise FeatureFileError(f"line {lineno}: expected {dim + 2} fields "
                                   f"(split, class, {dim} values), got {len(parts)}")
        try:
            split = Split(parts[0].strip())
        except ValueError:
            raise FeatureFileError(f"line {lineno}: unknown split {parts[0]!r}") from None
        try:
            cid = int(parts[1])
            values = [float(v) for v in parts[2:]]
        except ValueError:
            raise FeatureFileError(f"line {lineno}: non-numeric class id or value") from None
        if splits.setdefault(cid, split) is not split:
            raise FeatureFileError(f"line {lineno}: class {cid} appears in two splits")
        class_ids.append(cid)
        rows.append(values)
    outlier = np.zeros(len(rows), dtype=bool)
    if flagged:
        flagged = np.asarray(flagged)
        if flagged.min() < 0 or flagged.max() >= len(rows):
            raise FeatureFileError("outlier index out of range")
        outlier[flagged] = True
    features = np.asarray(rows, dtype=np.float64).reshape(len(rows), dim)
    return FeatureStore(dim, np.asarray(class_ids, dtype=np.int64), features, outlier, splits)


def load_feature_file(path: str | os.PathLike) -> FeatureStore:
    with open(path, encoding="utf-8") as fh:
        return parse_feature_file(fh.read())
