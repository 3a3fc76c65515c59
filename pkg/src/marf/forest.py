"""Multi-scale forest: depth partitioning, biased per-scale sampling, per-scale
adaptive-switch forests (ARFs), overlapping fusion, and model persistence.

Scale k's forest trains on a bootstrap biased toward clusters at or beyond the
scale's start distance and, at prediction time, votes on every cluster at
distance >= that start. A cluster's fused leg probability is the mean of the
vote fractions of all consulted forests, thresholded at beta.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .features import (
    N_FEATURES,
    ConfidenceReport,
    FeatureId,
    FeatureStats,
    FeatureTable,
    FeatureVector,
    table_confidence,
    feature_stats,
)

_DISTANCE_COLUMN = int(FeatureId.DISTANCE_TO_SCANNER)
from .tree import FlatForest, TrainParams, Tree, train_tree, tree_from_records, tree_to_records

FORMAT_VERSION = "1"

SCALE_CEILING = 6.0
"""Clusters beyond this depth (meters) always share the farthest scale."""


class NonterminatingSamplingError(RuntimeError):
    """alpha = 0 with no sample at or beyond the target scale can never finish."""


@dataclass(frozen=True)
class ScalePartition:
    """K half-open depth intervals; boundaries belong to the upper interval."""

    boundaries: tuple[float, ...]  # ascending, ends at SCALE_CEILING when K >= 2

    def __post_init__(self):
        b = self.boundaries
        if any(b[i] >= b[i + 1] for i in range(len(b) - 1)):
            raise ValueError("boundaries must be strictly ascending")
        if b and b[-1] != SCALE_CEILING:
            raise ValueError(f"last boundary must be {SCALE_CEILING}")

    @property
    def k_scales(self) -> int:
        return len(self.boundaries) + 1

    def start(self, k: int) -> float:
        """Lower edge of scale k (1-based)."""
        if not 1 <= k <= self.k_scales:
            raise ValueError(f"scale index {k} out of range")
        return 0.0 if k == 1 else self.boundaries[k - 2]


def make_partition(k_scales: int) -> ScalePartition:
    """The standard partition: [0, 6/2^(K-2)), ..., [3, 6), [6, +inf).

    Reproduces [0,6) / [6,inf) for K=2, [0,3) / [3,6) / [6,inf) for K=3 and
    [0,1.5) / [1.5,3) / [3,6) / [6,inf) for K=4; K=1 is a single interval.
    """
    if k_scales < 1:
        raise ValueError("K must be >= 1")
    boundaries = tuple(SCALE_CEILING / 2 ** (k_scales - 1 - i) for i in range(1, k_scales))
    return ScalePartition(boundaries=boundaries)


def scale_of(distance: float, partition: ScalePartition) -> int:
    """1-based index of the interval containing ``distance``."""
    if np.any(np.asarray(distance) < 0):
        raise ValueError("distance must be >= 0")
    return int(np.searchsorted(partition.boundaries, distance, side="right")) + 1


def _scales_of(distances: np.ndarray, partition: ScalePartition) -> np.ndarray:
    return np.searchsorted(partition.boundaries, distances, side="right") + 1


def biased_sample_indices(
    distances: np.ndarray,
    k: int,
    partition: ScalePartition,
    alpha: float,
    n_target: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Bootstrap indices biased toward scale >= k.

    Draws uniformly with replacement; a draw at scale >= k is always accepted,
    a nearer draw with probability alpha, until n_target acceptances.
    """
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must be in [0, 1]")
    if n_target < 1:
        raise ValueError("n_target must be >= 1")
    distances = np.asarray(distances, dtype=np.float64)
    scales = _scales_of(distances, partition)
    far = scales >= k
    if alpha == 0 and not far.any():
        raise NonterminatingSamplingError(
            f"alpha = 0 and no sample at scale >= {k}: sampling cannot terminate"
        )
    accepted: list[np.ndarray] = []
    count = 0
    batch = max(n_target, 256)
    while count < n_target:
        draws = rng.integers(0, distances.size, size=batch)
        u = rng.random(batch)
        keep = draws[far[draws] | (u < alpha)]
        accepted.append(keep)
        count += keep.size
    return np.concatenate(accepted)[:n_target]


def biased_sample(
    table: FeatureTable,
    k: int,
    partition: ScalePartition,
    alpha: float,
    n_target: int,
    seed,
) -> FeatureTable:
    """Biased bootstrap of a feature table (see ``biased_sample_indices``)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = biased_sample_indices(table.distances, k, partition, alpha, n_target, rng)
    return table.subset(idx)


@dataclass
class Arf:
    """One scale's adaptive-switch random forest."""

    scale: int
    trees: list[Tree]
    _flat: Optional[FlatForest] = field(default=None, repr=False, compare=False)

    @property
    def tree_count(self) -> int:
        return len(self.trees)

    def flat(self) -> FlatForest:
        if self._flat is None:
            self._flat = FlatForest.from_trees(self.trees)
        return self._flat

    def vote(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Mean binary tree vote per row of X, plus node visits per row."""
        return self.flat().votes(np.atleast_2d(X))


@dataclass
class MarfModel:
    partition: ScalePartition
    arfs: list[Arf]
    alpha: float
    beta: float
    params: TrainParams
    feature_stats: FeatureStats
    global_confidence: ConfidenceReport
    format_version: str = FORMAT_VERSION

    @property
    def k_scales(self) -> int:
        return self.partition.k_scales

    def decision_flags(self) -> dict:
        return {
            "confidence_center": self.params.confidence_center,
            "weight_rebalance": "node-sample-count",
        }


class MarfPrediction(NamedTuple):
    probability: float
    label: int
    arf_votes: dict  # scale index -> vote fraction of that forest
    node_visits: int


def train_marf(
    table: FeatureTable,
    k_scales: int = 3,
    trees_per_scale=100,
    params: TrainParams = TrainParams(),
    alpha: float = 0.6,
    beta: float = 0.5,
    seed: Optional[int] = None,
    *,
    n_jobs: int = 1,
    sample_log: Optional[dict] = None,
) -> MarfModel:
    """Train a K-scale model on a labeled feature table.

    Global confidence and feature statistics are computed once on the full
    table. Every tree gets an independent biased bootstrap of N = len(table)
    samples drawn with a seed derived from (seed, scale, tree index); a
    single-class bootstrap is redrawn up to 10 times. ``sample_log``, when a
    dict, records the sampled row indices per scale. ``n_jobs`` > 1 trains
    trees in parallel processes without changing the result.
    """
    if len(table) < 2 or len(np.unique(table.labels)) < 2:
        raise ValueError("training table must contain both classes")
    if isinstance(trees_per_scale, int):
        tree_counts = [trees_per_scale] * k_scales
    else:
        tree_counts = list(trees_per_scale)
    if len(tree_counts) != k_scales or any(t < 1 for t in tree_counts):
        raise ValueError("trees_per_scale must give a positive count per scale")
    master_seed = params.seed if seed is None else int(seed)

    partition = make_partition(k_scales)
    stats = feature_stats(table.values)
    global_conf = table_confidence(table, center=params.confidence_center)

    jobs = [(k, t) for k in range(1, k_scales + 1) for t in range(tree_counts[k - 1])]

    def sample_for(k: int, t: int) -> np.ndarray:
        for retry in range(10):
            rng = np.random.default_rng(np.random.SeedSequence([master_seed, k, t, retry]))
            idx = biased_sample_indices(table.distances, k, partition, alpha, len(table), rng)
            if len(np.unique(table.labels[idx])) == 2:
                return idx
        raise ValueError(f"bootstrap for scale {k} tree {t} stayed single-class after 10 redraws")

    def build_tree(k: int, t: int) -> Tree:
        idx = sample_for(k, t)
        rng = np.random.default_rng(np.random.SeedSequence([master_seed, k, t, 10_000]))
        return train_tree(table.values[idx], table.labels[idx], global_conf, stats, params, rng=rng)

    if n_jobs != 1:
        from joblib import Parallel, delayed

        trees = Parallel(n_jobs=n_jobs)(delayed(build_tree)(k, t) for k, t in jobs)
    else:
        trees = [build_tree(k, t) for k, t in jobs]

    if sample_log is not None:
        for k, t in jobs:
            sample_log.setdefault(k, []).append(sample_for(k, t))

    arfs = []
    cursor = 0
    for k in range(1, k_scales + 1):
        arfs.append(Arf(scale=k, trees=list(trees[cursor : cursor + tree_counts[k - 1]])))
        cursor += tree_counts[k - 1]
    return MarfModel(
        partition=partition,
        arfs=arfs,
        alpha=alpha,
        beta=beta,
        params=params,
        feature_stats=stats,
        global_confidence=global_conf,
    )


def predict_marf(model: MarfModel, x, *, detail: bool = False):
    """Fused leg probability and label for one feature vector.

    A cluster in scale k is voted on by forests 1..k; the probability is the
    mean of their vote fractions and the label is 1 iff it exceeds beta.
    """
    values = np.asarray(getattr(x, "values", x), dtype=np.float64).reshape(1, N_FEATURES)
    distance = float(values[0, _DISTANCE_COLUMN])
    k = scale_of(distance, model.partition)
    arf_votes = {}
    visits = 0
    for arf in model.arfs[:k]:
        vote, nv = arf.vote(values)
        arf_votes[arf.scale] = float(vote[0])
        visits += int(nv[0])
    probability = float(sum(arf_votes.values()) / k)
    label = 1 if probability > model.beta else 0
    if detail:
        return MarfPrediction(probability, label, arf_votes, visits)
    return probability, label


def predict_marf_batch(model: MarfModel, X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized fusion over rows of X: (probabilities, labels, node visits)."""
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    distances = X[:, _DISTANCE_COLUMN]
    scales = _scales_of(distances, model.partition)
    vote_sum = np.zeros(X.shape[0])
    visits = np.zeros(X.shape[0], np.int64)
    for arf in model.arfs:
        rows = np.flatnonzero(scales >= arf.scale)
        if rows.size == 0:
            continue
        votes, nv = arf.flat().votes(X[rows])
        vote_sum[rows] += votes
        visits[rows] += nv
    probabilities = vote_sum / scales
    labels = (probabilities > model.beta).astype(np.int8)
    return probabilities, labels, visits


# ---------------------------------------------------------------------------
# Persistence: a single JSON document, floats via shortest round-trip repr.

class ModelFormatError(ValueError):
    """Malformed model file; the message carries the offending field path."""


class VersionMismatchError(ModelFormatError):
    pass


def model_to_dict(model: MarfModel) -> dict:
    return {
        "format_version": model.format_version,
        "k_scales": model.k_scales,
        "boundaries": list(model.partition.boundaries),
        "alpha": model.alpha,
        "beta": model.beta,
        "epsilon": model.params.epsilon,
        "train_params": model.params.to_dict(),
        "decision_flags": model.decision_flags(),
        "feature_stats": {
            "mean": [float(v) for v in model.feature_stats.mean],
            "sigma_sq": [float(v) for v in model.feature_stats.sigma_sq],
        },
        "global_confidence": {
            "c": [float(v) for v in model.global_confidence.c],
            "positive_count": model.global_confidence.positive_count,
            "negative_count": model.global_confidence.negative_count,
            "center": model.global_confidence.center,
        },
        "arfs": [
            {"scale": arf.scale, "trees": [tree_to_records(t) for t in arf.trees]}
            for arf in model.arfs
        ],
    }


def save_model(model: MarfModel, path, *, provenance: Optional[dict] = None) -> None:
    doc = model_to_dict(model)
    if provenance is not None:
        doc["provenance"] = provenance
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def _get(data, key, path, kind=None):
    try:
        value = data[key]
    except (KeyError, IndexError, TypeError):
        raise ModelFormatError(f"missing field {path}.{key}") from None
    if kind is not None and not isinstance(value, kind):
        raise ModelFormatError(f"field {path}.{key} has wrong type")
    return value


def model_from_dict(data: dict) -> MarfModel:
    version = _get(data, "format_version", "$")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"model format version {version!r} != supported {FORMAT_VERSION!r}"
        )
    try:
        params = TrainParams.from_dict(_get(data, "train_params", "$", dict))
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"field $.train_params: {exc}") from exc
    partition = ScalePartition(boundaries=tuple(_get(data, "boundaries", "$", list)))
    k_scales = _get(data, "k_scales", "$", int)
    if partition.k_scales != k_scales:
        raise ModelFormatError("field $.k_scales inconsistent with $.boundaries")
    fs = _get(data, "feature_stats", "$", dict)
    stats = FeatureStats(
        mean=np.array(_get(fs, "mean", "$.feature_stats", list), dtype=np.float64),
        sigma_sq=np.array(_get(fs, "sigma_sq", "$.feature_stats", list), dtype=np.float64),
    )
    gc = _get(data, "global_confidence", "$", dict)
    conf = ConfidenceReport(
        c=np.array(_get(gc, "c", "$.global_confidence", list), dtype=np.float64),
        positive_count=_get(gc, "positive_count", "$.global_confidence", int),
        negative_count=_get(gc, "negative_count", "$.global_confidence", int),
        center=_get(gc, "center", "$.global_confidence", str),
    )
    arfs = []
    for ai, arf_data in enumerate(_get(data, "arfs", "$", list)):
        path = f"$.arfs[{ai}]"
        scale = _get(arf_data, "scale", path, int)
        trees = []
        for ti, records in enumerate(_get(arf_data, "trees", path, list)):
            try:
                trees.append(tree_from_records(records, params))
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise ModelFormatError(f"field {path}.trees[{ti}]: {exc}") from exc
        arfs.append(Arf(scale=scale, trees=trees))
    if len(arfs) != k_scales:
        raise ModelFormatError("field $.arfs: expected one forest per scale")
    return MarfModel(
        partition=partition,
        arfs=arfs,
        alpha=float(_get(data, "alpha", "$", (int, float))),
        beta=float(_get(data, "beta", "$", (int, float))),
        params=params,
        feature_stats=stats,
        global_confidence=conf,
        format_version=version,
    )


def load_model(path) -> MarfModel:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ModelFormatError(f"{path}: expected a JSON object at top level")
    return model_from_dict(data)
