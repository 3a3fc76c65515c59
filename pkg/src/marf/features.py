"""17-dimensional cluster descriptors plus the confidence statistics behind the
adaptive switch.

Feature definitions are frozen here (the learner only needs them fixed):

* width: distance between the first and last point.
* circularity: mean squared radial residual of a Kasa least-squares circle fit.
* linearity: mean squared residual of a total-least-squares line fit.
* boundary_length: sum of consecutive point distances.
* num_points: cluster size.
* best_fit_radius: radius of the Kasa circle (half the width below 3 points).
* mean_angular_difference: mean signed turning angle over consecutive triples.
* std_distance_to_gravity: population std of point-to-centroid distances.
* avg_distance_to_median: mean distance to the geometric median (Weiszfeld,
  100 iterations or 1e-9 movement).
* mean_curvature: mean Menger curvature over consecutive triples.
* boundary_regularity: population std of consecutive point distances.
* distance_to_scanner: Euclidean norm of the centroid.
* std_inscribed_angle / avg_inscribed_angle: population std / mean of the angle
  subtended at each interior point by the cluster endpoints.
* distance_to_scanner_per_point: mean beam range divided by the point count.
* left_occlusion / right_occlusion: 1 when the nearest retained beam before /
  after the cluster is strictly closer than the adjacent cluster endpoint.

Fit-based and triple-based features fall back to 0 for clusters of fewer than
3 points so every value stays finite.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional, Sequence

import numpy as np

from ._kernels import geometric_median
from .scan import LaserScan, PointCluster

N_FEATURES = 17


class FeatureId(IntEnum):
    WIDTH = 0
    CIRCULARITY = 1
    LINEARITY = 2
    BOUNDARY_LENGTH = 3
    NUM_POINTS = 4
    BEST_FIT_RADIUS = 5
    MEAN_ANGULAR_DIFFERENCE = 6
    STD_DISTANCE_TO_GRAVITY = 7
    AVG_DISTANCE_TO_MEDIAN = 8
    MEAN_CURVATURE = 9
    BOUNDARY_REGULARITY = 10
    DISTANCE_TO_SCANNER = 11
    STD_INSCRIBED_ANGLE = 12
    AVG_INSCRIBED_ANGLE = 13
    DISTANCE_TO_SCANNER_PER_POINT = 14
    LEFT_OCCLUSION = 15
    RIGHT_OCCLUSION = 16


FEATURE_NAMES = tuple(f.name.lower() for f in FeatureId)

INTEGER_FEATURES = (FeatureId.NUM_POINTS, FeatureId.LEFT_OCCLUSION, FeatureId.RIGHT_OCCLUSION)
"""Features that take integer values and are untouched by small range noise."""

CONTINUOUS_FEATURES = tuple(f for f in FeatureId if f not in INTEGER_FEATURES)


@dataclass
class FeatureVector:
    """One cluster's descriptor: 17 finite values plus an optional 0/1 label."""

    values: np.ndarray  # (17,)
    label: Optional[int] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (N_FEATURES,):
            raise ValueError(f"expected {N_FEATURES} feature values")

    @property
    def distance_to_scanner(self) -> float:
        return float(self.values[FeatureId.DISTANCE_TO_SCANNER])


@dataclass
class FeatureTable:
    """Column-wise dataset of feature vectors: (n, 17) values, 0/1 labels, scan ids."""

    values: np.ndarray
    labels: np.ndarray
    scan_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1, N_FEATURES)
        self.labels = np.asarray(self.labels, dtype=np.int8).reshape(-1)
        if self.labels.shape[0] != self.values.shape[0]:
            raise ValueError("labels and values must have equal length")
        if not self.scan_ids:
            self.scan_ids = [""] * self.values.shape[0]
        if len(self.scan_ids) != self.values.shape[0]:
            raise ValueError("scan_ids and values must have equal length")

    def __len__(self) -> int:
        return int(self.values.shape[0])

    @property
    def distances(self) -> np.ndarray:
        return self.values[:, FeatureId.DISTANCE_TO_SCANNER]

    def subset(self, index) -> "FeatureTable":
        index = np.asarray(index)
        return FeatureTable(
            values=self.values[index],
            labels=self.labels[index],
            scan_ids=[self.scan_ids[i] for i in index],
        )

    def vector(self, i: int) -> FeatureVector:
        return FeatureVector(values=self.values[i].copy(), label=int(self.labels[i]))


@dataclass(frozen=True)
class FeatureStats:
    """Per-feature mean and population variance (1/N convention)."""

    mean: np.ndarray
    sigma_sq: np.ndarray


@dataclass(frozen=True)
class ConfidenceReport:
    """Per-feature confidence C in [0, 1] plus the class counts it came from."""

    c: np.ndarray
    positive_count: int
    negative_count: int
    center: str = "positive_mean"


def _circle_fit(pts: np.ndarray) -> tuple[float, float]:
    """Kasa least-squares circle fit: (radius, mean squared radial residual)."""
    a = np.column_stack((2.0 * pts[:, 0], 2.0 * pts[:, 1], np.ones(pts.shape[0])))
    b = np.einsum("ij,ij->i", pts, pts)
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    cx, cy, c = sol
    radius = math.sqrt(max(c + cx * cx + cy * cy, 0.0))
    dist = np.hypot(pts[:, 0] - cx, pts[:, 1] - cy)
    residual = float(np.mean((dist - radius) ** 2))
    return radius, residual


def _line_residual(pts: np.ndarray) -> float:
    """Mean squared residual of the total-least-squares line (smallest eigenvalue)."""
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / pts.shape[0]
    eigvals = np.linalg.eigvalsh(cov)
    return float(max(eigvals[0], 0.0))


def _turning_angles(pts: np.ndarray) -> np.ndarray:
    v1 = np.diff(pts, axis=0)[:-1]
    v2 = np.diff(pts, axis=0)[1:]
    cross = v1[:, 0] * v2[:, 1] - v1[:, 1] * v2[:, 0]
    dot = np.einsum("ij,ij->i", v1, v2)
    return np.arctan2(cross, dot)


def _menger_curvatures(pts: np.ndarray) -> np.ndarray:
    a, b, c = pts[:-2], pts[1:-1], pts[2:]
    ab = b - a
    cross = np.abs(ab[:, 0] * (c - a)[:, 1] - ab[:, 1] * (c - a)[:, 0])
    denom = (
        np.linalg.norm(ab, axis=1)
        * np.linalg.norm(c - b, axis=1)
        * np.linalg.norm(c - a, axis=1)
    )
    out = np.zeros(pts.shape[0] - 2)
    ok = denom > 0
    out[ok] = 2.0 * cross[ok] / denom[ok]
    return out


def _inscribed_angles(pts: np.ndarray) -> np.ndarray:
    u = pts[0] - pts[1:-1]
    v = pts[-1] - pts[1:-1]
    cross = np.abs(u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0])
    dot = np.einsum("ij,ij->i", u, v)
    angles = np.arctan2(cross, dot)
    angles[(cross == 0) & (dot == 0)] = 0.0
    return angles


def _occlusion(scan_ranges: np.ndarray, beam: int, step: int) -> float:
    """1.0 when the nearest retained beam in direction step is strictly closer."""
    j = beam + step
    while 0 <= j < scan_ranges.size:
        if math.isfinite(scan_ranges[j]):
            return 1.0 if scan_ranges[j] < scan_ranges[beam] else 0.0
        j += step
    return 0.0


def extract_features(cluster: PointCluster, scan: LaserScan) -> FeatureVector:
    """Compute the 17-value descriptor of a cluster within its scan."""
    pts = cluster.points
    n = pts.shape[0]
    beams = cluster.beam_indices
    ranges = scan.ranges[beams]
    centroid = np.array([cluster.centroid.x, cluster.centroid.y])

    out = np.zeros(N_FEATURES)
    out[FeatureId.NUM_POINTS] = n
    out[FeatureId.WIDTH] = float(np.hypot(*(pts[-1] - pts[0])))
    out[FeatureId.DISTANCE_TO_SCANNER] = float(np.hypot(*centroid))
    out[FeatureId.DISTANCE_TO_SCANNER_PER_POINT] = float(ranges.mean()) / n
    out[FeatureId.LEFT_OCCLUSION] = _occlusion(scan.ranges, int(beams[0]), -1)
    out[FeatureId.RIGHT_OCCLUSION] = _occlusion(scan.ranges, int(beams[-1]), +1)

    to_gravity = np.linalg.norm(pts - centroid, axis=1)
    out[FeatureId.STD_DISTANCE_TO_GRAVITY] = float(to_gravity.std())

    mx, my = geometric_median(pts)
    out[FeatureId.AVG_DISTANCE_TO_MEDIAN] = float(np.hypot(pts[:, 0] - mx, pts[:, 1] - my).mean())

    if n >= 2:
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        out[FeatureId.BOUNDARY_LENGTH] = float(seg.sum())
        out[FeatureId.BOUNDARY_REGULARITY] = float(seg.std())

    if n >= 3:
        radius, residual = _circle_fit(pts)
        out[FeatureId.BEST_FIT_RADIUS] = radius
        out[FeatureId.CIRCULARITY] = residual
        out[FeatureId.LINEARITY] = _line_residual(pts)
        out[FeatureId.MEAN_ANGULAR_DIFFERENCE] = float(_turning_angles(pts).mean())
        out[FeatureId.MEAN_CURVATURE] = float(_menger_curvatures(pts).mean())
        inscribed = _inscribed_angles(pts)
        out[FeatureId.AVG_INSCRIBED_ANGLE] = float(inscribed.mean())
        out[FeatureId.STD_INSCRIBED_ANGLE] = float(inscribed.std())
    else:
        out[FeatureId.BEST_FIT_RADIUS] = out[FeatureId.WIDTH] / 2.0

    return FeatureVector(values=out, label=cluster.label)


def feature_stats(values: np.ndarray) -> FeatureStats:
    """Per-feature mean and population variance of a (n, 17) value matrix."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] < 1:
        raise ValueError("need at least one feature vector")
    return FeatureStats(mean=values.mean(axis=0), sigma_sq=values.var(axis=0))


def feature_confidence(
    positives: np.ndarray,
    negatives: np.ndarray,
    center: str = "positive_mean",
) -> ConfidenceReport:
    """Per-feature dissimilarity between the class spreads.

    Both spreads are centered at the positive-class mean by default
    (``center="positive_mean"``, the literal form); ``center="own_class_mean"``
    centers each class at its own mean. C = 1 - min(spread+, spread-) /
    max(spread+, spread-), and 0 when both spreads vanish.
    """
    positives = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if positives.shape[0] < 1 or negatives.shape[0] < 1:
        raise ValueError("both classes must be non-empty")
    if center not in ("positive_mean", "own_class_mean"):
        raise ValueError(f"unknown confidence center {center!r}")
    mean_pos = positives.mean(axis=0)
    delta_pos = ((positives - mean_pos) ** 2).mean(axis=0)
    neg_center = mean_pos if center == "positive_mean" else negatives.mean(axis=0)
    delta_neg = ((negatives - neg_center) ** 2).mean(axis=0)
    hi = np.maximum(delta_pos, delta_neg)
    lo = np.minimum(delta_pos, delta_neg)
    c = np.where(hi > 0, 1.0 - lo / np.where(hi > 0, hi, 1.0), 0.0)
    return ConfidenceReport(
        c=c, positive_count=positives.shape[0], negative_count=negatives.shape[0], center=center
    )


def confidence_of_feature(
    values: np.ndarray, labels: np.ndarray, feature: int, center: str = "positive_mean"
) -> float:
    """Single-feature confidence of a labeled sample set (both classes required)."""
    col = values[:, feature : feature + 1]
    pos = labels == 1
    report = feature_confidence(col[pos], col[~pos], center=center)
    return float(report.c[0])


def conflict_check(global_c: float, local_c: float, epsilon: float) -> bool:
    """True when the local confidence exceeds the global one by at least epsilon."""
    return local_c - global_c >= epsilon


def table_confidence(table: FeatureTable, center: str = "positive_mean") -> ConfidenceReport:
    pos = table.labels == 1
    return feature_confidence(table.values[pos], table.values[~pos], center=center)


# ---------------------------------------------------------------------------
# Feature dataset file: CSV with the 17 feature names plus label and scan_id.

CSV_HEADER = list(FEATURE_NAMES) + ["label", "scan_id"]


def write_feature_csv(path, table: FeatureTable) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for i in range(len(table)):
            row = [repr(float(v)) for v in table.values[i]]
            row.append(str(int(table.labels[i])))
            row.append(table.scan_ids[i])
            writer.writerow(row)


def read_feature_csv(path) -> FeatureTable:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ValueError(f"{path}: expected header {CSV_HEADER}, got {header}")
        values, labels, scan_ids = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise ValueError(f"{path}: line {lineno}: expected {len(CSV_HEADER)} columns")
            try:
                values.append([float(v) for v in row[:N_FEATURES]])
                labels.append(int(row[N_FEATURES]))
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from exc
            scan_ids.append(row[N_FEATURES + 1])
    if not values:
        raise ValueError(f"{path}: empty feature dataset")
    return FeatureTable(values=np.array(values), labels=np.array(labels), scan_ids=scan_ids)
