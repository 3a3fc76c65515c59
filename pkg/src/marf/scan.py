"""2D laser scans: synthesis, noise injection, jump-distance segmentation, leg labeling.

A scan is a polar range sweep; out-of-range beams carry NaN. Scans are
segmented into point clusters wherever the Cartesian gap between consecutive
retained points exceeds a jump threshold, and clusters are labeled leg /
non-leg from per-person ground-truth positions.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

DEFAULT_JUMP_THRESHOLD = 0.13
"""Cartesian gap (meters) above which adjacent points start a new cluster."""

LEG_LABEL_RADIUS = 0.5
"""Max centroid-to-person distance (meters) for a cluster to count as a leg."""

_RAY_EPS = 1e-9


@dataclass(frozen=True)
class Point2D:
    x: float
    y: float

    def norm(self) -> float:
        return math.hypot(self.x, self.y)

    def distance_to(self, other: "Point2D") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class LaserScan:
    """One polar range sweep. Beam i has bearing angle_min + i * angle_increment."""

    angle_min: float
    angle_increment: float
    ranges: np.ndarray  # (n,) float64; NaN marks out-of-range beams
    max_range: float
    scan_id: str

    def __post_init__(self):
        ranges = np.asarray(self.ranges, dtype=np.float64)
        object.__setattr__(self, "ranges", ranges)
        if ranges.ndim != 1 or ranges.size == 0:
            raise ValueError("ranges must be a non-empty 1-D array")
        if not self.angle_increment > 0:
            raise ValueError("angle_increment must be > 0")
        finite = ranges[np.isfinite(ranges)]
        if finite.size and (finite.min() < 0 or finite.max() > self.max_range):
            raise ValueError("finite ranges must lie in [0, max_range]")

    @property
    def beam_count(self) -> int:
        return int(self.ranges.size)

    def angles(self) -> np.ndarray:
        return self.angle_min + np.arange(self.ranges.size) * self.angle_increment

    def points(self) -> tuple[np.ndarray, np.ndarray]:
        """Cartesian coordinates of the retained (finite-range) beams.

        Returns (points (m,2), beam_indices (m,)).
        """
        keep = np.flatnonzero(np.isfinite(self.ranges))
        theta = self.angle_min + keep * self.angle_increment
        r = self.ranges[keep]
        pts = np.column_stack((r * np.cos(theta), r * np.sin(theta)))
        return pts, keep


@dataclass
class PointCluster:
    """A contiguous run of retained beams; the atomic classification unit."""

    points: np.ndarray  # (n, 2), beam order
    beam_indices: np.ndarray  # (n,) strictly increasing
    centroid: Optional[Point2D] = None  # mean of points; computed when omitted
    scan_id: str = ""
    label: Optional[int] = None  # 1 leg, 0 non-leg, None unlabeled

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.beam_indices = np.asarray(self.beam_indices, dtype=np.intp)
        if self.points.ndim != 2 or self.points.shape[0] < 1 or self.points.shape[1] != 2:
            raise ValueError("points must be a (n>=1, 2) array")
        if self.beam_indices.shape[0] != self.points.shape[0]:
            raise ValueError("beam_indices and points must have equal length")
        if self.centroid is None:
            cx, cy = self.points.mean(axis=0)
            self.centroid = Point2D(float(cx), float(cy))

    @property
    def size(self) -> int:
        return int(self.points.shape[0])


@dataclass(frozen=True)
class PersonAnnotation:
    position: Point2D
    person_id: str


@dataclass(frozen=True)
class CircleObstacle:
    center: Point2D
    radius: float


@dataclass(frozen=True)
class SegmentObstacle:
    a: Point2D
    b: Point2D


Obstacle = Union[CircleObstacle, SegmentObstacle]


@dataclass(frozen=True)
class PersonConfig:
    """A person as two leg circles straddling a trajectory waypoint along the x axis."""

    trajectory: tuple[Point2D, ...]  # waypoint per frame, cycled
    leg_separation: float
    leg_radius: float


@dataclass(frozen=True)
class SceneConfig:
    beam_count: int
    angle_span: float
    persons: tuple[PersonConfig, ...] = ()
    obstacles: tuple[Obstacle, ...] = ()
    range_noise_sigma: float = 0.0
    max_range: float = 15.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.beam_count < 1:
            raise ValueError("beam_count must be >= 1")
        if not self.angle_span > 0:
            raise ValueError("angle_span must be > 0")
        if self.range_noise_sigma < 0:
            raise ValueError("range_noise_sigma must be >= 0")
        for p in self.persons:
            if not p.trajectory:
                raise ValueError("person trajectory must be non-empty")
            if not p.leg_radius > 0:
                raise ValueError("leg_radius must be > 0")


def cluster_scan(scan: LaserScan, jump_threshold: float = DEFAULT_JUMP_THRESHOLD) -> list[PointCluster]:
    """Segment a scan into clusters by the jump distance between adjacent points.

    Out-of-range beams are discarded; a new cluster starts whenever the
    Euclidean distance between consecutive retained points exceeds
    ``jump_threshold``. Clusters partition the retained beams in beam order.
    """
    if not jump_threshold > 0:
        raise ValueError("jump_threshold must be > 0")
    pts, beam_idx = scan.points()
    if pts.shape[0] == 0:
        return []
    gaps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    breaks = np.flatnonzero(gaps > jump_threshold) + 1
    return [
        PointCluster(points=chunk_pts, beam_indices=chunk_idx, scan_id=scan.scan_id)
        for chunk_pts, chunk_idx in zip(np.split(pts, breaks), np.split(beam_idx, breaks))
    ]


def label_clusters(
    clusters: Sequence[PointCluster],
    annotations: Sequence[PersonAnnotation],
    max_distance: float = LEG_LABEL_RADIUS,
) -> list[PointCluster]:
    """Attach leg / non-leg labels from person annotations.

    For each person, the two nearest clusters within ``max_distance`` of the
    person position become legs. Clusters are claimed at most once, greedily
    in increasing distance order; exactly equal distances are broken by first
    beam index, then annotation order. Everything unclaimed is non-leg.
    """
    scan_ids = {c.scan_id for c in clusters}
    if len(scan_ids) > 1:
        raise ValueError("clusters must all come from the same scan")
    candidates = []
    for pi, ann in enumerate(annotations):
        for ci, cluster in enumerate(clusters):
            d = cluster.centroid.distance_to(ann.position)
            if d < max_distance:
                candidates.append((d, int(cluster.beam_indices[0]), pi, ci))
    candidates.sort()
    claimed: set[int] = set()
    legs_of: dict[int, int] = {}
    for d, _, pi, ci in candidates:
        if ci in claimed or legs_of.get(pi, 0) >= 2:
            continue
        claimed.add(ci)
        legs_of[pi] = legs_of.get(pi, 0) + 1
    return [
        dataclasses.replace(c, label=1 if ci in claimed else 0)
        for ci, c in enumerate(clusters)
    ]


def _cast_circles(dirs: np.ndarray, centers: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Nearest positive ray-circle hit distance per beam (inf on miss)."""
    b = dirs @ centers.T  # (B, C) projection of each center on each ray
    cc = np.einsum("ij,ij->i", centers, centers) - radii**2  # (C,)
    disc = b * b - cc[None, :]
    sq = np.sqrt(np.maximum(disc, 0.0))
    t1 = b - sq
    t2 = b + sq
    t = np.where(t1 > _RAY_EPS, t1, np.where(t2 > _RAY_EPS, t2, np.inf))
    t[disc < 0] = np.inf
    return t.min(axis=1)


def _cast_segments(dirs: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Nearest positive ray-segment hit distance per beam (inf on miss)."""
    e = b - a  # (S, 2)
    denom = dirs[:, 0:1] * e[None, :, 1] - dirs[:, 1:2] * e[None, :, 0]  # (B, S)
    cross_pe = a[None, :, 0] * e[None, :, 1] - a[None, :, 1] * e[None, :, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = cross_pe / denom
        u = (a[None, :, 1] * dirs[:, 0:1] - a[None, :, 0] * dirs[:, 1:2]) / -denom
    ok = (np.abs(denom) > _RAY_EPS) & (t > _RAY_EPS) & (u >= 0.0) & (u <= 1.0)
    t = np.where(ok, t, np.inf)
    return t.min(axis=1)


def _scene_circles(config: SceneConfig, frame_index: int) -> tuple[np.ndarray, np.ndarray, list[PersonAnnotation]]:
    centers = []
    radii = []
    annotations = []
    for pi, person in enumerate(config.persons):
        pos = person.trajectory[frame_index % len(person.trajectory)]
        half = person.leg_separation / 2.0
        for leg in (Point2D(pos.x - half, pos.y), Point2D(pos.x + half, pos.y)):
            if leg.norm() <= person.leg_radius:
                raise ValueError("leg circle covers the scanner origin")
            centers.append((leg.x, leg.y))
            radii.append(person.leg_radius)
        annotations.append(PersonAnnotation(position=pos, person_id=f"p{pi}"))
    for obs in config.obstacles:
        if isinstance(obs, CircleObstacle):
            centers.append((obs.center.x, obs.center.y))
            radii.append(obs.radius)
    return np.asarray(centers, float).reshape(-1, 2), np.asarray(radii, float), annotations


def generate_scene(config: SceneConfig, frame_index: int) -> tuple[LaserScan, list[PersonAnnotation]]:
    """Ray-cast one synthetic frame. Deterministic given (config, frame_index).

    Each person contributes two leg circles at its current trajectory waypoint,
    offset by +-leg_separation/2 along x. Beams take the nearest hit among legs
    and obstacles; misses and hits beyond max_range become out-of-range.
    """
    if frame_index < 0:
        raise ValueError("frame_index must be >= 0")
    inc = config.angle_span / config.beam_count
    angle_min = -config.angle_span / 2.0
    theta = angle_min + np.arange(config.beam_count) * inc
    dirs = np.column_stack((np.cos(theta), np.sin(theta)))

    centers, radii, annotations = _scene_circles(config, frame_index)
    hit = np.full(config.beam_count, np.inf)
    if centers.shape[0]:
        hit = np.minimum(hit, _cast_circles(dirs, centers, radii))
    seg_a = [(o.a.x, o.a.y) for o in config.obstacles if isinstance(o, SegmentObstacle)]
    seg_b = [(o.b.x, o.b.y) for o in config.obstacles if isinstance(o, SegmentObstacle)]
    if seg_a:
        hit = np.minimum(hit, _cast_segments(dirs, np.asarray(seg_a), np.asarray(seg_b)))

    ranges = np.where(hit <= config.max_range, hit, np.nan)
    scan = LaserScan(
        angle_min=angle_min,
        angle_increment=inc,
        ranges=ranges,
        max_range=config.max_range,
        scan_id=f"synth-{config.rng_seed}-{frame_index:06d}",
    )
    if config.range_noise_sigma > 0:
        noise_seed = np.random.SeedSequence([config.rng_seed, frame_index]).generate_state(1)[0]
        scan = inject_gaussian_noise(scan, config.range_noise_sigma, int(noise_seed))
    return scan, annotations


def inject_gaussian_noise(scan: LaserScan, sigma: float, seed: int) -> LaserScan:
    """Perturb each finite range with N(0, sigma^2), clamped to [0, max_range].

    Out-of-range beams are untouched; the result is deterministic per seed.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    rng = np.random.default_rng(seed)
    ranges = scan.ranges.copy()
    finite = np.isfinite(ranges)
    noisy = ranges[finite] + rng.normal(0.0, sigma, size=int(finite.sum()))
    ranges[finite] = np.clip(noisy, 0.0, scan.max_range)
    return dataclasses.replace(scan, ranges=ranges)


# ---------------------------------------------------------------------------
# Scan dataset file: one JSON object per line, out-of-range encoded as null.

def _scan_to_record(scan: LaserScan, annotations: Sequence[PersonAnnotation]) -> dict:
    ranges = [None if not math.isfinite(r) else float(r) for r in scan.ranges]
    return {
        "scan_id": scan.scan_id,
        "angle_min": scan.angle_min,
        "angle_increment": scan.angle_increment,
        "max_range": scan.max_range,
        "ranges": ranges,
        "persons": [{"id": a.person_id, "x": a.position.x, "y": a.position.y} for a in annotations],
    }


def write_scan_dataset(path, records: Sequence[tuple[LaserScan, Sequence[PersonAnnotation]]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for scan, annotations in records:
            fh.write(json.dumps(_scan_to_record(scan, annotations)))
            fh.write("\n")


def read_scan_dataset(path) -> list[tuple[LaserScan, list[PersonAnnotation]]]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                ranges = np.array(
                    [np.nan if r is None else float(r) for r in rec["ranges"]], dtype=np.float64
                )
                scan = LaserScan(
                    angle_min=float(rec["angle_min"]),
                    angle_increment=float(rec["angle_increment"]),
                    ranges=ranges,
                    max_range=float(rec["max_range"]),
                    scan_id=str(rec["scan_id"]),
                )
                annotations = [
                    PersonAnnotation(Point2D(float(p["x"]), float(p["y"])), str(p["id"]))
                    for p in rec.get("persons", [])
                ]
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}: line {lineno}: malformed scan record: {exc}") from exc
            out.append((scan, annotations))
    return out


# ---------------------------------------------------------------------------
# Scene config file (JSON) for the synthesizer.

def scene_config_to_dict(config: SceneConfig) -> dict:
    obstacles = []
    for obs in config.obstacles:
        if isinstance(obs, CircleObstacle):
            obstacles.append({"type": "circle", "x": obs.center.x, "y": obs.center.y, "r": obs.radius})
        else:
            obstacles.append(
                {"type": "segment", "x1": obs.a.x, "y1": obs.a.y, "x2": obs.b.x, "y2": obs.b.y}
            )
    return {
        "beam_count": config.beam_count,
        "angle_span": config.angle_span,
        "max_range": config.max_range,
        "range_noise_sigma": config.range_noise_sigma,
        "rng_seed": config.rng_seed,
        "persons": [
            {
                "trajectory": [[p.x, p.y] for p in person.trajectory],
                "leg_separation": person.leg_separation,
                "leg_radius": person.leg_radius,
            }
            for person in config.persons
        ],
        "obstacles": obstacles,
    }


def scene_config_from_dict(data: dict) -> SceneConfig:
    try:
        persons = tuple(
            PersonConfig(
                trajectory=tuple(Point2D(float(x), float(y)) for x, y in p["trajectory"]),
                leg_separation=float(p["leg_separation"]),
                leg_radius=float(p["leg_radius"]),
            )
            for p in data.get("persons", [])
        )
        obstacles: list[Obstacle] = []
        for obs in data.get("obstacles", []):
            if obs["type"] == "circle":
                obstacles.append(CircleObstacle(Point2D(float(obs["x"]), float(obs["y"])), float(obs["r"])))
            elif obs["type"] == "segment":
                obstacles.append(
                    SegmentObstacle(
                        Point2D(float(obs["x1"]), float(obs["y1"])),
                        Point2D(float(obs["x2"]), float(obs["y2"])),
                    )
                )
            else:
                raise ValueError(f"unknown obstacle type {obs['type']!r}")
        return SceneConfig(
            beam_count=int(data["beam_count"]),
            angle_span=float(data["angle_span"]),
            persons=persons,
            obstacles=tuple(obstacles),
            range_noise_sigma=float(data.get("range_noise_sigma", 0.0)),
            max_range=float(data.get("max_range", 15.0)),
            rng_seed=int(data.get("rng_seed", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed scene config: {exc}") from exc


def load_scene_configs(path) -> list[SceneConfig]:
    """Load one scene config, or a list of them, from a JSON file."""
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, list):
        return [scene_config_from_dict(d) for d in data]
    return [scene_config_from_dict(data)]
