"""Metrics, PR curves, latency benchmarking and the feature-noise study."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .features import (
    CONTINUOUS_FEATURES,
    FEATURE_NAMES,
    N_FEATURES,
    FeatureId,
    extract_features,
)
from .forest import MarfModel, predict_marf_batch
from .pipeline import extract_dataset
from .scan import (
    DEFAULT_JUMP_THRESHOLD,
    LaserScan,
    SceneConfig,
    cluster_scan,
    generate_scene,
    inject_gaussian_noise,
)

PR_BETA_COUNT = 100
PR_BETA_MIN = 0.1
PR_BETA_MAX = 0.9


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def precision(self) -> Optional[float]:
        denom = self.tp + self.fp
        return self.tp / denom if denom else None

    @property
    def recall(self) -> Optional[float]:
        denom = self.tp + self.fn
        return self.tp / denom if denom else None


def confusion_and_rates(predicted_labels, truths):
    """Confusion counts plus precision/recall; undefined rates come back as None."""
    predicted = np.asarray(predicted_labels).reshape(-1)
    truths = np.asarray(truths).reshape(-1)
    if predicted.shape[0] != truths.shape[0]:
        raise ValueError("predictions and truths must have equal length")
    pos = truths == 1
    pred_pos = predicted == 1
    counts = ConfusionCounts(
        tp=int(np.sum(pred_pos & pos)),
        fp=int(np.sum(pred_pos & ~pos)),
        fn=int(np.sum(~pred_pos & pos)),
        tn=int(np.sum(~pred_pos & ~pos)),
    )
    return counts, counts.precision, counts.recall


@dataclass(frozen=True)
class PrPoint:
    beta: float
    precision: Optional[float]
    recall: Optional[float]
    tp: int
    fp: int
    fn: int


@dataclass(frozen=True)
class PrCurve:
    points: tuple[PrPoint, ...]
    beta_min: float = PR_BETA_MIN
    beta_max: float = PR_BETA_MAX

    def to_rows(self) -> list[dict]:
        return [dataclasses.asdict(p) for p in self.points]


def pr_curve_from_scores(probabilities, truths, n_points: int = PR_BETA_COUNT) -> PrCurve:
    """Sweep the label threshold over precomputed fused probabilities."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    truths = np.asarray(truths)
    betas = np.linspace(PR_BETA_MIN, PR_BETA_MAX, n_points)
    points = []
    for beta in betas:
        counts, precision, recall = confusion_and_rates(probabilities > beta, truths)
        points.append(PrPoint(float(beta), precision, recall, counts.tp, counts.fp, counts.fn))
    return PrCurve(points=tuple(points))


def pr_curve(model: MarfModel, table, n_points: int = PR_BETA_COUNT) -> PrCurve:
    """PR curve of a model on a labeled table; each cluster is predicted once."""
    probabilities, _, _ = predict_marf_batch(model, table.values)
    return pr_curve_from_scores(probabilities, table.labels, n_points)


def write_pr_csv(path, curve: PrCurve) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("beta,precision,recall,tp,fp,fn\n")
        for p in curve.points:
            prec = "" if p.precision is None else repr(p.precision)
            rec = "" if p.recall is None else repr(p.recall)
            fh.write(f"{p.beta!r},{prec},{rec},{p.tp},{p.fp},{p.fn}\n")


# ---------------------------------------------------------------------------
# Latency benchmark.

@dataclass(frozen=True)
class StageStats:
    median: float  # seconds per scan
    p95: float


@dataclass(frozen=True)
class BenchReport:
    clustering: StageStats
    feature_extraction: StageStats
    prediction: StageStats
    total: StageStats
    scans_per_second: float
    node_visits_per_prediction: float
    clusters_per_scan: float
    repetitions: int
    scan_count: int
    concurrent_prediction: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def benchmark(
    model: MarfModel,
    scans: Sequence[LaserScan],
    repetitions: int = 3,
    jump_threshold: float = DEFAULT_JUMP_THRESHOLD,
) -> BenchReport:
    """Wall-clock the full pipeline per scan; reports the best repetition's medians.

    Prediction runs single-threaded; node visits come from the traversal
    kernel's own counter.
    """
    if len(scans) < 10:
        raise ValueError("need at least 10 scans")
    if repetitions < 3:
        raise ValueError("need at least 3 repetitions")
    reps = []
    total_visits = 0
    total_predictions = 0
    total_clusters = 0
    for rep in range(repetitions):
        stage_times = np.zeros((len(scans), 3))
        for si, scan in enumerate(scans):
            t0 = time.perf_counter()
            clusters = cluster_scan(scan, jump_threshold)
            t1 = time.perf_counter()
            if clusters:
                X = np.array([extract_features(c, scan).values for c in clusters])
            else:
                X = np.empty((0, N_FEATURES))
            t2 = time.perf_counter()
            if X.shape[0]:
                _, _, visits = predict_marf_batch(model, X)
            else:
                visits = np.zeros(0, np.int64)
            t3 = time.perf_counter()
            stage_times[si] = (t1 - t0, t2 - t1, t3 - t2)
            if rep == 0:
                total_visits += int(visits.sum())
                total_predictions += X.shape[0]
                total_clusters += len(clusters)
        reps.append(stage_times)
    totals = [st.sum(axis=1) for st in reps]
    best = int(np.argmin([np.median(t) for t in totals]))
    stage_times = reps[best]
    scan_totals = totals[best]

    def stats(samples: np.ndarray) -> StageStats:
        return StageStats(median=float(np.median(samples)), p95=float(np.percentile(samples, 95)))

    median_total = float(np.median(scan_totals))
    return BenchReport(
        clustering=stats(stage_times[:, 0]),
        feature_extraction=stats(stage_times[:, 1]),
        prediction=stats(stage_times[:, 2]),
        total=stats(scan_totals),
        scans_per_second=(1.0 / median_total) if median_total > 0 else float("inf"),
        node_visits_per_prediction=(total_visits / total_predictions) if total_predictions else 0.0,
        clusters_per_scan=total_clusters / len(scans),
        repetitions=repetitions,
        scan_count=len(scans),
    )


# ---------------------------------------------------------------------------
# Feature-noise study.

@dataclass(frozen=True)
class FeatureErrorStats:
    count: int
    mean: float
    std: float
    skewness: float  # 0 when the error distribution is degenerate
    excess_kurtosis: float
    hist_counts: tuple[int, ...]
    hist_edges: tuple[float, ...]


@dataclass(frozen=True)
class NoiseStudyReport:
    sigmas: tuple[float, ...]
    per_sigma: tuple[dict, ...]  # feature name -> FeatureErrorStats
    frames_used: tuple[int, ...]
    frames_skipped: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "sigmas": list(self.sigmas),
            "frames_used": list(self.frames_used),
            "frames_skipped": list(self.frames_skipped),
            "per_sigma": [
                {name: dataclasses.asdict(stats) for name, stats in entry.items()}
                for entry in self.per_sigma
            ],
        }


def _moment_stats(errors: np.ndarray, bins: int) -> FeatureErrorStats:
    mean = float(errors.mean())
    std = float(errors.std())
    if std > 0:
        z = (errors - mean) / std
        skew = float(np.mean(z**3))
        kurt = float(np.mean(z**4) - 3.0)
    else:
        skew = 0.0
        kurt = 0.0
    counts, edges = np.histogram(errors, bins=bins)
    return FeatureErrorStats(
        count=int(errors.size),
        mean=mean,
        std=std,
        skewness=skew,
        excess_kurtosis=kurt,
        hist_counts=tuple(int(c) for c in counts),
        hist_edges=tuple(float(e) for e in edges),
    )


def _match_clusters(clean, noisy) -> Optional[list[tuple[int, int]]]:
    """Pair clusters by maximal beam-index overlap; None unless a perfect bijection."""
    if len(clean) != len(noisy) or not clean:
        return None
    noisy_sets = [set(c.beam_indices.tolist()) for c in noisy]
    pairs = []
    taken = set()
    for ci, cluster in enumerate(clean):
        beams = set(cluster.beam_indices.tolist())
        best, best_overlap, best_dist = -1, 0, float("inf")
        for ni, beams_n in enumerate(noisy_sets):
            if ni in taken:
                continue
            overlap = len(beams & beams_n)
            dist = cluster.centroid.distance_to(noisy[ni].centroid)
            if overlap > best_overlap or (overlap == best_overlap and overlap > 0 and dist < best_dist):
                best, best_overlap, best_dist = ni, overlap, dist
        if best_overlap == 0:
            return None
        taken.add(best)
        pairs.append((ci, best))
    return pairs


def noise_study(
    scene: SceneConfig,
    sigmas: Sequence[float],
    frames: int,
    jump_threshold: float = DEFAULT_JUMP_THRESHOLD,
    hist_bins: int = 40,
) -> NoiseStudyReport:
    """Per-feature error distributions between clean frames and noisy twins.

    Each frame is generated noise-free, re-noised at every sigma, re-clustered,
    and matched to the clean clusters by beam overlap; frames whose clusters
    cannot be matched one-to-one are skipped and counted.
    """
    if frames < 1:
        raise ValueError("frames must be >= 1")
    if any(s < 0 for s in sigmas):
        raise ValueError("sigma values must be >= 0")
    clean_config = dataclasses.replace(scene, range_noise_sigma=0.0)
    errors = [[[] for _ in range(N_FEATURES)] for _ in sigmas]
    used = [0] * len(sigmas)
    skipped = [0] * len(sigmas)
    for frame in range(frames):
        scan, _ = generate_scene(clean_config, frame)
        clean_clusters = cluster_scan(scan, jump_threshold)
        if not clean_clusters:
            raise ValueError(f"scene produced no clusters at frame {frame}")
        clean_features = [extract_features(c, scan).values for c in clean_clusters]
        for si, sigma in enumerate(sigmas):
            seed = np.random.SeedSequence([clean_config.rng_seed, frame, si]).generate_state(1)[0]
            noisy_scan = inject_gaussian_noise(scan, float(sigma), int(seed))
            noisy_clusters = cluster_scan(noisy_scan, jump_threshold)
            pairs = _match_clusters(clean_clusters, noisy_clusters)
            if pairs is None:
                skipped[si] += 1
                continue
            used[si] += 1
            for ci, ni in pairs:
                noisy_vec = extract_features(noisy_clusters[ni], noisy_scan).values
                diff = noisy_vec - clean_features[ci]
                for f in range(N_FEATURES):
                    errors[si][f].append(diff[f])
    per_sigma = []
    for si in range(len(sigmas)):
        entry = {}
        for f in range(N_FEATURES):
            arr = np.asarray(errors[si][f], dtype=np.float64)
            if arr.size == 0:
                arr = np.zeros(1)
            entry[FEATURE_NAMES[f]] = _moment_stats(arr, hist_bins)
        per_sigma.append(entry)
    return NoiseStudyReport(
        sigmas=tuple(float(s) for s in sigmas),
        per_sigma=tuple(per_sigma),
        frames_used=tuple(used),
        frames_skipped=tuple(skipped),
    )
