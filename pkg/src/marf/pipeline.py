"""Glue between the scan, feature and forest layers: dataset extraction and
whole-scan classification."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .features import FeatureTable, extract_features
from .forest import MarfModel, predict_marf_batch
from .scan import (
    DEFAULT_JUMP_THRESHOLD,
    LaserScan,
    PersonAnnotation,
    PointCluster,
    cluster_scan,
    label_clusters,
)


def extract_dataset(
    records: Sequence[tuple[LaserScan, Sequence[PersonAnnotation]]],
    jump_threshold: float = DEFAULT_JUMP_THRESHOLD,
) -> FeatureTable:
    """Cluster, label and featurize a list of annotated scans."""
    values, labels, scan_ids = [], [], []
    for scan, annotations in records:
        clusters = label_clusters(cluster_scan(scan, jump_threshold), annotations)
        for cluster in clusters:
            vec = extract_features(cluster, scan)
            values.append(vec.values)
            labels.append(cluster.label)
            scan_ids.append(scan.scan_id)
    if not values:
        return FeatureTable(values=np.empty((0, 17)), labels=np.empty(0, np.int8), scan_ids=[])
    return FeatureTable(values=np.array(values), labels=np.array(labels), scan_ids=scan_ids)


def classify_scan(
    model: MarfModel,
    scan: LaserScan,
    jump_threshold: float = DEFAULT_JUMP_THRESHOLD,
) -> list[tuple[PointCluster, float, int]]:
    """Full pipeline on one scan: (cluster, leg probability, label) per cluster."""
    clusters = cluster_scan(scan, jump_threshold)
    if not clusters:
        return []
    X = np.array([extract_features(c, scan).values for c in clusters])
    probs, labels, _ = predict_marf_batch(model, X)
    return [(c, float(p), int(l)) for c, p, l in zip(clusters, probs, labels)]
