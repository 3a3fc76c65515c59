"""Feature extraction, confidence statistics, and the feature dataset file."""

import math

import numpy as np
import pytest

from marf import (
    FEATURE_NAMES,
    N_FEATURES,
    FeatureId,
    FeatureTable,
    LaserScan,
    cluster_scan,
    conflict_check,
    extract_features,
    feature_confidence,
    feature_stats,
    read_feature_csv,
    write_feature_csv,
)


def scan_from_polar(ranges, angle_min, angle_increment, max_range=20.0):
    return LaserScan(angle_min=angle_min, angle_increment=angle_increment,
                     ranges=np.asarray(ranges, float), max_range=max_range, scan_id="t")


def single_cluster(scan, jump=0.5):
    clusters = cluster_scan(scan, jump)
    assert len(clusters) == 1
    return clusters[0]


class TestExtractFeatures:
    def test_single_point_fallbacks(self):
        scan = scan_from_polar([2.0], angle_min=0.0, angle_increment=0.01)
        vec = extract_features(single_cluster(scan), scan)
        assert vec.values[FeatureId.NUM_POINTS] == 1
        assert vec.values[FeatureId.WIDTH] == 0.0
        assert vec.values[FeatureId.BOUNDARY_LENGTH] == 0.0
        assert vec.values[FeatureId.DISTANCE_TO_SCANNER] == pytest.approx(2.0)
        assert vec.distance_to_scanner == vec.values[FeatureId.DISTANCE_TO_SCANNER]
        assert np.all(np.isfinite(vec.values))

    def test_two_point_fallbacks(self):
        scan = scan_from_polar([2.0, 2.0], angle_min=0.0, angle_increment=0.01)
        vec = extract_features(single_cluster(scan), scan)
        # fit-based and triple-based features fall back to zero
        for f in (FeatureId.CIRCULARITY, FeatureId.LINEARITY, FeatureId.MEAN_CURVATURE,
                  FeatureId.MEAN_ANGULAR_DIFFERENCE, FeatureId.AVG_INSCRIBED_ANGLE,
                  FeatureId.STD_INSCRIBED_ANGLE):
            assert vec.values[f] == 0.0
        assert vec.values[FeatureId.BEST_FIT_RADIUS] == pytest.approx(
            vec.values[FeatureId.WIDTH] / 2
        )

    def test_points_on_perfect_circle(self):
        # five beams hitting a 0.06 m circle centered 2 m ahead, exact ranges
        # from the analytic ray-circle intersection
        center, radius = 2.0, 0.06
        inc = 0.008
        angles = (np.arange(5) - 2) * inc
        b = center * np.cos(angles)
        t = b - np.sqrt(b * b - (center**2 - radius**2))
        scan = scan_from_polar(t, angle_min=angles[0], angle_increment=inc)
        vec = extract_features(single_cluster(scan), scan)
        assert vec.values[FeatureId.NUM_POINTS] == 5
        assert vec.values[FeatureId.BEST_FIT_RADIUS] == pytest.approx(radius, abs=1e-6)
        assert vec.values[FeatureId.CIRCULARITY] == pytest.approx(0.0, abs=1e-6)
        # Menger curvature of a circle is 1/r
        assert vec.values[FeatureId.MEAN_CURVATURE] == pytest.approx(1 / radius, rel=1e-6)

    def test_collinear_points_zero_linearity(self):
        # four beams hitting the vertical line x = 1: range 1/cos(theta)
        inc = 0.01
        angles = np.arange(4) * inc - 0.015
        ranges = 1.0 / np.cos(angles)
        scan = scan_from_polar(ranges, angle_min=angles[0], angle_increment=inc)
        pts = single_cluster(scan).points
        np.testing.assert_allclose(pts[:, 0], 1.0, atol=1e-12)
        vec = extract_features(single_cluster(scan), scan)
        assert vec.values[FeatureId.LINEARITY] == pytest.approx(0.0, abs=1e-9)

    def test_rotation_about_origin_preserves_all_features(self):
        rng = np.random.default_rng(0)
        ranges = np.concatenate([[np.nan, 1.8], 2.0 + rng.normal(0, 0.01, 7), [2.6, np.nan]])
        scan = scan_from_polar(ranges, angle_min=-0.05, angle_increment=0.01)
        rotated = LaserScan(angle_min=scan.angle_min + 1.234, angle_increment=scan.angle_increment,
                            ranges=scan.ranges, max_range=scan.max_range, scan_id="t")
        clusters = cluster_scan(scan, 0.13)
        clusters_rot = cluster_scan(rotated, 0.13)
        assert len(clusters) == len(clusters_rot) >= 1
        for c, cr in zip(clusters, clusters_rot):
            v = extract_features(c, scan).values
            vr = extract_features(cr, rotated).values
            np.testing.assert_allclose(vr, v, rtol=1e-8, atol=1e-10)

    def test_scaling_increases_size_features(self):
        rng = np.random.default_rng(1)
        ranges = 2.0 + rng.normal(0, 0.01, 9)
        scan = scan_from_polar(ranges, angle_min=0.3, angle_increment=0.01)
        scaled = scan_from_polar(ranges * 1.7, angle_min=0.3, angle_increment=0.01, max_range=40)
        v = extract_features(single_cluster(scan), scan).values
        vs = extract_features(single_cluster(scaled), scaled).values
        for f in (FeatureId.WIDTH, FeatureId.BOUNDARY_LENGTH, FeatureId.DISTANCE_TO_SCANNER):
            assert vs[f] > v[f]

    def test_occlusion_flags(self):
        # foreground cluster (0.5 m) breaks the background (2 m) into two
        # clusters whose facing sides are occluded
        ranges = np.array([2.0, 2.0, 2.0, 0.5, 0.5, 2.0, 2.0, 2.0])
        scan = scan_from_polar(ranges, angle_min=0.0, angle_increment=0.01)
        left_bg, fg, right_bg = cluster_scan(scan, 0.13)
        v_left = extract_features(left_bg, scan).values
        v_fg = extract_features(fg, scan).values
        v_right = extract_features(right_bg, scan).values
        assert v_left[FeatureId.LEFT_OCCLUSION] == 0.0
        assert v_left[FeatureId.RIGHT_OCCLUSION] == 1.0
        assert v_fg[FeatureId.LEFT_OCCLUSION] == 0.0
        assert v_fg[FeatureId.RIGHT_OCCLUSION] == 0.0
        assert v_right[FeatureId.LEFT_OCCLUSION] == 1.0
        assert v_right[FeatureId.RIGHT_OCCLUSION] == 0.0

    def test_all_values_finite_on_random_clusters(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n = int(rng.integers(1, 60))
            ranges = rng.uniform(0.3, 12, size=n)
            scan = scan_from_polar(ranges, angle_min=float(rng.uniform(-3, 3)),
                                   angle_increment=0.005)
            for cluster in cluster_scan(scan, 0.2):
                values = extract_features(cluster, scan).values
                assert np.all(np.isfinite(values))


class TestFeatureConfidence:
    def test_hand_arithmetic_oracle(self):
        # positives {1,2,3}: mean 2, spread (1+0+1)/3 = 2/3
        # negatives {4,6} about the positive mean: (4+16)/2 = 10
        pos = np.array([[1.0], [2.0], [3.0]])
        neg = np.array([[4.0], [6.0]])
        report = feature_confidence(pos, neg)
        delta_pos = sum((v - 2.0) ** 2 for v in (1, 2, 3)) / 3
        delta_neg = sum((v - 2.0) ** 2 for v in (4, 6)) / 2
        expected = 1.0 - min(delta_pos, delta_neg) / max(delta_pos, delta_neg)
        assert report.c[0] == pytest.approx(expected, abs=1e-15)
        assert report.c[0] == pytest.approx(14.0 / 15.0, abs=1e-15)
        assert (report.positive_count, report.negative_count) == (3, 2)

    def test_mirrored_negatives_give_zero(self):
        pos = np.array([[1.0], [3.0]])
        neg = 2 * pos.mean() - pos  # mirror about the positive mean
        report = feature_confidence(pos, neg)
        assert report.c[0] == 0.0

    def test_degenerate_positive_class_gives_one(self):
        pos = np.full((4, 1), 2.0)
        neg = np.array([[1.0], [5.0]])
        assert feature_confidence(pos, neg).c[0] == 1.0

    def test_both_spreads_zero_gives_zero(self):
        pos = np.full((3, 1), 2.0)
        neg = np.full((2, 1), 2.0)
        assert feature_confidence(pos, neg).c[0] == 0.0

    def test_own_class_center_switch(self):
        pos = np.array([[1.0], [3.0]])
        neg = np.array([[9.0], [11.0]])
        literal = feature_confidence(pos, neg, center="positive_mean")
        own = feature_confidence(pos, neg, center="own_class_mean")
        # same spread per class about its own mean -> 0; huge spread about mean+
        assert own.c[0] == 0.0
        assert literal.c[0] > 0.9

    def test_bounds_on_random_inputs(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            pos = rng.normal(0, rng.uniform(0.1, 5), size=(int(rng.integers(1, 30)), N_FEATURES))
            neg = rng.normal(rng.uniform(-2, 2), rng.uniform(0.1, 5),
                             size=(int(rng.integers(1, 30)), N_FEATURES))
            c = feature_confidence(pos, neg).c
            assert np.all(c >= 0) and np.all(c <= 1)

    def test_empty_class_rejected(self):
        with pytest.raises(ValueError):
            feature_confidence(np.empty((0, 1)), np.array([[1.0]]))


class TestConflictCheck:
    def test_clear_conflict(self):
        assert conflict_check(0.2, 0.9, 0.1) is True

    def test_no_conflict(self):
        assert conflict_check(0.5, 0.5, 0.1) is False

    def test_boundary_is_inclusive(self):
        assert conflict_check(0.3, 0.4, 0.1) is True


class TestFeatureStats:
    def test_identical_vectors_zero_variance(self):
        values = np.tile(np.arange(N_FEATURES, dtype=float), (5, 1))
        stats = feature_stats(values)
        np.testing.assert_array_equal(stats.sigma_sq, 0.0)

    def test_population_convention(self):
        values = np.zeros((2, N_FEATURES))
        values[1] = 2.0
        stats = feature_stats(values)
        np.testing.assert_allclose(stats.sigma_sq, 1.0)

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(5)
        values = rng.normal(0, 3, size=(100, N_FEATURES))
        stats = feature_stats(values)
        for j in range(N_FEATURES):
            mean = sum(values[:, j]) / 100
            var = sum((v - mean) ** 2 for v in values[:, j]) / 100
            assert stats.mean[j] == pytest.approx(mean, rel=1e-12)
            assert stats.sigma_sq[j] == pytest.approx(var, rel=1e-12)


class TestFeatureCsv:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(6)
        table = FeatureTable(
            values=rng.normal(0, 2, size=(20, N_FEATURES)),
            labels=rng.integers(0, 2, size=20),
            scan_ids=[f"s{i % 3}" for i in range(20)],
        )
        path = tmp_path / "features.csv"
        write_feature_csv(path, table)
        loaded = read_feature_csv(path)
        np.testing.assert_array_equal(loaded.values, table.values)
        np.testing.assert_array_equal(loaded.labels, table.labels)
        assert loaded.scan_ids == table.scan_ids
        header = path.read_text().splitlines()[0]
        assert header == ",".join(list(FEATURE_NAMES) + ["label", "scan_id"])

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text(",".join(list(FEATURE_NAMES) + ["label", "scan_id"]) + "\n")
        with pytest.raises(ValueError, match="empty"):
            read_feature_csv(path)

    def test_wrong_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ValueError, match="header"):
            read_feature_csv(path)
