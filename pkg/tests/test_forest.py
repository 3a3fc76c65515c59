"""Multi-scale forest: partitioning, biased sampling, training, fusion,
persistence."""

import json
import math

import numpy as np
import pytest

from synthdata import build_dataset, random_feature_matrix, random_labeled_data

from marf import (
    FeatureTable,
    NonterminatingSamplingError,
    ScalePartition,
    TrainParams,
    VersionMismatchError,
    biased_sample,
    load_model,
    make_partition,
    predict_marf,
    predict_marf_batch,
    predict_tree,
    save_model,
    scale_of,
    train_marf,
    train_tree,
)
from marf.features import FeatureId, N_FEATURES
from marf.forest import ModelFormatError, biased_sample_indices, model_to_dict
from marf.tree import tree_to_records


def small_table(seed=0, n=400, far_fraction=None):
    rng = np.random.default_rng(seed)
    X, y = random_labeled_data(rng, n)
    if far_fraction is not None:
        n_far = int(round(n * far_fraction))
        X[:, FeatureId.DISTANCE_TO_SCANNER] = rng.uniform(0, 5.99, n)
        X[:n_far, FeatureId.DISTANCE_TO_SCANNER] = rng.uniform(6.01, 12, n_far)
    return FeatureTable(values=X, labels=y, scan_ids=[f"s{i}" for i in range(n)])


class TestMakePartition:
    def test_three_scale_matches_published_boundaries(self):
        assert make_partition(3).boundaries == (3.0, 6.0)

    def test_two_scale(self):
        assert make_partition(2).boundaries == (6.0,)

    def test_four_scale(self):
        assert make_partition(4).boundaries == (1.5, 3.0, 6.0)

    def test_single_scale_has_no_boundaries(self):
        assert make_partition(1).boundaries == ()

    def test_starts(self):
        p = make_partition(3)
        assert [p.start(k) for k in (1, 2, 3)] == [0.0, 3.0, 6.0]

    def test_invalid_boundaries_rejected(self):
        with pytest.raises(ValueError):
            ScalePartition(boundaries=(3.0, 5.0))  # must end at 6.0
        with pytest.raises(ValueError):
            ScalePartition(boundaries=(6.0, 3.0))


class TestScaleOf:
    def test_inside_first_interval(self):
        assert scale_of(2.9, make_partition(3)) == 1

    def test_boundary_belongs_to_upper_interval(self):
        assert scale_of(3.0, make_partition(3)) == 2
        assert scale_of(6.0, make_partition(3)) == 3

    def test_unbounded_last_interval(self):
        assert scale_of(100.0, make_partition(3)) == 3

    def test_negative_distance_rejected(self):
        with pytest.raises(ValueError):
            scale_of(-0.1, make_partition(3))


class TestBiasedSample:
    def test_scale_one_is_plain_bootstrap(self):
        table = small_table(far_fraction=0.2)
        rng = np.random.default_rng(0)
        idx = biased_sample_indices(table.distances, 1, make_partition(3), 0.0, 500, rng)
        assert idx.shape == (500,)
        # must equal the raw uniform draw stream: every draw accepted
        rng2 = np.random.default_rng(0)
        draws = rng2.integers(0, len(table), size=max(500, 256))
        np.testing.assert_array_equal(idx, draws[:500])

    def test_alpha_one_accepts_everything(self):
        table = small_table(far_fraction=0.1)
        rng = np.random.default_rng(1)
        idx = biased_sample_indices(table.distances, 3, make_partition(3), 1.0, 1000, rng)
        assert idx.shape == (1000,)

    def test_far_fraction_matches_closed_form(self):
        # 10% far clusters, alpha = 0.6: expect 0.1 / (0.1 + 0.9 * 0.6)
        table = small_table(seed=5, n=5000, far_fraction=0.1)
        scales = np.searchsorted(make_partition(3).boundaries, table.distances, side="right") + 1
        true_far = np.mean(scales >= 3)
        n = 10**4
        rng = np.random.default_rng(2)
        idx = biased_sample_indices(table.distances, 3, make_partition(3), 0.6, n, rng)
        got = np.mean(scales[idx] >= 3)
        expected = true_far / (true_far + (1 - true_far) * 0.6)
        sigma = math.sqrt(expected * (1 - expected) / n)
        assert abs(got - expected) <= 3 * sigma

    def test_nonterminating_sampling_detected(self):
        table = small_table(far_fraction=0.0)
        table.values[:, FeatureId.DISTANCE_TO_SCANNER] = 1.0
        rng = np.random.default_rng(3)
        with pytest.raises(NonterminatingSamplingError):
            biased_sample_indices(table.distances, 3, make_partition(3), 0.0, 10, rng)

    def test_wrapper_returns_subset_table(self):
        table = small_table(far_fraction=0.3)
        out = biased_sample(table, 2, make_partition(3), 0.5, 50, seed=7)
        assert len(out) == 50
        assert all(sid in table.scan_ids for sid in out.scan_ids)

    def test_determinism(self):
        table = small_table(far_fraction=0.3)
        a = biased_sample_indices(table.distances, 2, make_partition(3), 0.5, 200,
                                  np.random.default_rng(9))
        b = biased_sample_indices(table.distances, 2, make_partition(3), 0.5, 200,
                                  np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)


class TestTrainMarf:
    def test_k1_single_tree_collapses_to_plain_bootstrap_tree(self):
        table = small_table(seed=11, far_fraction=0.2)
        params = TrainParams(seed=0, epsilon=0.1)
        model = train_marf(table, k_scales=1, trees_per_scale=1, params=params, seed=123)
        # rebuild the same tree by hand: bootstrap with the derived seed
        rng = np.random.default_rng(np.random.SeedSequence([123, 1, 0, 0]))
        idx = biased_sample_indices(table.distances, 1, make_partition(1), 0.6, len(table), rng)
        tree_rng = np.random.default_rng(np.random.SeedSequence([123, 1, 0, 10_000]))
        expected = train_tree(table.values[idx], table.labels[idx], model.global_confidence,
                              model.feature_stats, params, rng=tree_rng)
        assert model.arfs[0].trees[0].root == expected.root

    def test_determinism_byte_identical_files(self, tmp_path):
        table = small_table(seed=12, far_fraction=0.25)
        for name in ("a.json", "b.json"):
            model = train_marf(table, k_scales=2, trees_per_scale=3,
                               params=TrainParams(seed=1), seed=5)
            save_model(model, tmp_path / name)
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_far_fraction_increases_with_scale(self):
        table = small_table(seed=13, n=800, far_fraction=0.15)
        log: dict = {}
        train_marf(table, k_scales=3, trees_per_scale=3, params=TrainParams(seed=2),
                   alpha=0.5, seed=3, sample_log=log)
        partition = make_partition(3)
        scales = np.searchsorted(partition.boundaries, table.distances, side="right") + 1
        far_frac = []
        for k in (1, 2, 3):
            idx = np.concatenate(log[k])
            far_frac.append(np.mean(scales[idx] >= 3))
        assert far_frac[0] < far_frac[1] < far_frac[2]

    def test_single_class_table_rejected(self):
        table = small_table(seed=14)
        table.labels[:] = 1
        with pytest.raises(ValueError, match="both classes"):
            train_marf(table, k_scales=1, trees_per_scale=1)

    def test_parallel_training_matches_serial(self):
        table = small_table(seed=15, n=250, far_fraction=0.2)
        a = train_marf(table, k_scales=2, trees_per_scale=2, params=TrainParams(seed=3), seed=8)
        b = train_marf(table, k_scales=2, trees_per_scale=2, params=TrainParams(seed=3), seed=8,
                       n_jobs=2)
        assert model_to_dict(a) == model_to_dict(b)


@pytest.fixture(scope="class")
def fused_model():
    table = small_table(seed=20, n=400, far_fraction=0.3)
    model = train_marf(table, k_scales=3, trees_per_scale=4,
                       params=TrainParams(seed=4), seed=21)
    return table, model


@pytest.mark.usefixtures("fused_model")
class TestPredictMarf:
    @pytest.fixture(autouse=True)
    def _bind(self, fused_model):
        self.table, self.model = fused_model

    def vector_at_distance(self, d):
        x = self.table.values[0].copy()
        x[FeatureId.DISTANCE_TO_SCANNER] = d
        return x

    def test_scale_one_consults_only_first_arf(self):
        pred = predict_marf(self.model, self.vector_at_distance(1.2), detail=True)
        assert sorted(pred.arf_votes) == [1]

    def test_consulted_set_is_monotone_in_distance(self):
        partition = self.model.partition
        for d in (0.5, 2.9, 3.0, 4.5, 6.0, 9.0, 50.0):
            pred = predict_marf(self.model, self.vector_at_distance(d), detail=True)
            expected = [k for k in (1, 2, 3) if partition.start(k) <= d]
            assert sorted(pred.arf_votes) == expected

    def test_probability_is_mean_of_consulted_votes(self):
        x = self.vector_at_distance(7.0)
        pred = predict_marf(self.model, x, detail=True)
        assert pred.probability == pytest.approx(np.mean(list(pred.arf_votes.values())), abs=1e-12)

    def test_all_trees_voting_one_gives_probability_one(self):
        # legs-only region: pick the training vector the model is most sure of
        probs, _, _ = predict_marf_batch(self.model, self.table.values)
        i = int(np.argmax(probs))
        if probs[i] == 1.0:
            prob, label = predict_marf(self.model, self.table.values[i])
            assert (prob, label) == (1.0, 1)

    def test_vote_mean_matches_per_tree_labels(self):
        x = self.vector_at_distance(2.0)
        pred = predict_marf(self.model, x, detail=True)
        votes = [predict_tree(t, x)[0] for t in self.model.arfs[0].trees]
        assert pred.arf_votes[1] == pytest.approx(np.mean(votes), abs=1e-12)

    def test_boundary_beta_is_strict(self):
        probs, labels, _ = predict_marf_batch(self.model, self.table.values)
        at_beta = probs == self.model.beta
        assert np.all(labels[at_beta] == 0)

    def test_batch_matches_single(self):
        X = self.table.values[:50]
        probs, labels, visits = predict_marf_batch(self.model, X)
        for i in range(X.shape[0]):
            prob, label = predict_marf(self.model, X[i])
            assert probs[i] == pytest.approx(prob, abs=1e-12)
            assert labels[i] == label
        assert np.all(visits > 0)

    def test_k1_model_equals_single_arf_vote(self):
        model = train_marf(self.table, k_scales=1, trees_per_scale=4,
                           params=TrainParams(seed=5), seed=22)
        x = self.vector_at_distance(8.0)
        prob, _ = predict_marf(model, x)
        votes, _ = model.arfs[0].vote(x.reshape(1, -1))
        assert prob == pytest.approx(float(votes[0]), abs=1e-12)


@pytest.fixture(scope="class")
def persisted_model():
    table = small_table(seed=30, n=400, far_fraction=0.3)
    return train_marf(table, k_scales=3, trees_per_scale=3,
                      params=TrainParams(seed=6, epsilon=0.05), seed=31)


@pytest.mark.usefixtures("persisted_model")
class TestPersistence:
    @pytest.fixture(autouse=True)
    def _bind(self, persisted_model):
        self._model = persisted_model

    def make_model(self):
        return self._model

    def test_round_trip_predictions_identical(self, tmp_path):
        model = self.make_model()
        path = tmp_path / "model.json"
        save_model(model, path)
        loaded = load_model(path)
        rng = np.random.default_rng(32)
        X = random_feature_matrix(rng, 200)
        p1, l1, v1 = predict_marf_batch(model, X)
        p2, l2, v2 = predict_marf_batch(loaded, X)
        np.testing.assert_array_equal(p1, p2)
        np.testing.assert_array_equal(l1, l2)
        np.testing.assert_array_equal(v1, v2)

    def test_save_load_save_byte_identical(self, tmp_path):
        model = self.make_model()
        save_model(model, tmp_path / "one.json")
        save_model(load_model(tmp_path / "one.json"), tmp_path / "two.json")
        assert (tmp_path / "one.json").read_bytes() == (tmp_path / "two.json").read_bytes()

    def test_truncated_file_reports_malformed(self, tmp_path):
        model = self.make_model()
        path = tmp_path / "model.json"
        save_model(model, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(ModelFormatError):
            load_model(path)

    def test_version_mismatch_detected(self, tmp_path):
        model = self.make_model()
        doc = model_to_dict(model)
        doc["format_version"] = "99"
        path = tmp_path / "model.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(VersionMismatchError, match="99"):
            load_model(path)

    def test_missing_field_names_path(self, tmp_path):
        model = self.make_model()
        doc = model_to_dict(model)
        del doc["arfs"][1]["trees"]
        path = tmp_path / "model.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(ModelFormatError, match=r"arfs\[1\]"):
            load_model(path)

    def test_params_and_flags_round_trip(self, tmp_path):
        model = self.make_model()
        path = tmp_path / "model.json"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.params == model.params
        assert loaded.decision_flags() == model.decision_flags()
        assert loaded.alpha == model.alpha and loaded.beta == model.beta
        np.testing.assert_array_equal(loaded.feature_stats.sigma_sq, model.feature_stats.sigma_sq)
        np.testing.assert_array_equal(loaded.global_confidence.c, model.global_confidence.c)
