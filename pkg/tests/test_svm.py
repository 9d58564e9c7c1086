import numpy as np
import pytest

from detens.core import FeatureVector
from detens.errors import AlignmentError, DegenerateTrainingError, DimensionMismatchError, ValidationError
from detens.ingest.features import FeatureStore
from detens.learn.pools import ClassPool
from detens.learn.svm import (SvmModel, SvmTrainer, hinge_loss, mine_hard_negatives, optimal_bias, svm_objective,
                              svm_subgradient, train_all_classes, train_concat_svm, train_svm, train_svm_with_mining)


@pytest.fixture
def blobs():
    rng = np.random.default_rng(0)
    positives = rng.normal(loc=3.0, size=(100, 2))
    negatives = rng.normal(loc=-3.0, size=(100, 2))
    return positives, negatives


@pytest.fixture
def pools():
    rng = np.random.default_rng(1)
    negative_pools = [rng.normal(loc=-3.0, size=(10, 2)) for _ in range(20)]
    negative_pools[7] = np.vstack([negative_pools[7], [[0.0, -0.5]]])
    return rng.normal(loc=3.0, size=(50, 2)), negative_pools


class TestSvmTraining:
    def test_separates_blobs(self, blobs):
        positives, negatives = blobs

        model = train_svm(positives, negatives, c_param=1.0)

        assert np.all(model.decision_function(positives) > 0)
        assert np.all(model.decision_function(negatives) < 0)
        assert model.feature_dim == 2
        assert model.class_name == "person"

    def test_accepts_feature_vectors(self, blobs):
        positives, negatives = blobs

        from_vectors = train_svm([FeatureVector(row) for row in positives], [FeatureVector(row) for row in negatives],
                                 c_param=1.0)
        from_arrays = train_svm(positives.astype(np.float32), negatives.astype(np.float32), c_param=1.0)

        np.testing.assert_allclose(from_vectors.weights, from_arrays.weights)

    def test_objective_history_is_non_increasing(self, blobs):
        model = train_svm(*blobs, c_param=1.0)

        history = np.array(model.objective_history)
        assert len(history) == model.iterations
        assert np.all(np.diff(history) <= 0)

    def test_returned_model_matches_best_objective(self, blobs):
        positives, negatives = blobs
        features = np.vstack([positives, negatives])
        labels = np.concatenate([np.ones(100), -np.ones(100)])

        model = train_svm(positives, negatives, c_param=0.5)

        objective = svm_objective(model.weights, model.bias, features, labels, 0.5)
        assert objective == pytest.approx(model.objective_history[-1])

    def test_deterministic_for_a_seed(self, blobs):
        first = train_svm(*blobs, c_param=1.0, seed=3)
        second = train_svm(*blobs, c_param=1.0, seed=3)

        np.testing.assert_array_equal(first.weights, second.weights)
        assert first.bias == second.bias

    def test_offset_classes_need_a_free_bias(self):
        positives, negatives = np.full((20, 1), 101.0), np.full((20, 1), 99.0)
        features = np.vstack([positives, negatives])
        labels = np.concatenate([np.ones(20), -np.ones(20)])

        model = train_svm(positives, negatives, c_param=1.0)

        assert np.all(model.decision_function(positives) > 0)
        assert np.all(model.decision_function(negatives) < 0)
        assert svm_objective(model.weights, model.bias, features, labels, 1.0) == pytest.approx(0.5, abs=5e-3)
        assert model.weights[0] == pytest.approx(1.0, abs=1e-2)
        assert model.bias == pytest.approx(-100.0, abs=1.0)

    @pytest.mark.parametrize("sizes", [(0, 5), (5, 0)])
    def test_degenerate_training(self, sizes):
        with pytest.raises(DegenerateTrainingError):
            train_svm(np.ones((sizes[0], 3)), -np.ones((sizes[1], 3)))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            train_svm(np.ones((4, 3)), -np.ones((4, 2)))

    def test_model_validation(self):
        with pytest.raises(ValidationError):
            SvmModel("truck", np.zeros(2), 0.0, 1.0)
        with pytest.raises(ValidationError):
            SvmModel("cat", np.array([np.nan, 0.0]), 0.0, 1.0)
        with pytest.raises(DimensionMismatchError):
            SvmModel("cat", np.zeros(2), 0.0, 1.0).decision_function(np.zeros((3, 4)))


class TestObjective:
    def test_hinge_loss(self):
        features = np.array([[1.0], [-1.0], [0.25]])
        labels = np.array([1.0, -1.0, 1.0])

        assert hinge_loss(np.array([2.0]), 0.0, features, labels) == pytest.approx(0.5)

    def test_optimal_bias_lands_in_zero_loss_interval(self):
        scores = np.array([2.0, 0.5, -3.0])
        labels = np.array([1.0, 1.0, -1.0])

        bias = optimal_bias(scores, labels)

        assert bias == 0.5
        assert hinge_loss(np.array([1.0]), bias, scores[:, None], labels) == 0.0

    def test_optimal_bias_beats_every_kink(self):
        rng = np.random.default_rng(6)

        for _ in range(50):
            scores = rng.normal(size=15)
            labels = np.where(np.arange(15) < 6, 1.0, -1.0)
            features = scores[:, None]

            best = min(hinge_loss(np.ones(1), kink, features, labels) for kink in labels - scores)

            assert hinge_loss(np.ones(1), optimal_bias(scores, labels), features, labels) == pytest.approx(best)

    def test_subgradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        features = rng.normal(size=(40, 3))
        labels = np.where(rng.random(40) < 0.5, 1.0, -1.0)
        c_param, eps = 0.7, 1e-6

        for _ in range(100):
            weights, bias = rng.normal(size=3), float(rng.normal())
            grad_w, grad_b = svm_subgradient(weights, bias, features, labels, c_param)
            numeric = []
            for k in range(3):
                step = np.zeros(3)
                step[k] = eps
                numeric.append((svm_objective(weights + step, bias, features, labels, c_param)
                                - svm_objective(weights - step, bias, features, labels, c_param)) / (2 * eps))
            numeric_b = (svm_objective(weights, bias + eps, features, labels, c_param)
                         - svm_objective(weights, bias - eps, features, labels, c_param)) / (2 * eps)

            np.testing.assert_allclose(grad_w, numeric, atol=1e-4)
            assert grad_b == pytest.approx(numeric_b, abs=1e-4)


class TestHardNegativeMining:
    def test_violators_sorted_by_score(self):
        model = SvmModel("cat", np.array([1.0]), 0.0, 1.0)
        pool = np.array([[-2.0], [0.5], [-0.5], [3.0], [-1.0]])

        assert list(mine_hard_negatives(model, pool)) == [3, 1, 2]

    def test_empty_pool(self):
        model = SvmModel("cat", np.array([1.0]), 0.0, 1.0)

        assert len(mine_hard_negatives(model, np.zeros((0, 1)))) == 0

    def test_one_round_is_plain_training(self, pools):
        positives, negative_pools = pools

        mined = train_svm_with_mining(positives, negative_pools, c_param=1.0, rounds=1)
        plain = train_svm(positives, negative_pools[0], c_param=1.0)

        np.testing.assert_array_equal(mined.weights, plain.weights)
        assert mined.bias == plain.bias
        assert mined.mined_rounds == 0

    def test_mining_pushes_hard_negative_down(self, pools):
        positives, negative_pools = pools
        planted = negative_pools[7][-1:]

        first = train_svm_with_mining(positives, negative_pools, c_param=1.0, rounds=1)
        mined = train_svm_with_mining(positives, negative_pools, c_param=1.0, rounds=4)

        assert first.decision_function(planted)[0] > -1.0
        assert mined.mined_rounds >= 1
        assert mined.decision_function(planted)[0] < first.decision_function(planted)[0]
        assert np.all(mined.decision_function(positives) > 0)

    def test_mining_does_not_raise_full_pool_hinge(self, pools):
        positives, negative_pools = pools
        features = np.vstack([positives, *negative_pools])
        labels = np.concatenate([np.ones(len(positives)), -np.ones(len(features) - len(positives))])

        first = train_svm_with_mining(positives, negative_pools, c_param=1.0, rounds=1)
        mined = train_svm_with_mining(positives, negative_pools, c_param=1.0, rounds=4)

        assert hinge_loss(mined.weights, mined.bias, features, labels) <= \
            hinge_loss(first.weights, first.bias, features, labels)

    def test_separable_data_stops_early(self, pools):
        model = train_svm_with_mining(*pools, c_param=1.0, rounds=20)

        assert 1 <= model.mined_rounds < 19

    def test_cache_cap_keeps_highest_scoring(self):
        model = SvmModel("cat", np.array([1.0]), 0.0, 1.0)
        pools = [np.array([[-3.0], [-0.5]]), np.array([[0.2], [-2.0]])]
        cache = [(0, 0), (0, 1), (1, 0), (1, 1)]

        assert SvmTrainer()._cap(model, pools, cache, 2) == [(0, 1), (1, 0)]

    def test_rounds_must_be_positive(self, pools):
        with pytest.raises(ValidationError):
            SvmTrainer().train_with_mining(pools[0], pools[1], "cat", rounds=0)


class TestConcatenatedTraining:
    @pytest.fixture
    def stores(self):
        rng = np.random.default_rng(5)
        keys = [("img", b) for b in range(40)]
        centers = np.where(np.arange(40)[:, None] < 20, 2.0, -2.0)
        first = FeatureStore("GoogleNet", 3, keys, centers + rng.normal(size=(40, 3)))
        second = FeatureStore("VGG-16", 2, keys, centers[:, :1] + rng.normal(size=(40, 2)))
        labels = {key: 1 if key[1] < 20 else -1 for key in keys}
        return first, second, labels

    def test_single_store_equals_plain_training(self, stores):
        first, _, labels = stores
        positives = first.rows_for([key for key, label in labels.items() if label > 0])
        negatives = first.rows_for([key for key, label in labels.items() if label < 0])

        joined = train_concat_svm([first], labels, c_param=1.0)
        plain = train_svm(positives, negatives, c_param=1.0)

        np.testing.assert_array_equal(joined.weights, plain.weights)

    def test_concatenated_dimension(self, stores):
        first, second, labels = stores

        model = train_concat_svm([first, second], labels, c_param=1.0)

        assert model.feature_dim == 5
        assert model.model_name == "GoogleNet+VGG-16"

    def test_misaligned_stores(self, stores):
        first, _, labels = stores
        other = FeatureStore("VGG-16", 2, [("other", b) for b in range(40)], np.zeros((40, 2)))

        with pytest.raises(AlignmentError):
            train_concat_svm([first, other], labels)


class TestTrainAllClasses:
    def test_classes_without_examples_are_skipped(self, pools, caplog):
        positives, negative_pools = pools
        class_pools = {
            "cat": ClassPool("cat", 2, positives=positives, negative_pools=negative_pools),
            "dog": ClassPool("dog", 2, positives=np.zeros((0, 2)), negative_pools=negative_pools),
        }

        with caplog.at_level("WARNING"):
            models = train_all_classes(SvmTrainer(c_param=1.0), class_pools, rounds=2, jobs=2)

        assert list(models) == ["cat"]
        assert "Skipping dog" in caplog.text
