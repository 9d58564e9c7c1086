import numpy as np
import pytest

from detens.core import Annotation, BBox, ClassLabel, DatasetManifest, ImageRecord
from detens.errors import ValidationError
from detens.ingest.features import FeatureStore
from detens.ingest.proposals import Proposal
from detens.learn.pools import build_training_pools

BOXES = [(10, 10, 50, 50), (12, 10, 50, 50), (60, 60, 90, 90), (0, 60, 30, 95), (70, 0, 95, 25), (10, 10, 50, 50)]


@pytest.fixture
def manifest():
    return DatasetManifest("m", [ImageRecord("img", 100, 100, [
        Annotation(BBox(10, 10, 50, 50), ClassLabel.voc("cat")),
        Annotation(BBox(60, 60, 90, 90), ClassLabel.voc("dog"), difficult=True),
        Annotation(BBox(0, 60, 30, 95), ClassLabel.coco("truck"), svm_trainable=False),
    ])])


@pytest.fixture
def proposals():
    return [Proposal("img", index, BBox(*box)) for index, box in enumerate(BOXES)]


@pytest.fixture
def store():
    keys = [("img", index) for index in range(5)]
    return FeatureStore("GoogleNet", 3, keys, np.arange(15, dtype=np.float32).reshape(5, 3))


class TestTrainingPools:
    def test_cat_pool(self, manifest, proposals, store):
        cat = build_training_pools(manifest, proposals, store, classes=["cat", "dog"])["cat"]

        assert cat.positive_keys == [("img", 0)]
        assert cat.negative_keys == [[("img", 2), ("img", 4)]]
        assert cat.regression_keys == [("img", 0), ("img", 1)]
        np.testing.assert_array_equal(cat.positives, [[0.0, 1.0, 2.0]])
        np.testing.assert_array_equal(cat.regression_gts, [[10, 10, 50, 50], [10, 10, 50, 50]])
        np.testing.assert_array_equal(cat.regression_proposals[1], [12, 10, 50, 50])

    def test_difficult_boxes_are_neither_positive_nor_negative(self, manifest, proposals, store):
        dog = build_training_pools(manifest, proposals, store, classes=["cat", "dog"])["dog"]

        assert dog.positive_keys == []
        assert dog.negative_keys == [[("img", 0), ("img", 1), ("img", 4)]]
        assert dog.regression_keys == []
        assert dog.positives.shape == (0, 3)
        assert dog.negative_count == 3

    def test_unmapped_boxes_never_become_negatives(self, manifest, proposals, store):
        pools = build_training_pools(manifest, proposals, store)

        assert len(pools) == 20
        for pool in pools.values():
            assert all(("img", 3) not in keys for keys in pool.negative_keys)

    def test_proposals_without_features_are_skipped(self, manifest, proposals, store, caplog):
        with caplog.at_level("WARNING"):
            cat = build_training_pools(manifest, proposals, store, classes=["cat"])["cat"]

        assert ("img", 5) not in cat.positive_keys
        assert "1 proposals have no GoogleNet feature" in caplog.text

    def test_keys(self, manifest, proposals, store):
        cat = build_training_pools(manifest, proposals, store, classes=["cat"])["cat"]

        assert cat.positive_keys == [("img", 0)]
        assert sorted(key for keys in cat.negative_keys for key in keys) == [("img", 2), ("img", 4)]

    def test_unknown_class(self, manifest, proposals, store):
        with pytest.raises(ValidationError):
            build_training_pools(manifest, proposals, store, classes=["truck"])
