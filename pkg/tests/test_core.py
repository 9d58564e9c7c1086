import numpy as np
import pytest

from detens.core import (COCO_CLASSES, VOC_CLASSES, Annotation, AnnotationKind, BBox, ClassLabel, DatasetManifest,
                         FeatureVector, ImageRecord, Namespace, box_array, intersection_area, iou, pairwise_iou)
from detens.errors import InvalidBoxError, ValidationError


@pytest.fixture
def record():
    return ImageRecord("000005", 500, 375, (
        Annotation(BBox(10, 20, 110, 220), ClassLabel.voc("chair")),
        Annotation(BBox(200, 100, 260, 180), ClassLabel.voc("chair"), difficult=True),
        Annotation(BBox(300, 10, 400, 60), kind=AnnotationKind.SAMPLED_NEGATIVE),
    ), source="voc2007")


class TestBBox:
    def test_dimensions(self):
        box = BBox(10, 20, 40, 60)

        assert (box.width, box.height, box.area) == (30, 40, 1200)
        assert box.center == (25.0, 40.0)

    @pytest.mark.parametrize("coords", [(10, 10, 10, 20), (10, 10, 5, 20), (0, 0, float("nan"), 1),
                                        (0, 0, float("inf"), 1)])
    def test_rejects_invalid_boxes(self, coords):
        with pytest.raises(InvalidBoxError):
            BBox(*coords)

    def test_clip(self):
        assert BBox(-5, -5, 120, 50).clip(100, 40) == BBox(0, 0, 100, 40)

    def test_clip_outside_image(self):
        with pytest.raises(InvalidBoxError):
            BBox(120, 10, 130, 20).clip(100, 100)

    def test_from_list(self):
        assert BBox.from_list(["1", 2, 3.5, 4]).as_list() == [1.0, 2.0, 3.5, 4.0]


class TestGeometry:
    def test_edge_sharing_boxes_do_not_intersect(self):
        assert intersection_area(BBox(0, 0, 10, 10), BBox(10, 0, 20, 10)) == 0.0
        assert iou(BBox(0, 0, 10, 10), BBox(10, 0, 20, 10)) == 0.0

    def test_iou(self):
        assert iou(BBox(0, 0, 10, 10), BBox(0, 0, 10, 10)) == 1.0
        assert iou(BBox(0, 0, 10, 10), BBox(5, 0, 15, 10)) == pytest.approx(50 / 150)

    def test_pairwise_iou_matches_scalar(self):
        rng = np.random.default_rng(1)
        corners = rng.uniform(0, 50, size=(30, 2))
        sizes = rng.uniform(1, 30, size=(30, 2))
        boxes = [BBox(x, y, x + w, y + h) for (x, y), (w, h) in zip(corners, sizes)]

        matrix = pairwise_iou(box_array(boxes[:12]), box_array(boxes[12:]))

        assert matrix.shape == (12, 18)
        for i, a in enumerate(boxes[:12]):
            for j, b in enumerate(boxes[12:]):
                assert matrix[i, j] == pytest.approx(iou(a, b), abs=1e-12)

    def test_box_array_empty(self):
        assert box_array([]).shape == (0, 4)


def random_boxes(rng, count, integer=False):
    corners = rng.integers(0, 15, size=(count, 2)) if integer else rng.uniform(0, 50, size=(count, 2))
    sizes = rng.integers(1, 6, size=(count, 2)) if integer else rng.uniform(0.5, 30, size=(count, 2))
    return [BBox(float(x), float(y), float(x + w), float(y + h)) for (x, y), (w, h) in zip(corners, sizes)]


def covered_cells(box, side=20):
    mask = np.zeros((side, side), dtype=bool)
    mask[int(box.y_min):int(box.y_max), int(box.x_min):int(box.x_max)] = True
    return mask


class TestOverlapProperties:
    def test_offset_squares(self):
        a, b = BBox(0, 0, 10, 10), BBox(5, 5, 20, 20)

        assert intersection_area(a, b) == 25.0
        assert iou(a, b) == pytest.approx(25 / 300)

    def test_iou_is_symmetric(self):
        rng = np.random.default_rng(11)
        boxes = random_boxes(rng, 400)

        for a, b in zip(boxes[::2], boxes[1::2]):
            assert iou(a, b) == iou(b, a)
            assert 0.0 <= iou(a, b) <= 1.0

    def test_iou_is_one_only_for_equal_boxes(self):
        rng = np.random.default_rng(12)
        boxes = random_boxes(rng, 200, integer=True)

        for a in boxes:
            assert iou(a, a) == 1.0
        for a, b in zip(boxes[::2], boxes[1::2]):
            assert (iou(a, b) == 1.0) == (a == b)
        assert iou(BBox(0, 0, 10, 10), BBox(0, 0, 10, 10.5)) < 1.0

    def test_intersection_is_bounded_by_smaller_area(self):
        rng = np.random.default_rng(13)
        boxes = random_boxes(rng, 400)

        for a, b in zip(boxes[::2], boxes[1::2]):
            assert 0.0 <= intersection_area(a, b) <= min(a.area, b.area)

    def test_iou_matches_cell_count(self):
        rng = np.random.default_rng(14)
        boxes = random_boxes(rng, 400, integer=True)

        for a, b in zip(boxes[::2], boxes[1::2]):
            cells_a, cells_b = covered_cells(a), covered_cells(b)
            counted = (cells_a & cells_b).sum() / (cells_a | cells_b).sum()

            assert iou(a, b) == pytest.approx(counted, abs=1e-9)


class TestLabels:
    def test_vocabularies(self):
        assert len(VOC_CLASSES) == 20
        assert len(COCO_CLASSES) == 80

    def test_label_namespaces(self):
        assert ClassLabel.voc("dining table").namespace is Namespace.VOC
        assert ClassLabel("coco", "airplane").namespace is Namespace.COCO

    @pytest.mark.parametrize("namespace, name", [("voc", "airplane"), ("coco", "aeroplane"), ("voc", "diningtable")])
    def test_unknown_names_rejected(self, namespace, name):
        with pytest.raises(ValidationError):
            ClassLabel(namespace, name)


class TestRecords:
    def test_ground_truth_excludes_negatives(self, record):
        assert len(record.ground_truth) == 2

    def test_round_trip(self, record):
        assert ImageRecord.from_dict(record.to_dict()) == record

    def test_annotation_must_fit_image(self):
        with pytest.raises(ValidationError, match="outside"):
            ImageRecord("a", 100, 100, [Annotation(BBox(50, 50, 101, 90), ClassLabel.voc("cat"))])

    def test_ground_truth_needs_label(self):
        with pytest.raises(ValidationError):
            Annotation(BBox(0, 0, 1, 1))

    def test_negative_has_no_label(self):
        with pytest.raises(ValidationError):
            Annotation(BBox(0, 0, 1, 1), ClassLabel.voc("cat"), kind="sampled_negative")

    def test_manifest_rejects_duplicate_ids(self, record):
        with pytest.raises(ValidationError, match="000005"):
            DatasetManifest("dup", [record, record])

    def test_manifest_access(self, record):
        manifest = DatasetManifest("VOC2007", [record])

        assert len(manifest) == 1
        assert manifest.by_id()["000005"] is record
        assert manifest.with_records([], name="empty").name == "empty"


class TestFeatureVector:
    def test_read_only_float32(self):
        vector = FeatureVector([1, 2, 3])

        assert vector.values.dtype == np.float32
        assert vector.dim == 3
        with pytest.raises(ValueError):
            vector.values[0] = 5

    def test_equality(self):
        assert FeatureVector([1.0, 2.0]) == FeatureVector(np.array([1.0, 2.0]))
        assert FeatureVector([1.0, 2.0]) != FeatureVector([1.0, 2.5])

    def test_rejects_non_finite(self):
        with pytest.raises(ValidationError):
            FeatureVector([1.0, float("nan")])
