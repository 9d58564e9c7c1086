"""
Shared domain types and box geometry.

Boxes are 0-based and half-open on their max edges, so ``width = x_max - x_min`` and two
boxes that only share an edge do not intersect.
"""
import math
from dataclasses import dataclass, field, replace
from enum import StrEnum

import numpy as np

from detens.errors import InvalidBoxError, ValidationError

# Column order of the detection results table.
VOC_CLASSES = (
    "aeroplane", "bike", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
    "dining table", "dog", "horse", "motorbike", "person", "potted plant", "sheep", "sofa",
    "train", "tv",
)

# Spellings used by the VOC devkit XML files for the classes whose canonical name differs.
VOC_DEVKIT_NAMES = {
    "bike": "bicycle",
    "dining table": "diningtable",
    "potted plant": "pottedplant",
    "tv": "tvmonitor",
}

COCO_CATEGORIES = (
    (1, "person"), (2, "bicycle"), (3, "car"), (4, "motorcycle"), (5, "airplane"), (6, "bus"),
    (7, "train"), (8, "truck"), (9, "boat"), (10, "traffic light"), (11, "fire hydrant"),
    (13, "stop sign"), (14, "parking meter"), (15, "bench"), (16, "bird"), (17, "cat"),
    (18, "dog"), (19, "horse"), (20, "sheep"), (21, "cow"), (22, "elephant"), (23, "bear"),
    (24, "zebra"), (25, "giraffe"), (27, "backpack"), (28, "umbrella"), (31, "handbag"),
    (32, "tie"), (33, "suitcase"), (34, "frisbee"), (35, "skis"), (36, "snowboard"),
    (37, "sports ball"), (38, "kite"), (39, "baseball bat"), (40, "baseball glove"),
    (41, "skateboard"), (42, "surfboard"), (43, "tennis racket"), (44, "bottle"),
    (46, "wine glass"), (47, "cup"), (48, "fork"), (49, "knife"), (50, "spoon"), (51, "bowl"),
    (52, "banana"), (53, "apple"), (54, "sandwich"), (55, "orange"), (56, "broccoli"),
    (57, "carrot"), (58, "hot dog"), (59, "pizza"), (60, "donut"), (61, "cake"), (62, "chair"),
    (63, "couch"), (64, "potted plant"), (65, "bed"), (67, "dining table"), (70, "toilet"),
    (72, "tv"), (73, "laptop"), (74, "mouse"), (75, "remote"), (76, "keyboard"),
    (77, "cell phone"), (78, "microwave"), (79, "oven"), (80, "toaster"), (81, "sink"),
    (82, "refrigerator"), (84, "book"), (85, "clock"), (86, "vase"), (87, "scissors"),
    (88, "teddy bear"), (89, "hair drier"), (90, "toothbrush"),
)
COCO_CLASSES = tuple(name for _, name in COCO_CATEGORIES)


class Namespace(StrEnum):
    VOC = "voc"
    COCO = "coco"


class DatasetSource(StrEnum):
    VOC2007 = "voc2007"
    VOC2012 = "voc2012"
    COCO2014 = "coco2014"
    SYNTHETIC = "synthetic"


class AnnotationKind(StrEnum):
    GROUND_TRUTH = "ground_truth"
    SAMPLED_NEGATIVE = "sampled_negative"


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(value) for value in coords):
            raise InvalidBoxError(f"Box coordinates must be finite: {coords}")
        if self.x_max <= self.x_min or self.y_max <= self.y_min:
            raise InvalidBoxError(f"Box has no area: {coords}")

    @classmethod
    def from_list(cls, values):
        x_min, y_min, x_max, y_max = (float(value) for value in values)
        return cls(x_min, y_min, x_max, y_max)

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def area(self):
        return self.width * self.height

    @property
    def center(self):
        return self.x_min + 0.5 * self.width, self.y_min + 0.5 * self.height

    def as_list(self):
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def is_inside(self, width, height):
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= width and self.y_max <= height

    def clip(self, width, height):
        """
        Clips the box to ``[0, width] x [0, height]``; raises InvalidBoxError if nothing is left.
        """
        return BBox(max(self.x_min, 0.0), max(self.y_min, 0.0),
                    min(self.x_max, float(width)), min(self.y_max, float(height)))


def intersection_area(a, b):
    """
    Area of the geometric intersection of two boxes; 0 when they are disjoint or share only an edge.
    """
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a, b):
    """
    Intersection over union of two boxes, in [0, 1].
    """
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def box_array(boxes):
    """
    Stacks boxes into an (n, 4) float64 array of corners.
    """
    if len(boxes) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([box.as_list() for box in boxes], dtype=np.float64)


def pairwise_intersection(a, b):
    """
    Intersection areas between every row of ``a`` (n, 4) and every row of ``b`` (m, 4).
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    w = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    h = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    return np.maximum(w, 0.0) * np.maximum(h, 0.0)


def pairwise_iou(a, b):
    """
    IoU matrix of shape (n, m) between two box arrays.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    inter = pairwise_intersection(a, b)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=inter > 0)
    return out


@dataclass(frozen=True)
class ClassLabel:
    namespace: Namespace
    name: str

    def __post_init__(self):
        namespace = Namespace(self.namespace)
        object.__setattr__(self, "namespace", namespace)
        vocabulary = VOC_CLASSES if namespace is Namespace.VOC else COCO_CLASSES
        if self.name not in vocabulary:
            raise ValidationError(f"'{self.name}' is not a {namespace} class")

    @classmethod
    def voc(cls, name):
        return cls(Namespace.VOC, name)

    @classmethod
    def coco(cls, name):
        return cls(Namespace.COCO, name)

    def to_dict(self):
        return {"namespace": str(self.namespace), "name": self.name}


@dataclass(frozen=True)
class Annotation:
    """
    One labelled (or sampled background) box inside an image.

    ``svm_trainable`` is cleared for COCO boxes whose category has no VOC counterpart; they are
    kept for fine-tuning bookkeeping but never enter an SVM pool.
    """

    bbox: BBox
    label: ClassLabel | None = None
    difficult: bool = False
    source: DatasetSource = DatasetSource.SYNTHETIC
    kind: AnnotationKind = AnnotationKind.GROUND_TRUTH
    svm_trainable: bool = True

    def __post_init__(self):
        object.__setattr__(self, "source", DatasetSource(self.source))
        object.__setattr__(self, "kind", AnnotationKind(self.kind))
        if self.kind is AnnotationKind.GROUND_TRUTH and self.label is None:
            raise ValidationError("Ground-truth annotations need a class label")
        if self.kind is AnnotationKind.SAMPLED_NEGATIVE and self.label is not None:
            raise ValidationError("Sampled negatives are background and carry no label")

    @property
    def is_ground_truth(self):
        return self.kind is AnnotationKind.GROUND_TRUTH

    def to_dict(self):
        return {
            "bbox": self.bbox.as_list(),
            "label": self.label.to_dict() if self.label else None,
            "difficult": self.difficult,
            "source": str(self.source),
            "kind": str(self.kind),
            "svm_trainable": self.svm_trainable,
        }

    @classmethod
    def from_dict(cls, data):
        label = data.get("label")
        return cls(
            bbox=BBox.from_list(data["bbox"]),
            label=ClassLabel(label["namespace"], label["name"]) if label else None,
            difficult=bool(data.get("difficult", False)),
            source=data.get("source", DatasetSource.SYNTHETIC),
            kind=data.get("kind", AnnotationKind.GROUND_TRUTH),
            svm_trainable=bool(data.get("svm_trainable", True)),
        )


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    width: int
    height: int
    annotations: tuple = ()
    source: DatasetSource = DatasetSource.SYNTHETIC
    split: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "annotations", tuple(self.annotations))
        object.__setattr__(self, "source", DatasetSource(self.source))
        if not self.image_id:
            raise ValidationError("Image id must be a non-empty string")
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"Image {self.image_id} has invalid size {self.width}x{self.height}")
        for index, annotation in enumerate(self.annotations):
            if not annotation.bbox.is_inside(self.width, self.height):
                raise ValidationError(
                    f"Annotation {index} of image {self.image_id} lies outside "
                    f"{self.width}x{self.height}: {annotation.bbox.as_list()}")

    @property
    def ground_truth(self):
        return [annotation for annotation in self.annotations if annotation.is_ground_truth]

    def with_annotations(self, annotations):
        return replace(self, annotations=tuple(annotations))

    def to_dict(self):
        return {
            "image_id": self.image_id,
            "width": self.width,
            "height": self.height,
            "source": str(self.source),
            "split": self.split,
            "annotations": [annotation.to_dict() for annotation in self.annotations],
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            image_id=str(data["image_id"]),
            width=int(data["width"]),
            height=int(data["height"]),
            annotations=tuple(Annotation.from_dict(item) for item in data.get("annotations", [])),
            source=data.get("source", DatasetSource.SYNTHETIC),
            split=data.get("split", "train"),
        )


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    records: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        for record in self.records:
            if record.image_id in seen:
                raise ValidationError(f"Manifest {self.name} lists image {record.image_id} twice")
            seen.add(record.image_id)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_id(self):
        return {record.image_id: record for record in self.records}

    def with_records(self, records, name=None):
        return DatasetManifest(name or self.name, tuple(records))


@dataclass(frozen=True)
class ModelSpec:
    model_name: str
    feature_dim: int
    training_set: str = "VOC2012"

    def __post_init__(self):
        if self.feature_dim <= 0:
            raise ValidationError(f"feature_dim must be positive, got {self.feature_dim}")


GOOGLENET = ModelSpec("GoogleNet", 1024)
VGG16 = ModelSpec("VGG-16", 4096)


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float32).reshape(-1)
        if values.size == 0:
            raise ValidationError("Feature vectors need at least one value")
        if not np.all(np.isfinite(values)):
            raise ValidationError("Feature vector contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def dim(self):
        return int(self.values.size)

    def __eq__(self, other):
        return isinstance(other, FeatureVector) and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash(self.values.tobytes())
