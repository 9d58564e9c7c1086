"""
Synthetic datasets with oracle features, so the whole pipeline can run without a CNN.

Every proposal's feature is a one-hot class indicator (all zeros for background) followed by
the four regression targets that take it onto its ground-truth box, plus optional Gaussian
noise, all multiplied by ``feature_scale`` to reach the magnitude of CNN features. With no noise
the classes are linearly separable at the default SVM C, and the box corrections are a linear
function of the features.
"""
import logging
from dataclasses import dataclass

import numpy as np

from detens.config import Config
from detens.core import VOC_CLASSES, Annotation, BBox, ClassLabel, DatasetManifest, DatasetSource, ImageRecord, \
    box_array
from detens.errors import ValidationError
from detens.ingest.augment import place_boxes
from detens.ingest.features import FeatureStore
from detens.ingest.proposals import Proposal, ProposalSource
from detens.learn.regression import clip_boxes, encode_boxes, valid_rows

GEOMETRY_CHANNELS = 4


@dataclass(frozen=True)
class SyntheticSpec:
    n_images: int = Config.SYNTHETIC_IMAGES
    width: int = Config.SYNTHETIC_WIDTH
    height: int = Config.SYNTHETIC_HEIGHT
    classes: tuple = VOC_CLASSES[:5]
    min_boxes: int = 1
    max_boxes: int = 3
    sigma: float = 0.0
    feature_scale: float = Config.SYNTHETIC_FEATURE_SCALE
    seed: int = Config.SEED
    pseudo_models: int = Config.SYNTHETIC_MODELS
    jitter_per_box: int = 2
    background_per_image: int = 4
    min_side: int = 40
    max_side: int = 150

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if self.n_images < 1:
            raise ValidationError(f"n_images must be >= 1, got {self.n_images}")
        if self.sigma < 0:
            raise ValidationError(f"Feature noise sigma must be >= 0, got {self.sigma}")
        if self.feature_scale <= 0:
            raise ValidationError(f"feature_scale must be positive, got {self.feature_scale}")
        if not self.classes or len(self.classes) > len(VOC_CLASSES):
            raise ValidationError(f"Need between 1 and {len(VOC_CLASSES)} classes, got {len(self.classes)}")
        unknown = [name for name in self.classes if name not in VOC_CLASSES]
        if unknown:
            raise ValidationError(f"Not VOC classes: {', '.join(unknown)}")
        if len(set(self.classes)) != len(self.classes):
            raise ValidationError("Synthetic classes must be distinct")
        if not 0 <= self.min_boxes <= self.max_boxes:
            raise ValidationError(f"Invalid boxes-per-image range {self.min_boxes}..{self.max_boxes}")
        if self.pseudo_models < 1:
            raise ValidationError(f"pseudo_models must be >= 1, got {self.pseudo_models}")
        if min(self.width, self.height) < self.min_side:
            raise ValidationError(f"Images of {self.width}x{self.height} cannot hold {self.min_side}px boxes")

    @property
    def feature_dim(self):
        return len(self.classes) + GEOMETRY_CHANNELS

    def model_names(self):
        return [f"synthetic{index}" for index in range(self.pseudo_models)]


def jitter_boxes(rng, boxes, copies, width, height):
    """
    ``copies`` perturbed versions of each box: centers moved by up to 5% of the size, sides
    scaled by up to e^0.1, then clipped to the image.

    Returns:
        tuple: (jittered boxes (m, 4), index of the source box for each).
    """
    if len(boxes) == 0 or copies == 0:
        return np.zeros((0, 4)), np.zeros(0, dtype=np.int64)
    source = np.repeat(np.arange(len(boxes)), copies)
    base = boxes[source]
    w, h = base[:, 2] - base[:, 0], base[:, 3] - base[:, 1]
    cx = base[:, 0] + 0.5 * w + rng.uniform(-0.05, 0.05, len(base)) * w
    cy = base[:, 1] + 0.5 * h + rng.uniform(-0.05, 0.05, len(base)) * h
    w = w * np.exp(rng.uniform(-0.1, 0.1, len(base)))
    h = h * np.exp(rng.uniform(-0.1, 0.1, len(base)))
    jittered = clip_boxes(np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1),
                          width, height)
    keep = valid_rows(jittered)
    return jittered[keep], source[keep]


def gen_synthetic(spec):
    """
    Generates a manifest, its proposals and one feature store per pseudo-model.

    Proposals of each image come in three runs: the ground-truth boxes, jittered copies of them
    and background boxes that share no area with any ground-truth box.

    Returns:
        tuple: (DatasetManifest, list of Proposal, dict of model name to FeatureStore).
    """
    rng = np.random.default_rng(spec.seed)
    records, proposals, rows = [], [], []
    max_side = min(spec.max_side, spec.width // 2, spec.height // 2)
    for index in range(spec.n_images):
        image_id = f"syn_{index:06d}"
        wanted = int(rng.integers(spec.min_boxes, spec.max_boxes + 1))
        gt_boxes = box_array([])
        labels = []
        for _ in range(wanted):
            placed = place_boxes(rng, spec.width, spec.height, 1, gt_boxes, min_side=spec.min_side,
                                 max_side=max(max_side, spec.min_side))
            if placed:
                gt_boxes = np.vstack([gt_boxes, [placed[0].as_list()]])
                labels.append(int(rng.integers(len(spec.classes))))
        annotations = [Annotation(bbox=_to_bbox(box), label=ClassLabel.voc(spec.classes[label]),
                                  source=DatasetSource.SYNTHETIC) for box, label in zip(gt_boxes, labels)]
        records.append(ImageRecord(image_id, spec.width, spec.height, annotations, DatasetSource.SYNTHETIC))

        jittered, owners = jitter_boxes(rng, gt_boxes, spec.jitter_per_box, spec.width, spec.height)
        background = place_boxes(rng, spec.width, spec.height, spec.background_per_image, gt_boxes,
                                 min_side=30, max_side=max(max_side, 30))
        boxes = np.vstack([gt_boxes, jittered, box_array(background)])
        targets = np.zeros((len(boxes), GEOMETRY_CHANNELS))
        onehot = np.zeros((len(boxes), len(spec.classes)))
        for row, label in enumerate(labels):
            onehot[row, label] = 1.0
        offset = len(gt_boxes)
        if len(jittered):
            targets[offset:offset + len(jittered)] = encode_boxes(jittered, gt_boxes[owners])
            onehot[offset + np.arange(len(jittered)), np.array(labels)[owners]] = 1.0
        rows.append(np.hstack([onehot, targets]))
        proposals += [Proposal(image_id, i, _to_bbox(box), ProposalSource.SYNTHETIC) for i, box in enumerate(boxes)]

    base = np.vstack(rows) if rows else np.zeros((0, spec.feature_dim))
    keys = [p.key for p in proposals]
    stores = {}
    for number, name in enumerate(spec.model_names()):
        matrix = base
        if spec.sigma > 0:
            matrix = base + np.random.default_rng([spec.seed, number]).normal(0.0, spec.sigma, base.shape)
        matrix = spec.feature_scale * matrix
        stores[name] = FeatureStore(name, spec.feature_dim, keys, matrix)
    manifest = DatasetManifest("synthetic", records)
    logging.info(f"Generated {len(records)} synthetic images, "
                 f"{sum(len(r.annotations) for r in records)} boxes, {len(proposals)} proposals, "
                 f"{len(stores)} feature stores of dim {spec.feature_dim}")
    return manifest, proposals, stores


def _to_bbox(row):
    return BBox(*(float(value) for value in row))
