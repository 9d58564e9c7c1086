"""
Turning parsed VOC and COCO manifests into one SVM-ready training set: class mapping,
small-object filtering, background sampling and merging.
"""
import logging
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from detens.config import Config
from detens.core import (VOC_CLASSES, Annotation, AnnotationKind, BBox, ClassLabel, DatasetManifest,
                         DatasetSource, Namespace, box_array, pairwise_intersection)
from detens.errors import MergeConflictError, ParameterError, PreconditionError, ValidationError

_RENAMES = {
    "airplane": "aeroplane",
    "bicycle": "bike",
    "motorcycle": "motorbike",
    "couch": "sofa",
}


@dataclass(frozen=True)
class ClassMap:
    """
    COCO category name to VOC class name, one entry per VOC class.
    """

    entries: tuple

    def __post_init__(self):
        entries = tuple((coco, voc) for coco, voc in self.entries)
        object.__setattr__(self, "entries", entries)
        if len(entries) != len(VOC_CLASSES):
            raise ValidationError(f"A class map needs {len(VOC_CLASSES)} entries, got {len(entries)}")
        if sorted(voc for _, voc in entries) != sorted(VOC_CLASSES):
            raise ValidationError("Class map targets must be the VOC classes, each exactly once")
        for coco, _ in entries:
            ClassLabel.coco(coco)

    @classmethod
    def default(cls):
        inverse = {voc: coco for coco, voc in _RENAMES.items()}
        return cls(tuple((inverse.get(voc, voc), voc) for voc in VOC_CLASSES))

    def lookup(self, coco_name):
        return dict(self.entries).get(coco_name)


def map_coco_labels(manifest, class_map=None):
    """
    Relabels mappable COCO annotations into the voc namespace and flags the rest as not
    SVM-trainable. Boxes are left untouched.

    Raises:
        PreconditionError: If the manifest already holds voc-namespace labels.
    """
    class_map = class_map or ClassMap.default()
    lookup = dict(class_map.entries)
    records, mapped, unmapped = [], 0, 0
    for record in manifest:
        annotations = []
        for annotation in record.annotations:
            if annotation.label is None:
                annotations.append(annotation)
                continue
            if annotation.label.namespace is not Namespace.COCO:
                raise PreconditionError(
                    f"Image {record.image_id} already has a {annotation.label.namespace} label; "
                    f"map_coco_labels expects coco labels only")
            voc_name = lookup.get(annotation.label.name)
            if voc_name is None:
                annotations.append(replace(annotation, svm_trainable=False))
                unmapped += 1
            else:
                annotations.append(replace(annotation, label=ClassLabel.voc(voc_name)))
                mapped += 1
        records.append(record.with_annotations(annotations))
    logging.info(f"Mapped {mapped} COCO annotations to VOC classes, {unmapped} left unmapped")
    return manifest.with_records(records)


def filter_small_objects(manifest, min_side=Config.MIN_OBJECT_SIDE, sources=None):
    """
    Removes ground-truth boxes narrower or shorter than ``min_side`` pixels.

    Parameters:
        manifest (DatasetManifest): Input manifest; images are kept even if left empty.
        min_side (float): Smallest allowed width and height.
        sources (iterable, optional): Only annotations from these dataset sources are filtered;
            None filters every source.

    Returns:
        tuple: (filtered manifest, number of boxes removed).
    """
    if min_side <= 0:
        raise ParameterError(f"min_side must be positive, got {min_side}")
    sources = None if sources is None else {DatasetSource(source) for source in sources}

    def too_small(annotation):
        if not annotation.is_ground_truth:
            return False
        if sources is not None and annotation.source not in sources:
            return False
        return annotation.bbox.width < min_side or annotation.bbox.height < min_side

    records, removed = [], 0
    for record in manifest:
        kept = [annotation for annotation in record.annotations if not too_small(annotation)]
        removed += len(record.annotations) - len(kept)
        records.append(record.with_annotations(kept) if len(kept) != len(record.annotations) else record)
    logging.info(f"Removed {removed} ground-truth boxes smaller than {min_side}px from {manifest.name}")
    return manifest.with_records(records), removed


def drop_images_without_trainable(manifest):
    records = [record for record in manifest
               if any(annotation.svm_trainable for annotation in record.ground_truth)]
    logging.info(f"Dropped {len(manifest) - len(records)} images without SVM-trainable boxes")
    return manifest.with_records(records)


def place_boxes(rng, width, height, count, obstacles, max_attempts=Config.NEGATIVE_MAX_ATTEMPTS,
                min_side=Config.NEGATIVE_MIN_SIDE, max_side=Config.NEGATIVE_MAX_SIDE):
    """
    Rejection-samples up to ``count`` integer boxes inside the image that do not intersect any
    obstacle box. Each box gets ``max_attempts`` tries.

    Returns:
        list: The placed BBox objects, possibly fewer than ``count``.
    """
    obstacles = np.asarray(obstacles, dtype=np.float64).reshape(-1, 4)
    side_w, side_h = min(width, max_side), min(height, max_side)
    if side_w < min_side or side_h < min_side:
        return []
    placed = []
    for _ in range(count):
        for _ in range(max_attempts):
            w = int(rng.integers(min_side, side_w + 1))
            h = int(rng.integers(min_side, side_h + 1))
            x = int(rng.integers(0, width - w + 1))
            y = int(rng.integers(0, height - h + 1))
            candidate = np.array([[x, y, x + w, y + h]], dtype=np.float64)
            if obstacles.size == 0 or pairwise_intersection(candidate, obstacles).max() == 0.0:
                placed.append(BBox(float(x), float(y), float(x + w), float(y + h)))
                break
    return placed


class NegativeSampler:
    """
    Samples background boxes that share no area with any ground-truth box of their image.

    Attributes:
        per_gt (int): Negatives requested per ground-truth box.
        max_attempts (int): Rejection-sampling tries per negative.
    """

    def __init__(self, per_gt=Config.NEGATIVES_PER_GT, max_attempts=Config.NEGATIVE_MAX_ATTEMPTS):
        if per_gt < 0:
            raise ParameterError(f"per_gt must be >= 0, got {per_gt}")
        self.per_gt = per_gt
        self.max_attempts = max_attempts

    def sample(self, record, seed=Config.SEED):
        """
        Samples negatives for one image.

        Parameters:
            record (ImageRecord): The image and its ground truth.
            seed (int or sequence): Seed for the random generator.

        Returns:
            list: Sampled-negative Annotations, each inside the image and disjoint from every
            ground-truth box. A shortfall is logged as a warning.
        """
        ground_truth = record.ground_truth
        wanted = self.per_gt * len(ground_truth)
        if wanted == 0:
            return []
        rng = np.random.default_rng(seed)
        obstacles = box_array([annotation.bbox for annotation in ground_truth])
        boxes = place_boxes(rng, record.width, record.height, wanted, obstacles, self.max_attempts)
        if len(boxes) < wanted:
            logging.warning(f"Negative sampling shortfall for image {record.image_id}: "
                            f"placed {len(boxes)} of {wanted}")
        return [Annotation(bbox=box, label=None, source=record.source, kind=AnnotationKind.SAMPLED_NEGATIVE)
                for box in boxes]

    def sample_manifest(self, manifest, seed=Config.SEED):
        """
        Appends sampled negatives to every record. Each image's generator is seeded from
        ``(seed, crc32(image_id))`` so results do not depend on record order.
        """
        records, total = [], 0
        for record in manifest:
            negatives = self.sample(record, seed=[seed, zlib.crc32(record.image_id.encode("utf-8"))])
            total += len(negatives)
            records.append(record.with_annotations(record.annotations + tuple(negatives)))
        logging.info(f"Sampled {total} negatives across {len(manifest)} images")
        return manifest.with_records(records)


def sample_negatives(record, per_gt=Config.NEGATIVES_PER_GT, seed=Config.SEED,
                     max_attempts=Config.NEGATIVE_MAX_ATTEMPTS):
    return NegativeSampler(per_gt, max_attempts).sample(record, seed)


def sample_manifest_negatives(manifest, per_gt=Config.NEGATIVES_PER_GT, seed=Config.SEED,
                              max_attempts=Config.NEGATIVE_MAX_ATTEMPTS):
    return NegativeSampler(per_gt, max_attempts).sample_manifest(manifest, seed)


def merge_manifests(manifests, name=None):
    """
    Concatenates manifests in order.

    Raises:
        MergeConflictError: If two inputs share an image id.
        PreconditionError: If a trainable annotation still carries a coco label.
    """
    owners, records = {}, []
    for manifest in manifests:
        for record in manifest:
            if record.image_id in owners:
                raise MergeConflictError(
                    f"Image id {record.image_id} appears in both {owners[record.image_id]} and {manifest.name}")
            owners[record.image_id] = manifest.name
            for annotation in record.ground_truth:
                if annotation.label.namespace is Namespace.COCO and annotation.svm_trainable:
                    raise PreconditionError(
                        f"Image {record.image_id} in {manifest.name} has an unmapped coco label "
                        f"'{annotation.label.name}'; map classes before merging")
            records.append(record)
    name = name or "+".join(manifest.name for manifest in manifests) or "merged"
    logging.info(f"Merged {len(manifests)} manifests into {name} with {len(records)} records")
    return DatasetManifest(name, records)


@dataclass(frozen=True)
class ManifestSummary:
    name: str
    images: int
    images_with_trainable: int
    ground_truth: int
    trainable: int
    unmapped: int
    difficult: int
    sampled_negatives: int
    by_source: dict = field(default_factory=dict)

    def to_dict(self):
        return {key: getattr(self, key) for key in self.__dataclass_fields__}


def summarize_manifest(manifest):
    """
    Counts images and boxes. ``images`` and ``images_with_trainable`` are the two candidate
    readings of a training set's effective size.
    """
    counts = dict(images_with_trainable=0, ground_truth=0, trainable=0, unmapped=0, difficult=0,
                  sampled_negatives=0)
    by_source = {}
    for record in manifest:
        by_source[str(record.source)] = by_source.get(str(record.source), 0) + 1
        has_trainable = False
        for annotation in record.annotations:
            if not annotation.is_ground_truth:
                counts["sampled_negatives"] += 1
                continue
            counts["ground_truth"] += 1
            counts["difficult"] += int(annotation.difficult)
            if annotation.svm_trainable:
                counts["trainable"] += 1
                has_trainable = True
            else:
                counts["unmapped"] += 1
        counts["images_with_trainable"] += int(has_trainable)
    return ManifestSummary(name=manifest.name, images=len(manifest), by_source=by_source, **counts)
