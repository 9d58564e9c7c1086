"""
Scoring proposals with per-class SVMs, averaging several networks and non-maximum suppression.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from detens.config import Config
from detens.core import VOC_CLASSES, VOC_DEVKIT_NAMES, BBox, box_array, pairwise_iou
from detens.errors import AlignmentError, ParameterError, ValidationError
from detens.ingest.proposals import group_by_image
from detens.learn.regression import clip_boxes, valid_rows
from detens.storage import Storage

_CLASS_INDEX = {name: index for index, name in enumerate(VOC_CLASSES)}


@dataclass(frozen=True, eq=False)
class ScoredBox:
    """
    One proposal with a score per VOC class and, optionally, a regressed box per class.

    ``scores`` has shape (20,) and holds NaN for classes the model has no SVM for; ``regressed``
    has shape (20, 4).
    """

    image_id: str
    box_index: int
    bbox: BBox
    scores: np.ndarray = field(repr=False)
    regressed: np.ndarray | None = field(default=None, repr=False)
    provenance: str = ""

    def __post_init__(self):
        scores = np.array(self.scores, dtype=np.float64).reshape(-1)
        if scores.size != len(VOC_CLASSES):
            raise ValidationError(f"Score vector of {self.key} has {scores.size} entries, expected {len(VOC_CLASSES)}")
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)
        if self.regressed is not None:
            regressed = np.array(self.regressed, dtype=np.float64).reshape(len(VOC_CLASSES), 4)
            if not valid_rows(regressed).all():
                raise ValidationError(f"Regressed boxes of {self.key} are not all valid")
            regressed.setflags(write=False)
            object.__setattr__(self, "regressed", regressed)

    @property
    def key(self):
        return self.image_id, self.box_index

    def score(self, class_name):
        return float(self.scores[_CLASS_INDEX[class_name]])


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_name: str
    bbox: BBox
    score: float

    def __post_init__(self):
        if self.class_name not in VOC_CLASSES:
            raise ValidationError(f"'{self.class_name}' is not a VOC class")

    def to_dict(self):
        return {"image_id": self.image_id, "class": self.class_name, "bbox": self.bbox.as_list(),
                "score": self.score}

    @classmethod
    def from_dict(cls, data):
        return cls(str(data["image_id"]), data["class"], BBox.from_list(data["bbox"]), float(data["score"]))


@dataclass
class ModelSet:
    """
    One network's contribution to an ensemble: its SVMs and box regressors (class name to model)
    and the feature store they read.
    """

    name: str
    svms: dict
    regressors: dict
    store: object


def exact_mean(stack):
    """
    Mean over axis 0 that does not depend on the order of the stacked entries and returns a
    shared value unchanged when all entries are equal.
    """
    stack = np.sort(np.asarray(stack, dtype=np.float64), axis=0)
    if len(stack) == 0:
        raise ValidationError("Cannot average an empty set")
    first = stack[0]
    return first + (stack[1:] - first).sum(axis=0) / len(stack)


def score_proposals(models, store, proposals, provenance=None):
    """
    Scores every proposal with every class SVM.

    Parameters:
        models (dict): Class name to SvmModel; classes without a model score NaN.
        store (FeatureStore): Features of the proposals.
        proposals (list): Proposal objects.

    Returns:
        list: One ScoredBox per proposal, in input order.

    Raises:
        CoverageError: Naming the first proposal without a feature.
    """
    features = store.rows_for([p.key for p in proposals])
    scores = np.full((len(proposals), len(VOC_CLASSES)), np.nan)
    for class_name, model in models.items():
        scores[:, _CLASS_INDEX[class_name]] = model.decision_function(features)
    provenance = provenance or store.model_name
    return [ScoredBox(p.image_id, p.box_index, p.bbox, scores[i], provenance=provenance)
            for i, p in enumerate(proposals)]


def regress_proposals(regressors, store, proposals, image_sizes=None):
    """
    Regressed boxes of shape (n, 20, 4). Classes without a regressor keep the proposal box.
    """
    boxes = box_array([p.bbox for p in proposals])
    regressed = np.repeat(boxes[:, None, :], len(VOC_CLASSES), axis=1)
    if not regressors or not proposals:
        return regressed
    features = store.rows_for([p.key for p in proposals])
    for class_name, regressor in regressors.items():
        regressed[:, _CLASS_INDEX[class_name]] = regressor.refine(boxes, features)
    if image_sizes:
        for i, p in enumerate(proposals):
            if p.image_id in image_sizes:
                clipped = clip_boxes(regressed[i], *image_sizes[p.image_id])
                ok = valid_rows(clipped)
                regressed[i, ok] = clipped[ok]
                regressed[i, ~ok] = boxes[i]
    return regressed


def _check_aligned(per_model):
    base = per_model[0]
    for other in per_model[1:]:
        if len(other) != len(base):
            raise AlignmentError(f"Model outputs differ in length: {len(base)} and {len(other)}")
        for a, b in zip(base, other):
            if a.key != b.key:
                raise AlignmentError(f"Model outputs are not aligned: first mismatched key {a.key} vs {b.key}")


def average_scores(per_model):
    """
    Averages aligned ScoredBox lists proposal by proposal.

    Returns:
        list: ScoredBox objects with provenance ``ensemble(k)``; regressed boxes are averaged too
        when every model carries them.

    Raises:
        AlignmentError: If the lists do not cover the same proposals in the same order.
    """
    if not per_model:
        raise ValidationError("average_scores needs at least one model")
    _check_aligned(per_model)
    k = len(per_model)
    scores = exact_mean([[box.scores for box in boxes] for boxes in per_model])
    with_boxes = all(box.regressed is not None for boxes in per_model for box in boxes)
    regressed = average_box_arrays([[box.regressed for box in boxes] for boxes in per_model]) if with_boxes else None
    return [ScoredBox(box.image_id, box.box_index, box.bbox, scores[i],
                      regressed[i] if regressed is not None else None, f"ensemble({k})")
            for i, box in enumerate(per_model[0])]


def average_regressed_boxes(boxes):
    """
    Coordinate-wise mean of several networks' regressed boxes for one proposal and class.
    """
    if len(boxes) == 0:
        raise ValidationError("average_regressed_boxes needs at least one box")
    return BBox(*exact_mean(box_array(list(boxes))).tolist())


def average_box_arrays(per_model):
    """
    Vectorised average_regressed_boxes: ``k`` arrays of shape (n, ..., 4) to one.
    """
    return exact_mean(per_model)


def nms_indices(boxes, scores, threshold=Config.NMS_THRESHOLD):
    """
    Greedy non-maximum suppression over (n, 4) boxes.

    Returns:
        numpy.ndarray: Indices of the kept boxes, highest score first; equal scores keep input order.
    """
    if not 0 < threshold < 1:
        raise ParameterError(f"NMS threshold must lie in (0, 1), got {threshold}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    keep = []
    while order.size > 0:
        i = order[0]
        keep.append(i)
        overlaps = pairwise_iou(boxes[i], boxes[order[1:]])[0]
        order = order[1:][overlaps <= threshold]
    return np.array(keep, dtype=np.int64)


def nms(detections, iou_threshold=Config.NMS_THRESHOLD):
    """
    Non-maximum suppression over detections of one class in one image.

    Returns:
        list: Kept detections, by confidence descending.
    """
    if not detections:
        return []
    keep = nms_indices(box_array([d.bbox for d in detections]), [d.score for d in detections], iou_threshold)
    return [detections[i] for i in keep]


class Ensemble:
    """
    Runs several networks' models over the same proposals and merges their outputs.

    Attributes:
        members (list): ModelSet objects, one per network.
        nms_threshold (float): IoU above which lower-scored boxes are suppressed.
        score_floor (float): Averaged scores below this are dropped before NMS.
        nms_first (bool): Suppress on proposal boxes before taking the averaged regressed boxes.
        jobs (int): Worker threads for the per-image stage.
    """

    def __init__(self, members, nms_threshold=Config.NMS_THRESHOLD, score_floor=Config.SCORE_FLOOR,
                 nms_first=False, jobs=Config.JOBS):
        if not members:
            raise ValidationError("An ensemble needs at least one member")
        if not 0 < nms_threshold < 1:
            raise ParameterError(f"NMS threshold must lie in (0, 1), got {nms_threshold}")
        self.members = members
        self.nms_threshold = nms_threshold
        self.score_floor = score_floor
        self.nms_first = nms_first
        self.jobs = jobs

    def combine(self, proposals, image_sizes=None):
        """
        Scores and regresses the proposals with every member and averages the results.

        Returns:
            list: Averaged ScoredBox objects with regressed boxes.
        """
        per_model = []
        for member in self.members:
            scored = score_proposals(member.svms, member.store, proposals, member.name)
            regressed = regress_proposals(member.regressors, member.store, proposals, image_sizes)
            per_model.append([ScoredBox(s.image_id, s.box_index, s.bbox, s.scores, regressed[i], s.provenance)
                              for i, s in enumerate(scored)])
            logging.debug(f"Member {member.name}: scored and regressed {len(proposals)} proposals")
        logging.info(f"Averaging {len(per_model)} x {len(proposals)} regressed boxes into {len(proposals)}")
        return average_scores(per_model)

    def run(self, proposals, image_sizes=None):
        """
        Full test-time pipeline: combine members, drop low scores, NMS per image and class.

        Returns:
            list: Detections grouped by image (proposal order), class order, then confidence descending.
        """
        averaged = self.combine(proposals, image_sizes)
        groups = list(group_by_image(averaged).values())
        with ThreadPoolExecutor(max_workers=self.jobs) as executor:
            results = list(executor.map(self._detect_image, groups))
        detections = [detection for result in results for detection in result]
        logging.info(f"Ensemble of {len(self.members)} produced {len(detections)} detections "
                     f"over {len(groups)} images")
        return detections

    def _detect_image(self, boxes):
        scores = np.vstack([box.scores for box in boxes])
        proposals = box_array([box.bbox for box in boxes])
        regressed = np.stack([box.regressed for box in boxes])
        detections = []
        for c, class_name in enumerate(VOC_CLASSES):
            column = scores[:, c]
            candidates = np.flatnonzero(~np.isnan(column) & (column >= self.score_floor))
            if candidates.size == 0:
                continue
            suppress_on = proposals if self.nms_first else regressed[:, c]
            keep = candidates[nms_indices(suppress_on[candidates], column[candidates], self.nms_threshold)]
            detections += [Detection(boxes[i].image_id, class_name, BBox(*regressed[i, c].tolist()),
                                     float(column[i])) for i in keep]
        return detections


def run_ensemble(proposals, members, nms_threshold=Config.NMS_THRESHOLD, score_floor=Config.SCORE_FLOOR,
                 nms_first=False, image_sizes=None, jobs=Config.JOBS):
    return Ensemble(members, nms_threshold, score_floor, nms_first, jobs).run(proposals, image_sizes)


def detections_by_class(detections):
    grouped = {}
    for detection in detections:
        grouped.setdefault(detection.class_name, []).append(detection)
    return grouped


def read_detections(path, storage=None):
    storage = storage or Storage()
    detections = [Detection.from_dict(row) for row in storage.read_jsonl(path)]
    logging.info(f"Loaded {len(detections)} detections from {path}")
    return detections


def write_detections(path, detections, storage=None):
    storage = storage or Storage()
    logging.info(f"Writing {len(detections)} detections to {path}")
    return storage.write_jsonl(path, (detection.to_dict() for detection in detections))


def write_voc_results(directory, detections, storage=None, prefix="comp4_det_val_"):
    """
    Writes one VOC devkit result file per class: ``image_id score x_min y_min x_max y_max`` with
    1-based inclusive pixel coordinates.
    """
    storage = storage or Storage()
    written = []
    for class_name, group in detections_by_class(detections).items():
        lines = [f"{d.image_id} {d.score:.6f} {d.bbox.x_min + 1:.1f} {d.bbox.y_min + 1:.1f} "
                 f"{d.bbox.x_max:.1f} {d.bbox.y_max:.1f}\n" for d in group]
        name = VOC_DEVKIT_NAMES.get(class_name, class_name)
        written.append(storage.write_text(storage.resolve(directory) / f"{prefix}{name}.txt", "".join(lines)))
    return written
