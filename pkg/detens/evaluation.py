"""
PASCAL VOC evaluation: matching detections to ground truth, average precision, mAP and the
results table.
"""
import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import StrEnum

import numpy as np

from detens.config import Config
from detens.core import VOC_CLASSES, Namespace, box_array, pairwise_iou
from detens.errors import ParameterError, PreconditionError, ValidationError
from detens.storage import Storage

# Results table headers, in VOC_CLASSES order.
TABLE_COLUMNS = ("aero", "bike", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow", "table",
                 "dog", "horse", "motor", "person", "plant", "sheep", "sofa", "train", "tv")


class MatchFlag(StrEnum):
    TRUE_POSITIVE = "true_positive"
    FALSE_POSITIVE = "false_positive"
    IGNORED = "ignored"


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    bbox: object
    difficult: bool = False


@dataclass(frozen=True)
class MatchResult:
    flags: tuple
    matched: tuple

    @property
    def true_positives(self):
        return sum(flag is MatchFlag.TRUE_POSITIVE for flag in self.flags)

    def counted(self):
        """
        TP/FP flags in confidence order with ignored detections left out.
        """
        return [flag is MatchFlag.TRUE_POSITIVE for flag in self.flags if flag is not MatchFlag.IGNORED]


def match_detections(detections, gts, iou_threshold=Config.EVAL_IOU):
    """
    Greedy VOC matching of one class's detections against its ground truth.

    Parameters:
        detections (list): Detection objects sorted by score, highest first.
        gts (list): GroundTruth objects of the same class.
        iou_threshold (float): Smallest IoU of a match.

    Returns:
        MatchResult: One flag per detection; ``matched`` holds the consumed index into ``gts`` or None.

    Raises:
        PreconditionError: If the detections are not sorted by score.
    """
    scores = [d.score for d in detections]
    if any(later > earlier for earlier, later in zip(scores, scores[1:])):
        raise PreconditionError("Detections must be sorted by score, highest first")

    by_image = {}
    for index, gt in enumerate(gts):
        by_image.setdefault(gt.image_id, []).append(index)
    boxes = {image_id: box_array([gts[i].bbox for i in indices]) for image_id, indices in by_image.items()}
    consumed = set()
    flags, matched = [], []
    for detection in detections:
        indices = by_image.get(detection.image_id, [])
        if not indices:
            flags.append(MatchFlag.FALSE_POSITIVE)
            matched.append(None)
            continue
        overlaps = pairwise_iou(box_array([detection.bbox]), boxes[detection.image_id])[0]
        best, best_iou, near_difficult = None, -1.0, False
        for position, index in enumerate(indices):
            if overlaps[position] < iou_threshold:
                continue
            if gts[index].difficult:
                near_difficult = True
            elif index not in consumed and overlaps[position] > best_iou:
                best, best_iou = index, overlaps[position]
        if best is not None:
            consumed.add(best)
            flags.append(MatchFlag.TRUE_POSITIVE)
        else:
            flags.append(MatchFlag.IGNORED if near_difficult else MatchFlag.FALSE_POSITIVE)
        matched.append(best)
    return MatchResult(tuple(flags), tuple(matched))


def _as_booleans(flags):
    hits = []
    for flag in flags:
        if isinstance(flag, MatchFlag):
            if flag is not MatchFlag.IGNORED:
                hits.append(flag is MatchFlag.TRUE_POSITIVE)
        else:
            hits.append(bool(flag))
    return np.array(hits, dtype=bool)


def precision_recall(flags, n_positive_gt):
    """
    Recall and precision after each counted detection.

    Returns:
        tuple: (recall, precision) arrays of the same length as the counted flags.
    """
    hits = _as_booleans(flags)
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    recall = tp / n_positive_gt if n_positive_gt else np.zeros(len(hits))
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return recall, precision


def average_precision(flags, n_positive_gt, method=Config.AP_METHOD):
    """
    Average precision of a ranked list of TP/FP flags.

    Parameters:
        flags (list): Booleans or MatchFlag values in confidence order; ignored entries are skipped.
        n_positive_gt (int): Number of non-difficult ground-truth boxes.
        method (str): ``area`` (area under the monotonised curve) or ``11point``.

    Returns:
        float or None: AP in [0, 1], or None when the class has no positives and AP is undefined.
    """
    if n_positive_gt < 0:
        raise ParameterError(f"n_positive_gt must be >= 0, got {n_positive_gt}")
    if method not in Config.AP_METHODS:
        raise ParameterError(f"AP method must be one of {Config.AP_METHODS}, got {method}")
    if n_positive_gt == 0:
        return None
    recall, precision = precision_recall(flags, n_positive_gt)
    if recall.size == 0:
        return 0.0
    if method == "11point":
        points = [precision[recall >= t].max() if np.any(recall >= t) else 0.0 for t in np.linspace(0, 1, 11)]
        return float(np.mean(points))

    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.clip(np.sum((mrec[steps] - mrec[steps - 1]) * mpre[steps]), 0.0, 1.0))


def mean_ap(per_class_ap, classes=None):
    """
    Arithmetic mean of per-class APs.

    Parameters:
        per_class_ap (dict or sequence): Twenty APs in VOC_CLASSES order, or class name to AP.
        classes (iterable, optional): Declared subset of classes to average over.

    Raises:
        ParameterError: If the count is not twenty (without a subset) or a needed AP is undefined.
    """
    if not isinstance(per_class_ap, dict):
        values = list(per_class_ap)
        if classes is None and len(values) != len(VOC_CLASSES):
            raise ParameterError(f"mean_ap needs {len(VOC_CLASSES)} APs, got {len(values)}")
        per_class_ap = dict(zip(VOC_CLASSES, values)) if classes is None else dict(zip(classes, values))
    if classes is None:
        if sorted(per_class_ap) != sorted(VOC_CLASSES):
            raise ParameterError(f"mean_ap needs one AP per VOC class, got {len(per_class_ap)}")
        classes = VOC_CLASSES
    classes = list(classes)
    if not classes:
        raise ParameterError("mean_ap needs at least one class")
    undefined = [name for name in classes if per_class_ap.get(name) is None]
    if undefined:
        raise ParameterError(f"AP is undefined for {', '.join(undefined)}")
    return float(np.mean([per_class_ap[name] for name in classes]))


@dataclass(frozen=True)
class EvalResult:
    """
    Per-class AP (None where a class has no ground truth), the mean over defined classes and
    each class's precision/recall curve.
    """

    ap: dict
    mean_ap: float
    curves: dict = field(default_factory=dict, repr=False)
    name: str = ""
    iou_threshold: float = Config.EVAL_IOU
    ap_method: str = Config.AP_METHOD

    def __post_init__(self):
        for class_name, value in self.ap.items():
            if class_name not in VOC_CLASSES:
                raise ValidationError(f"'{class_name}' is not a VOC class")
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValidationError(f"AP of {class_name} is outside [0, 1]: {value}")

    def to_dict(self):
        return {
            "name": self.name,
            "ap": {name: self.ap.get(name) for name in VOC_CLASSES},
            "mean_ap": self.mean_ap,
            "iou_threshold": self.iou_threshold,
            "ap_method": self.ap_method,
            "curves": {name: {"recall": list(recall), "precision": list(precision)}
                       for name, (recall, precision) in self.curves.items()},
        }

    @classmethod
    def from_dict(cls, data):
        curves = {name: (tuple(curve["recall"]), tuple(curve["precision"]))
                  for name, curve in data.get("curves", {}).items()}
        return cls(dict(data["ap"]), data["mean_ap"], curves, data.get("name", ""),
                   data.get("iou_threshold", Config.EVAL_IOU), data.get("ap_method", Config.AP_METHOD))


def ground_truth_by_class(manifest):
    """
    Class name to GroundTruth list from the voc-namespace boxes of a manifest.
    """
    grouped = {name: [] for name in VOC_CLASSES}
    for record in manifest:
        for annotation in record.ground_truth:
            if annotation.label.namespace is Namespace.VOC:
                grouped[annotation.label.name].append(
                    GroundTruth(record.image_id, annotation.bbox, annotation.difficult))
    return grouped


class Evaluator:
    """
    Scores a detection set against a manifest's ground truth, one class at a time.

    Attributes:
        iou_threshold (float): Overlap needed for a true positive.
        ap_method (str): ``area`` or ``11point``.
        jobs (int): Classes evaluated concurrently.
    """

    def __init__(self, iou_threshold=Config.EVAL_IOU, ap_method=Config.AP_METHOD, jobs=Config.JOBS):
        if not 0 < iou_threshold <= 1:
            raise ParameterError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
        if ap_method not in Config.AP_METHODS:
            raise ParameterError(f"AP method must be one of {Config.AP_METHODS}, got {ap_method}")
        self.iou_threshold = iou_threshold
        self.ap_method = ap_method
        self.jobs = jobs

    def evaluate(self, detections, manifest, name=""):
        """
        Returns an EvalResult whose mAP averages the classes that have ground truth.
        """
        known = {record.image_id for record in manifest}
        stray = sum(d.image_id not in known for d in detections)
        if stray:
            logging.warning(f"{stray} detections refer to images missing from {manifest.name}; counted as false")
        gts = ground_truth_by_class(manifest)
        by_class = {name: [] for name in VOC_CLASSES}
        for detection in detections:
            by_class[detection.class_name].append(detection)

        def job(class_name):
            return class_name, self.evaluate_class(by_class[class_name], gts[class_name])

        with ThreadPoolExecutor(max_workers=self.jobs) as executor:
            outcomes = dict(executor.map(job, VOC_CLASSES))
        ap = {class_name: outcomes[class_name][0] for class_name in VOC_CLASSES}
        curves = {class_name: outcomes[class_name][1] for class_name in VOC_CLASSES
                  if outcomes[class_name][0] is not None}
        defined = [class_name for class_name in VOC_CLASSES if ap[class_name] is not None]
        if not defined:
            raise ValidationError(f"Manifest {manifest.name} has no voc ground truth to evaluate against")
        result = EvalResult(ap, mean_ap(ap, defined), curves, name, self.iou_threshold, self.ap_method)
        logging.info(f"Evaluated {len(detections)} detections on {len(defined)} classes: "
                     f"mAP {100 * result.mean_ap:.1f}")
        return result

    def evaluate_class(self, detections, gts):
        order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
        ranked = [detections[i] for i in order]
        result = match_detections(ranked, gts, self.iou_threshold)
        positives = sum(not gt.difficult for gt in gts)
        ap = average_precision(result.flags, positives, self.ap_method)
        if ap is None:
            if ranked:
                logging.debug(f"{len(ranked)} detections of a class without ground truth; AP undefined")
            return None, ((), ())
        recall, precision = precision_recall(result.flags, positives)
        return ap, (tuple(recall.tolist()), tuple(precision.tolist()))


def evaluate_detections(detections, manifest, iou_threshold=Config.EVAL_IOU, ap_method=Config.AP_METHOD,
                        name=""):
    return Evaluator(iou_threshold, ap_method).evaluate(detections, manifest, name)


def _percent(value):
    return "-" if value is None else f"{100 * value:.1f}"


def render_table(results):
    """
    Fixed-width text table: one row per result, the twenty class columns then mAP, in percent.

    Parameters:
        results (list): EvalResult objects; each row is labelled with the result's name.
    """
    if not results:
        raise ParameterError("render_table needs at least one result")
    label_width = max([len("config")] + [len(result.name) for result in results])
    widths = [max(len(column), 5) for column in TABLE_COLUMNS + ("mAP",)]
    header = "config".ljust(label_width) + "".join(
        " " + column.rjust(width) for column, width in zip(TABLE_COLUMNS + ("mAP",), widths))
    lines = [header]
    for result in results:
        cells = [_percent(result.ap.get(name)) for name in VOC_CLASSES] + [_percent(result.mean_ap)]
        lines.append(result.name.ljust(label_width) + "".join(
            " " + cell.rjust(width) for cell, width in zip(cells, widths)))
    return "\n".join(lines) + "\n"


def render_json(results):
    return json.dumps([result.to_dict() for result in results], indent=2) + "\n"


def parse_json(text):
    data = json.loads(text)
    if isinstance(data, dict):
        data = [data]
    return [EvalResult.from_dict(item) for item in data]


def render_pr_csv(recall, precision):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["recall", "precision"])
    writer.writerows(zip(recall, precision))
    return buffer.getvalue()


def write_pr_curves(directory, result, storage=None):
    """
    Writes ``pr_<class>.csv`` (recall, precision) for every class with a defined AP.
    """
    storage = storage or Storage()
    written = []
    for class_name, (recall, precision) in result.curves.items():
        path = storage.resolve(directory) / f"pr_{class_name.replace(' ', '_')}.csv"
        written.append(storage.write_text(path, render_pr_csv(recall, precision)))
    logging.info(f"Wrote {len(written)} precision/recall curves to {directory}")
    return written
