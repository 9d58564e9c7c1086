"""
Per-class training pools built from a manifest, its proposals and one feature store.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from detens.config import Config
from detens.core import VOC_CLASSES, Namespace, box_array, pairwise_iou
from detens.errors import ValidationError
from detens.ingest.proposals import group_by_image


@dataclass
class ClassPool:
    """
    Everything the SVM and the box regressor of one class train on.

    Attributes:
        positives (numpy.ndarray): (n, d) features of proposals that coincide with a trainable GT box.
        negative_pools (list): One (m_i, d) matrix per image of background proposals.
        regression_features (numpy.ndarray): (r, d) features of proposals matched to a GT box.
        regression_proposals (numpy.ndarray): (r, 4) their boxes.
        regression_gts (numpy.ndarray): (r, 4) the matched GT boxes.
    """

    class_name: str
    feature_dim: int
    positive_keys: list = field(default_factory=list)
    negative_keys: list = field(default_factory=list)
    regression_keys: list = field(default_factory=list)
    regression_proposals: np.ndarray = None
    regression_gts: np.ndarray = None
    positives: np.ndarray = None
    negative_pools: list = field(default_factory=list)
    regression_features: np.ndarray = None

    @property
    def negative_count(self):
        return sum(len(keys) for keys in self.negative_keys)


def build_training_pools(manifest, proposals, store, classes=None, neg_iou=Config.SVM_NEGATIVE_IOU,
                         match_iou=Config.BBOX_MATCH_IOU, positive_iou=Config.SVM_POSITIVE_IOU):
    """
    Splits proposals into SVM positives, per-image SVM negatives and regression pairs for each class.

    Parameters:
        manifest (DatasetManifest): Images with voc-namespace ground truth.
        proposals (list): Proposal objects for the manifest's images.
        store (FeatureStore): Features for the proposals; proposals without one are skipped.
        classes (iterable, optional): Classes to build; defaults to all twenty.
        neg_iou (float): A negative overlaps every same-class GT box below this.
        match_iou (float): Smallest overlap of a regression pair.
        positive_iou (float): Overlap at which a proposal counts as the GT box itself.

    Returns:
        dict: Class name to ClassPool, in the order of ``classes``.
    """
    classes = list(classes or VOC_CLASSES)
    for class_name in classes:
        if class_name not in VOC_CLASSES:
            raise ValidationError(f"'{class_name}' is not a VOC class")
    pools = {name: ClassPool(name, store.feature_dim) for name in classes}
    regression_pairs = {name: ([], []) for name in classes}
    grouped = group_by_image(proposals)
    missing = 0

    for record in manifest:
        candidates = [p for p in grouped.get(record.image_id, []) if p.key in store]
        missing += len(grouped.get(record.image_id, [])) - len(candidates)
        if not candidates:
            continue
        boxes = box_array([p.bbox for p in candidates])
        gts = record.ground_truth
        overlaps = pairwise_iou(boxes, box_array([a.bbox for a in gts]))
        untrainable = [j for j, a in enumerate(gts) if not a.svm_trainable or a.label.namespace is not Namespace.VOC]
        near_untrainable = overlaps[:, untrainable].max(axis=1) >= neg_iou if untrainable else \
            np.zeros(len(candidates), dtype=bool)

        for class_name in classes:
            same = [j for j, a in enumerate(gts) if j not in untrainable and a.label.name == class_name]
            matchable = [j for j in same if not gts[j].difficult]
            pool = pools[class_name]
            best = overlaps[:, same].max(axis=1) if same else np.zeros(len(candidates))
            negatives = [p.key for i, p in enumerate(candidates) if best[i] < neg_iou and not near_untrainable[i]]
            if negatives:
                pool.negative_keys.append(negatives)
            if not matchable:
                continue
            sub = overlaps[:, matchable]
            nearest = sub.argmax(axis=1)
            top = sub.max(axis=1)
            for i, proposal in enumerate(candidates):
                if top[i] >= positive_iou:
                    pool.positive_keys.append(proposal.key)
                if top[i] >= match_iou:
                    pool.regression_keys.append(proposal.key)
                    regression_pairs[class_name][0].append(proposal.bbox)
                    regression_pairs[class_name][1].append(gts[matchable[nearest[i]]].bbox)

    if missing:
        logging.warning(f"{missing} proposals have no {store.model_name} feature and were left out of the pools")
    for class_name, pool in pools.items():
        pool.positives = store.rows_for(pool.positive_keys)
        pool.negative_pools = [store.rows_for(keys) for keys in pool.negative_keys]
        pool.regression_features = store.rows_for(pool.regression_keys)
        pool.regression_proposals = box_array(regression_pairs[class_name][0])
        pool.regression_gts = box_array(regression_pairs[class_name][1])
        logging.debug(f"{class_name}: {len(pool.positive_keys)} positives, {pool.negative_count} negatives in "
                      f"{len(pool.negative_keys)} images, {len(pool.regression_keys)} regression pairs")
    return pools
