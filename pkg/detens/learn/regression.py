"""
Class-specific bounding-box regression.

Targets are the center offsets normalised by proposal size and the log size ratios:
``t_x = (Gx - Px) / Pw``, ``t_y = (Gy - Py) / Ph``, ``t_w = ln(Gw / Pw)``, ``t_h = ln(Gh / Ph)``.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from detens.config import Config
from detens.core import VOC_CLASSES, BBox, box_array
from detens.errors import DegenerateBoxError, DegenerateTrainingError, DimensionMismatchError, SolverError, \
    ValidationError


@dataclass(frozen=True)
class RegressionTarget:
    t_x: float
    t_y: float
    t_w: float
    t_h: float

    def __post_init__(self):
        if not all(math.isfinite(value) for value in self.as_tuple()):
            raise ValidationError(f"Regression targets must be finite: {self.as_tuple()}")

    def as_tuple(self):
        return self.t_x, self.t_y, self.t_w, self.t_h


def _as_boxes(boxes):
    if isinstance(boxes, np.ndarray):
        return boxes.astype(np.float64, copy=False).reshape(-1, 4)
    return box_array(list(boxes))


def encode_boxes(proposals, gts):
    """
    Regression targets (n, 4) taking each proposal row onto the matching ground-truth row.
    """
    p, g = _as_boxes(proposals), _as_boxes(gts)
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    gw, gh = g[:, 2] - g[:, 0], g[:, 3] - g[:, 1]
    return np.stack([
        ((g[:, 0] + 0.5 * gw) - (p[:, 0] + 0.5 * pw)) / pw,
        ((g[:, 1] + 0.5 * gh) - (p[:, 1] + 0.5 * ph)) / ph,
        np.log(gw / pw),
        np.log(gh / ph),
    ], axis=1)


def decode_boxes(proposals, targets):
    """
    Applies (n, 4) targets to (n, 4) proposals. Rows whose targets are all zero come back unchanged.
    """
    p = _as_boxes(proposals)
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    cx = p[:, 0] + 0.5 * pw + t[:, 0] * pw
    cy = p[:, 1] + 0.5 * ph + t[:, 1] * ph
    with np.errstate(over="ignore"):
        w = pw * np.exp(t[:, 2])
        h = ph * np.exp(t[:, 3])
    boxes = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    unchanged = np.all(t == 0.0, axis=1)
    boxes[unchanged] = p[unchanged]
    return boxes


def clip_boxes(boxes, width, height):
    boxes = boxes.copy()
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0.0, float(width))
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0.0, float(height))
    return boxes


def valid_rows(boxes):
    return np.all(np.isfinite(boxes), axis=1) & (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])


def compute_regression_targets(proposal, gt):
    return RegressionTarget(*encode_boxes([proposal], [gt])[0].tolist())


def apply_regression(proposal, target, bounds=None):
    """
    Moves a proposal by the given targets; the inverse of compute_regression_targets.

    Parameters:
        proposal (BBox): The box to correct.
        target (RegressionTarget): Offsets and log size ratios.
        bounds (tuple, optional): (width, height) to clip the result to.

    Raises:
        DegenerateBoxError: If the corrected (and clipped) box has no area.
    """
    boxes = decode_boxes([proposal], [target.as_tuple()])
    if bounds is not None:
        boxes = clip_boxes(boxes, *bounds)
    if not valid_rows(boxes)[0]:
        raise DegenerateBoxError(f"Regression {target.as_tuple()} collapses proposal {proposal.as_list()}")
    return BBox(*boxes[0].tolist())


@dataclass(frozen=True, eq=False)
class BBoxRegressor:
    """
    Four linear predictors (t_x, t_y, t_w, t_h) over a network's features for one class.

    ``weights`` has shape (4, feature_dim), ``biases`` shape (4,).
    """

    class_name: str
    weights: np.ndarray = field(repr=False)
    biases: np.ndarray = field(repr=False)
    ridge_lambda: float = Config.RIDGE_LAMBDA
    model_name: str = ""

    def __post_init__(self):
        if self.class_name not in VOC_CLASSES:
            raise ValidationError(f"'{self.class_name}' is not a VOC class")
        weights = np.array(self.weights, dtype=np.float64).reshape(4, -1)
        biases = np.array(self.biases, dtype=np.float64).reshape(4)
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(biases))):
            raise ValidationError(f"Regressor for {self.class_name} has non-finite parameters")
        if self.ridge_lambda < 0:
            raise ValidationError(f"ridge_lambda must be >= 0, got {self.ridge_lambda}")
        weights.setflags(write=False)
        biases.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)

    @classmethod
    def identity(cls, class_name, feature_dim, model_name=""):
        return cls(class_name, np.zeros((4, feature_dim)), np.zeros(4), 0.0, model_name)

    @property
    def feature_dim(self):
        return int(self.weights.shape[1])

    def predict_targets(self, features):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.feature_dim:
            raise DimensionMismatchError(
                f"Regressor for {self.class_name} expects {self.feature_dim}-d features, got shape {features.shape}")
        return features @ self.weights.T + self.biases

    def refine(self, proposals, features, bounds=None):
        """
        Regressed boxes (n, 4) for the given proposals. Boxes that collapse after clipping fall
        back to their proposal.
        """
        proposals = _as_boxes(proposals)
        boxes = decode_boxes(proposals, self.predict_targets(features))
        if bounds is not None:
            boxes = clip_boxes(boxes, *bounds)
        bad = ~valid_rows(boxes)
        if bad.any():
            logging.debug(f"{self.class_name}: {int(bad.sum())} regressed boxes collapsed, keeping proposals")
            boxes[bad] = proposals[bad]
        return boxes


class BBoxRegressorTrainer:
    """
    Fits BBoxRegressor objects by ridge regression solved through the normal equations.

    The bias is an appended constant feature and is regularised with the weights.
    """

    def __init__(self, ridge_lambda=Config.RIDGE_LAMBDA):
        if ridge_lambda < 0:
            raise ValidationError(f"ridge_lambda must be >= 0, got {ridge_lambda}")
        self.ridge_lambda = ridge_lambda

    def train(self, features, proposals, matched_gts, class_name, model_name=""):
        """
        Parameters:
            features: (n, d) feature matrix, one row per proposal.
            proposals: n proposal boxes (list of BBox or (n, 4) array).
            matched_gts: n ground-truth boxes, each matched to its proposal.
            class_name (str): VOC class.

        Returns:
            BBoxRegressor: The fitted regressor.

        Raises:
            DegenerateTrainingError: If there are no training pairs.
            SolverError: If the system is singular (only possible with ridge_lambda == 0).
        """
        features = np.asarray(features, dtype=np.float64)
        proposals, matched_gts = _as_boxes(proposals), _as_boxes(matched_gts)
        if len(features) == 0:
            raise DegenerateTrainingError(f"Regressor for {class_name} needs at least one training pair")
        if not len(features) == len(proposals) == len(matched_gts):
            raise DimensionMismatchError(
                f"Regressor inputs differ in length: {len(features)}, {len(proposals)}, {len(matched_gts)}")
        targets = encode_boxes(proposals, matched_gts)
        weights, biases = self.solve_ridge(features, targets)
        logging.debug(f"Trained {class_name} regressor on {len(features)} pairs")
        return BBoxRegressor(class_name, weights.T, biases, self.ridge_lambda, model_name)

    def solve_ridge(self, features, targets):
        """
        Minimises ``|T - [X 1] W|^2 + lambda |W|^2``.

        Returns:
            tuple: (weights of shape (d, k), biases of shape (k,)).
        """
        augmented = np.hstack([features, np.ones((len(features), 1))])
        gram = augmented.T @ augmented + self.ridge_lambda * np.eye(augmented.shape[1])
        if self.ridge_lambda == 0 and np.linalg.matrix_rank(gram) < gram.shape[0]:
            raise SolverError("Normal equations are singular with ridge_lambda=0; use ridge_lambda > 0")
        try:
            solution = np.linalg.solve(gram, augmented.T @ targets)
        except np.linalg.LinAlgError as e:
            raise SolverError(f"Normal equations could not be solved ({e}); use ridge_lambda > 0") from e
        return solution[:-1], solution[-1]


def train_bbox_regressor(features, proposals, matched_gts, ridge_lambda=Config.RIDGE_LAMBDA, class_name="person"):
    return BBoxRegressorTrainer(ridge_lambda).train(features, proposals, matched_gts, class_name)


def train_all_regressors(trainer, pools, model_name="", jobs=Config.JOBS):
    """
    Fits one regressor per ClassPool that has regression pairs, ``jobs`` classes at a time.
    """
    def job(pool):
        if len(pool.regression_features) == 0:
            logging.warning(f"Skipping {pool.class_name} regressor: no proposal overlaps its ground truth enough")
            return None
        return trainer.train(pool.regression_features, pool.regression_proposals, pool.regression_gts,
                             pool.class_name, model_name)

    with ThreadPoolExecutor(max_workers=jobs) as executor:
        regressors = list(executor.map(job, pools.values()))
    logging.info(f"Trained {sum(r is not None for r in regressors)} box regressors for {model_name or 'model'}")
    return {regressor.class_name: regressor for regressor in regressors if regressor is not None}
