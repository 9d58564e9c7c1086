"""
Per-class linear SVMs trained on precomputed features, with hard-negative mining.

The bias is not regularised. For a fixed bias the weights come from dual coordinate descent on
the L1-loss SVM (the liblinear method); the bias itself is found by bisection on the sign of
``sum(alpha * y)``, which is minus the slope of the best objective reachable at that bias. Every
step records the best primal objective seen, so the history is non-increasing.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from detens.config import Config
from detens.core import VOC_CLASSES, FeatureVector
from detens.errors import DegenerateTrainingError, DimensionMismatchError, ValidationError
from detens.ingest.features import concatenate_stores


@dataclass(frozen=True, eq=False)
class SvmModel:
    class_name: str
    weights: np.ndarray = field(repr=False)
    bias: float
    c_param: float
    iterations: int = 0
    mined_rounds: int = 0
    model_name: str = ""
    objective_history: tuple = field(default=(), repr=False)

    def __post_init__(self):
        if self.class_name not in VOC_CLASSES:
            raise ValidationError(f"'{self.class_name}' is not a VOC class")
        weights = np.array(self.weights, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(weights)) or not np.isfinite(self.bias):
            raise ValidationError(f"SVM for {self.class_name} has non-finite parameters")
        if self.c_param <= 0:
            raise ValidationError(f"c_param must be positive, got {self.c_param}")
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", float(self.bias))
        object.__setattr__(self, "objective_history", tuple(self.objective_history))

    @property
    def feature_dim(self):
        return int(self.weights.size)

    def decision_function(self, features):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.feature_dim:
            raise DimensionMismatchError(
                f"SVM for {self.class_name} expects {self.feature_dim}-d features, got shape {features.shape}")
        return features @ self.weights + self.bias


def as_matrix(vectors, feature_dim=None):
    """
    Accepts an (n, d) array or a list of FeatureVector and returns a float64 matrix.
    """
    if isinstance(vectors, np.ndarray):
        matrix = vectors.astype(np.float64, copy=False)
    elif len(vectors) and isinstance(vectors[0], FeatureVector):
        dims = {vector.dim for vector in vectors}
        if len(dims) != 1:
            raise DimensionMismatchError(f"Feature vectors have mixed dimensions {sorted(dims)}")
        matrix = np.vstack([vector.values for vector in vectors]).astype(np.float64)
    else:
        matrix = np.asarray(vectors, dtype=np.float64)
    if matrix.ndim == 1 and matrix.size == 0:
        matrix = matrix.reshape(0, feature_dim or 0)
    if matrix.ndim != 2:
        raise DimensionMismatchError(f"Expected a 2-d feature matrix, got shape {matrix.shape}")
    if feature_dim is not None and matrix.shape[1] != feature_dim:
        raise DimensionMismatchError(f"Expected {feature_dim}-d features, got {matrix.shape[1]}-d")
    return matrix


def hinge_loss(weights, bias, features, labels):
    margins = labels * (features @ weights + bias)
    return float(np.maximum(0.0, 1.0 - margins).sum())


def svm_objective(weights, bias, features, labels, c_param):
    """
    ``0.5 * |w|^2 + C * sum(max(0, 1 - y (w.x + b)))``.
    """
    return 0.5 * float(weights @ weights) + c_param * hinge_loss(weights, bias, features, labels)


def svm_subgradient(weights, bias, features, labels, c_param):
    """
    A subgradient of svm_objective; the exact gradient wherever no margin equals 1.

    Returns:
        tuple: (gradient w.r.t. weights, gradient w.r.t. bias).
    """
    active = labels * (features @ weights + bias) < 1.0
    signed = labels[active]
    grad_w = weights - c_param * (signed @ features[active])
    grad_b = -c_param * float(signed.sum())
    return grad_w, grad_b


def optimal_bias(scores, labels):
    """
    The bias minimising the hinge loss for fixed weights, given ``scores = X @ w``.

    The loss is piecewise linear in the bias with a kink at ``y - score`` per sample; the
    minimum sits at the first kink where the slope turns non-negative.
    """
    kinks = labels - scores
    order = np.argsort(kinks, kind="stable")
    ordered = labels[order]
    positives_above = int((labels > 0).sum()) - np.cumsum(ordered > 0)
    negatives_below = np.cumsum(ordered < 0)
    first = int(np.argmax(negatives_below - positives_above >= 0))
    return float(kinks[order][first])


class SvmTrainer:
    """
    Trains one linear SVM per class.

    Attributes:
        c_param (float): Hinge-loss weight C.
        epochs (int): Epoch budget of each coordinate-descent pass.
        tolerance (float): Relative objective change that ends a pass, and relative width of
            the bias bracket that ends the search.
        bias_steps (int): Most bisection steps on the bias.
        seed (int): Seed of the coordinate visiting order.
    """

    def __init__(self, c_param=Config.SVM_C, epochs=Config.SVM_EPOCHS, tolerance=Config.SVM_TOLERANCE,
                 bias_steps=Config.SVM_BIAS_STEPS, seed=Config.SEED):
        self.c_param = c_param
        self.epochs = epochs
        self.tolerance = tolerance
        self.bias_steps = bias_steps
        self.seed = seed

    def train(self, positives, negatives, class_name, model_name=""):
        """
        Fits an SVM separating positives from negatives.

        Parameters:
            positives: (n, d) array or list of FeatureVector.
            negatives: (m, d) array or list of FeatureVector.
            class_name (str): VOC class the model scores.
            model_name (str): Network the features came from.

        Returns:
            SvmModel: The best iterate found.

        Raises:
            DegenerateTrainingError: If either side is empty.
            DimensionMismatchError: If the two sides disagree on dimension.
        """
        if len(positives) == 0 or len(negatives) == 0:
            raise DegenerateTrainingError(
                f"SVM for {class_name} needs positives and negatives, got {len(positives)} and {len(negatives)}")
        positives = as_matrix(positives)
        negatives = as_matrix(negatives, positives.shape[1])
        features = np.vstack([positives, negatives])
        labels = np.concatenate([np.ones(len(positives)), -np.ones(len(negatives))])
        weights, bias, history = self._solve(features, labels)
        logging.debug(f"Trained SVM for {class_name} on {len(positives)}+/{len(negatives)}- in "
                      f"{len(history)} bias steps, objective {history[-1]:.6g}")
        return SvmModel(class_name, weights, bias, self.c_param, iterations=len(history),
                        model_name=model_name, objective_history=history)

    def _solve(self, features, labels):
        n = len(features)
        squared_norms = np.einsum("ij,ij->i", features, features)
        alpha = np.zeros(n)
        w = np.zeros(features.shape[1])
        rng = np.random.default_rng(self.seed)

        # The objective at w=0, b=0 caps |w|, which keeps every minimising bias inside the bound.
        bound = 1.0 + np.sqrt(2.0 * self.c_param * n * squared_norms.max())
        low, high = -bound, bound
        best = (np.inf, w.copy(), 0.0)
        history = []
        for _ in range(self.bias_steps):
            bias = 0.5 * (low + high)
            w = self._descend(features, labels, bias, alpha, w, squared_norms, rng)
            for candidate in (bias, optimal_bias(features @ w, labels)):
                objective = svm_objective(w, candidate, features, labels, self.c_param)
                if objective < best[0]:
                    best = (objective, w.copy(), candidate)
            history.append(best[0])
            balance = float(labels @ alpha)
            if balance > 0:
                low = bias
            elif balance < 0:
                high = bias
            else:
                break
            if high - low <= self.tolerance * max(1.0, abs(bias)):
                break
        return best[1], best[2], history

    def _descend(self, features, labels, bias, alpha, w, squared_norms, rng):
        """
        Dual coordinate descent on the weights for a fixed bias. ``alpha`` is updated in place
        and warm-starts the next call.
        """
        c = self.c_param
        targets = 1.0 - labels * bias
        previous = None
        for _ in range(self.epochs):
            for i in rng.permutation(len(features)):
                if squared_norms[i] == 0.0:
                    alpha[i] = c if targets[i] > 0 else 0.0
                    continue
                row = features[i]
                gradient = labels[i] * float(w @ row) - targets[i]
                current = alpha[i]
                if current == 0.0:
                    projected = min(gradient, 0.0)
                elif current == c:
                    projected = max(gradient, 0.0)
                else:
                    projected = gradient
                if abs(projected) > 1e-12:
                    updated = min(max(current - gradient / squared_norms[i], 0.0), c)
                    w += (updated - current) * labels[i] * row
                    alpha[i] = updated
            objective = svm_objective(w, bias, features, labels, c)
            if previous is not None and abs(previous - objective) <= self.tolerance * max(abs(previous), 1e-12):
                break
            previous = objective
        return w

    @staticmethod
    def mine_hard_negatives(model, pool, margin=Config.SVM_MARGIN):
        """
        Indices of pool members scoring above ``margin``, highest score first (ties by index).
        """
        pool = as_matrix(pool, model.feature_dim)
        if len(pool) == 0:
            return np.zeros(0, dtype=np.int64)
        scores = model.decision_function(pool)
        hard = np.flatnonzero(scores > margin)
        return hard[np.argsort(-scores[hard], kind="stable")]

    def train_with_mining(self, positives, negative_source, class_name, rounds=Config.SVM_MINING_ROUNDS,
                          initial_pools=1, cache_cap=Config.SVM_CACHE_CAP, model_name=""):
        """
        Alternates training on a negative cache with mining every pool for margin violators.

        Parameters:
            positives: Positive feature matrix.
            negative_source (list): One negative feature matrix per image.
            class_name (str): VOC class.
            rounds (int): Maximum number of training rounds.
            initial_pools (int or None): How many leading pools seed the cache; None seeds all.
            cache_cap (int): Largest cache size; the lowest-scoring negatives are evicted first.
            model_name (str): Network the features came from.

        Returns:
            SvmModel: The last model, with ``mined_rounds`` set to the mining passes run.
        """
        if rounds < 1:
            raise ValidationError(f"rounds must be >= 1, got {rounds}")
        positives = as_matrix(positives)
        pools = [as_matrix(pool, positives.shape[1]) for pool in negative_source]
        seeded = len(pools) if initial_pools is None else initial_pools
        while seeded < len(pools) and not any(len(pool) for pool in pools[:seeded]):
            seeded += 1
        cache = [(p, r) for p, pool in enumerate(pools[:seeded]) for r in range(len(pool))]

        model, passes = None, 0
        for round_number in range(1, rounds + 1):
            cache_matrix = self._gather(pools, cache, positives.shape[1])
            model = self.train(positives, cache_matrix, class_name, model_name)
            if round_number == rounds:
                break
            passes += 1
            cached = set(cache)
            found = [(p, int(r)) for p, pool in enumerate(pools)
                     for r in self.mine_hard_negatives(model, pool) if (p, int(r)) not in cached]
            logging.debug(f"{class_name} round {round_number}: {len(found)} new hard negatives, cache {len(cache)}")
            if not found:
                break
            cache = self._cap(model, pools, cache + found, cache_cap)

        logging.info(f"Trained {model_name or 'SVM'} {class_name} with {passes} mining passes, "
                     f"cache of {len(cache)} negatives")
        return SvmModel(model.class_name, model.weights, model.bias, model.c_param, model.iterations,
                        passes, model.model_name, model.objective_history)

    def _cap(self, model, pools, cache, cache_cap):
        if len(cache) <= cache_cap:
            return cache
        scores = model.decision_function(self._gather(pools, cache, model.feature_dim))
        keep = np.sort(np.argsort(-scores, kind="stable")[:cache_cap])
        logging.debug(f"Evicted {len(cache) - cache_cap} easy negatives from the cache")
        return [cache[i] for i in keep]

    @staticmethod
    def _gather(pools, cache, feature_dim):
        if not cache:
            return np.zeros((0, feature_dim))
        return np.vstack([pools[p][r] for p, r in cache])


def train_svm(positives, negatives, c_param=Config.SVM_C, class_name="person", seed=Config.SEED, **kwargs):
    return SvmTrainer(c_param=c_param, seed=seed, **kwargs).train(positives, negatives, class_name)


def mine_hard_negatives(model, pool):
    return SvmTrainer.mine_hard_negatives(model, pool)


def train_svm_with_mining(positives, negative_source, c_param=Config.SVM_C, rounds=Config.SVM_MINING_ROUNDS,
                          class_name="person", seed=Config.SEED, **kwargs):
    return SvmTrainer(c_param=c_param, seed=seed).train_with_mining(positives, negative_source, class_name,
                                                                   rounds=rounds, **kwargs)


def train_concat_svm(feature_stores, labels, c_param=Config.SVM_C, class_name="person", seed=Config.SEED):
    """
    Trains one SVM over the concatenation of several networks' features.

    Parameters:
        feature_stores (list): Stores aligned on identical (image_id, box) keys.
        labels (dict): (image_id, box) key to +1 (positive) or -1 (negative), in training order.

    Raises:
        AlignmentError: If the stores do not share the same keys.
    """
    joined = concatenate_stores(feature_stores)
    positives = joined.rows_for([key for key, label in labels.items() if label > 0])
    negatives = joined.rows_for([key for key, label in labels.items() if label <= 0])
    return SvmTrainer(c_param=c_param, seed=seed).train(positives, negatives, class_name, joined.model_name)


def train_all_classes(trainer, pools, rounds=Config.SVM_MINING_ROUNDS, cache_cap=Config.SVM_CACHE_CAP,
                      model_name="", jobs=Config.JOBS):
    """
    Trains every class in ``pools`` (class name -> ClassPool) independently, ``jobs`` at a time.
    Classes without positives or negatives are skipped with a warning.
    """
    def job(pool):
        if len(pool.positives) == 0 or sum(len(p) for p in pool.negative_pools) == 0:
            logging.warning(f"Skipping {pool.class_name}: {len(pool.positives)} positives, "
                            f"{sum(len(p) for p in pool.negative_pools)} negatives")
            return None
        return trainer.train_with_mining(pool.positives, pool.negative_pools, pool.class_name, rounds=rounds,
                                         cache_cap=cache_cap, model_name=model_name)

    with ThreadPoolExecutor(max_workers=jobs) as executor:
        models = list(executor.map(job, pools.values()))
    return {model.class_name: model for model in models if model is not None}
