"""
Model files: one JSON document per (network, class), weights as base64 little-endian float32.
"""
import base64
import json
import logging
from pathlib import Path

import numpy as np

from detens.config import Config
from detens.errors import ValidationError
from detens.learn.regression import BBoxRegressor
from detens.learn.svm import SvmModel
from detens.storage import Storage

_FLOAT = np.dtype("<f4")
SVM_PREFIX = "svm_"
BBOX_PREFIX = "bbox_"


def encode_array(values):
    return base64.b64encode(np.asarray(values, dtype=_FLOAT).tobytes()).decode("ascii")


def decode_array(text, shape):
    values = np.frombuffer(base64.b64decode(text), dtype=_FLOAT).astype(np.float64)
    if values.size != int(np.prod(shape)):
        raise ValidationError(f"Weight array holds {values.size} values, expected shape {shape}")
    return values.reshape(shape)


def model_filename(prefix, class_name):
    return f"{prefix}{class_name.replace(' ', '_')}.json"


def svm_to_dict(model):
    return {
        "schema_version": Config.MODEL_SCHEMA_VERSION,
        "kind": "svm",
        "model_name": model.model_name,
        "class_name": model.class_name,
        "feature_dim": model.feature_dim,
        "c_param": model.c_param,
        "bias": model.bias,
        "iterations": model.iterations,
        "mined_rounds": model.mined_rounds,
        "weights": encode_array(model.weights),
    }


def regressor_to_dict(regressor):
    return {
        "schema_version": Config.MODEL_SCHEMA_VERSION,
        "kind": "bbox",
        "model_name": regressor.model_name,
        "class_name": regressor.class_name,
        "feature_dim": regressor.feature_dim,
        "ridge_lambda": regressor.ridge_lambda,
        "weights": encode_array(regressor.weights),
        "biases": encode_array(regressor.biases),
    }


def _check_header(data, kind):
    if data.get("schema_version") != Config.MODEL_SCHEMA_VERSION:
        raise ValidationError(f"Unsupported model schema version {data.get('schema_version')}")
    if data.get("kind") != kind:
        raise ValidationError(f"Expected a {kind} model file, got kind {data.get('kind')}")


def svm_from_dict(data):
    _check_header(data, "svm")
    try:
        weights = decode_array(data["weights"], (int(data["feature_dim"]),))
        return SvmModel(data["class_name"], weights, data["bias"], data["c_param"], data.get("iterations", 0),
                        data.get("mined_rounds", 0), data.get("model_name", ""))
    except KeyError as e:
        raise ValidationError(f"SVM model file is missing {e}") from None


def regressor_from_dict(data):
    _check_header(data, "bbox")
    try:
        dim = int(data["feature_dim"])
        return BBoxRegressor(data["class_name"], decode_array(data["weights"], (4, dim)),
                             decode_array(data["biases"], (4,)), data["ridge_lambda"], data.get("model_name", ""))
    except KeyError as e:
        raise ValidationError(f"Regressor model file is missing {e}") from None


class ModelDirectory:
    """
    A directory of one network's per-class SVM and regressor files.

    Attributes:
        path (pathlib.Path): The directory.
        storage (Storage): File access.
    """

    def __init__(self, path, storage=None):
        self.storage = storage or Storage()
        self.path = self.storage.resolve(path)

    def save_svms(self, models):
        for model in models.values():
            self.storage.write_text(self.path / model_filename(SVM_PREFIX, model.class_name),
                                    _dumps(svm_to_dict(model)))
        logging.info(f"Saved {len(models)} SVMs to {self.path}")

    def save_regressors(self, regressors):
        for regressor in regressors.values():
            self.storage.write_text(self.path / model_filename(BBOX_PREFIX, regressor.class_name),
                                    _dumps(regressor_to_dict(regressor)))
        logging.info(f"Saved {len(regressors)} box regressors to {self.path}")

    def load_svms(self):
        return self._load(SVM_PREFIX, svm_from_dict)

    def load_regressors(self):
        return self._load(BBOX_PREFIX, regressor_from_dict)

    def _load(self, prefix, decode):
        if not self.path.is_dir():
            raise FileNotFoundError(f"Model directory not found: {self.path}")
        models = {}
        for file in sorted(Path(self.path).glob(f"{prefix}*.json")):
            model = decode(self.storage.read_json(file))
            models[model.class_name] = model
        logging.info(f"Loaded {len(models)} {prefix.rstrip('_')} models from {self.path}")
        return models


def _dumps(data):
    return json.dumps(data, indent=2, sort_keys=True) + "\n"
