import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field

from detens.errors import ParameterError


class Config:
    LOG_ENV_VAR = "DETENS_LOG"
    LOG_LEVEL = "WARNING"
    LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'

    MIN_OBJECT_SIDE = 30
    SMALL_OBJECT_SOURCES = ("coco2014",)
    NEGATIVES_PER_GT = 3
    NEGATIVE_MIN_SIDE = 30
    NEGATIVE_MAX_SIDE = 300
    NEGATIVE_MAX_ATTEMPTS = 100

    SVM_C = 1e-3
    SVM_EPOCHS = 200
    SVM_TOLERANCE = 1e-6
    SVM_BIAS_STEPS = 64
    SVM_MARGIN = -1.0
    SVM_MINING_ROUNDS = 3
    SVM_CACHE_CAP = 50_000
    SVM_NEGATIVE_IOU = 0.3
    SVM_POSITIVE_IOU = 1.0 - 1e-6

    RIDGE_LAMBDA = 1000.0
    BBOX_MATCH_IOU = 0.6

    NMS_THRESHOLD = 0.3
    SCORE_FLOOR = -1.1

    EVAL_IOU = 0.5
    AP_METHODS = ("area", "11point")
    AP_METHOD = "area"

    FEATURE_MAGIC = b"DEFV"
    FEATURE_VERSION = 1
    MODEL_SCHEMA_VERSION = 1

    SEED = 0
    JOBS = 1

    SYNTHETIC_IMAGES = 50
    SYNTHETIC_WIDTH = 500
    SYNTHETIC_HEIGHT = 375
    SYNTHETIC_MODELS = 2
    SYNTHETIC_FEATURE_SCALE = 100.0


def default_log_level():
    """
    Returns the log level named by the DETENS_LOG environment variable, or the default.
    """
    return os.getenv(Config.LOG_ENV_VAR, Config.LOG_LEVEL).upper()


@dataclass
class PipelineConfig:
    """
    Every knob a pipeline run can take, whether it came from a flag or a JSON config file.

    Field names are the argparse destinations, so the echo written by one run is a valid
    ``--config`` file for the next one.
    """

    inputs: list[str] = field(default_factory=list)
    output: str | None = None
    manifest: str | None = None
    proposals: str | None = None
    features: list[str] = field(default_factory=list)
    models: str | None = None
    members: list[list[str]] = field(default_factory=list)
    dets: str | None = None
    gt: str | None = None
    voc_dir: str | None = None

    name: str | None = None
    source: str | None = None
    split: str | None = None
    sources: list[str] = field(default_factory=lambda: list(Config.SMALL_OBJECT_SOURCES))
    drop_empty: bool = False

    model_name: str | None = None
    feature_dim: int | None = None
    training_set: str | None = None

    seed: int = Config.SEED
    jobs: int = Config.JOBS
    per_gt: int = Config.NEGATIVES_PER_GT
    max_attempts: int = Config.NEGATIVE_MAX_ATTEMPTS
    min_side: float = Config.MIN_OBJECT_SIDE
    c_param: float = Config.SVM_C
    rounds: int = Config.SVM_MINING_ROUNDS
    epochs: int = Config.SVM_EPOCHS
    neg_iou: float = Config.SVM_NEGATIVE_IOU
    cache_cap: int = Config.SVM_CACHE_CAP
    ridge_lambda: float = Config.RIDGE_LAMBDA
    match_iou: float = Config.BBOX_MATCH_IOU
    nms_threshold: float = Config.NMS_THRESHOLD
    score_floor: float = Config.SCORE_FLOOR
    nms_first: bool = False
    iou_threshold: float = Config.EVAL_IOU
    ap_method: str = Config.AP_METHOD

    n_images: int = Config.SYNTHETIC_IMAGES
    classes: list[str] | None = None
    width: int = Config.SYNTHETIC_WIDTH
    height: int = Config.SYNTHETIC_HEIGHT
    min_boxes: int = 1
    max_boxes: int = 3
    sigma: float = 0.0
    feature_scale: float = Config.SYNTHETIC_FEATURE_SCALE
    pseudo_models: int = Config.SYNTHETIC_MODELS

    _INPUT_PATHS = ("manifest", "proposals", "models", "dets", "gt")
    _RANGES = {
        "jobs": (1, None),
        "per_gt": (0, None),
        "max_attempts": (1, None),
        "rounds": (1, None),
        "epochs": (1, None),
        "cache_cap": (1, None),
        "ridge_lambda": (0, None),
        "n_images": (1, None),
        "min_boxes": (0, None),
        "sigma": (0, None),
        "pseudo_models": (1, None),
    }
    _OPEN_UNIT = ("neg_iou", "nms_threshold")
    _HALF_OPEN_UNIT = ("match_iou", "iou_threshold")

    @classmethod
    def field_names(cls):
        return {f.name for f in dataclasses.fields(cls)}

    @classmethod
    def from_namespace(cls, namespace):
        """
        Builds a config from an argparse namespace, ignoring destinations that are not config fields.
        """
        known = cls.field_names()
        return cls(**{key: value for key, value in vars(namespace).items() if key in known})

    @classmethod
    def read_file(cls, path):
        """
        Reads a JSON config file and returns its entries as a dict of argparse defaults.

        Parameters:
            path (str): Path of the JSON file.

        Returns:
            dict: Config values keyed by field name.

        Raises:
            ParameterError: If the file is not a JSON object or names an unknown field.
        """
        with open(path, encoding="utf-8") as handle:
            try:
                values = json.load(handle)
            except json.JSONDecodeError as e:
                raise ParameterError(f"Config file {path} is not valid JSON: {e}") from e
        if not isinstance(values, dict):
            raise ParameterError(f"Config file {path} must hold a JSON object")
        unknown = sorted(set(values) - cls.field_names())
        if unknown:
            raise ParameterError(f"Config file {path} has unknown keys: {', '.join(unknown)}")
        logging.debug(f"Loaded {len(values)} config values from {path}")
        return values

    def validate(self):
        """
        Checks that referenced input files exist and numeric parameters are in range.

        Raises:
            ParameterError: Naming the first offending path or parameter.
        """
        paths = list(self.inputs) + list(self.features)
        paths += [getattr(self, key) for key in self._INPUT_PATHS if getattr(self, key)]
        for member in self.members:
            paths += list(member)
        for path in paths:
            if not os.path.exists(path):
                raise ParameterError(f"Input file not found: {path}")

        for key, (low, high) in self._RANGES.items():
            value = getattr(self, key)
            if value < low or (high is not None and value > high):
                raise ParameterError(f"{key} must be >= {low}, got {value}")
        if self.min_side <= 0:
            raise ParameterError(f"min_side must be positive, got {self.min_side}")
        if self.c_param <= 0:
            raise ParameterError(f"c_param must be positive, got {self.c_param}")
        if self.feature_scale <= 0:
            raise ParameterError(f"feature_scale must be positive, got {self.feature_scale}")
        for key in self._OPEN_UNIT:
            if not 0 < getattr(self, key) < 1:
                raise ParameterError(f"{key} must lie in (0, 1), got {getattr(self, key)}")
        for key in self._HALF_OPEN_UNIT:
            if not 0 < getattr(self, key) <= 1:
                raise ParameterError(f"{key} must lie in (0, 1], got {getattr(self, key)}")
        if self.ap_method not in Config.AP_METHODS:
            raise ParameterError(f"ap_method must be one of {Config.AP_METHODS}, got {self.ap_method}")
        if self.max_boxes < self.min_boxes:
            raise ParameterError(f"max_boxes ({self.max_boxes}) is below min_boxes ({self.min_boxes})")
        return self

    def echo(self):
        """
        Serialises the config as one line of JSON, stable across runs.
        """
        return json.dumps(dataclasses.asdict(self), sort_keys=True)
