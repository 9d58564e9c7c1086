"""
Precomputed CNN features, one vector per (image_id, box index), and the DEFV file format.

Layout, all little-endian: magic ``DEFV``, version u32, feature_dim u32, record_count u64,
then per record an image-id length u16, the UTF-8 id, the box index u32 and feature_dim
float32 values.
"""
import logging
import struct
from pathlib import Path

import numpy as np

from detens.config import Config
from detens.core import FeatureVector
from detens.errors import (AlignmentError, CoverageError, FeatureFormatError, FeatureLengthError,
                           SpecMismatchError, ValidationError)
from detens.storage import Storage

_HEADER = struct.Struct("<4sIIQ")
_ID_LENGTH = struct.Struct("<H")
_BOX_INDEX = struct.Struct("<I")
_FLOAT = np.dtype("<f4")


class FeatureStore:
    """
    Read-only feature matrix keyed by (image_id, box index).

    Attributes:
        model_name (str): Network the features came from.
        feature_dim (int): Length of every vector.
        keys (tuple): Row keys in storage order.
        matrix (numpy.ndarray): (len(keys), feature_dim) float32, not writable.
    """

    def __init__(self, model_name, feature_dim, keys, matrix):
        if feature_dim <= 0:
            raise ValidationError(f"feature_dim must be positive, got {feature_dim}")
        matrix = np.array(matrix, dtype=np.float32).reshape(len(keys), feature_dim)
        if not np.all(np.isfinite(matrix)):
            raise ValidationError(f"Feature store {model_name} holds non-finite values")
        matrix.setflags(write=False)
        self.model_name = model_name
        self.feature_dim = int(feature_dim)
        self.keys = tuple((str(image_id), int(box_index)) for image_id, box_index in keys)
        self.matrix = matrix
        self._index = {}
        for row, key in enumerate(self.keys):
            if key in self._index:
                raise ValidationError(f"Feature store {model_name} lists key {key} twice")
            self._index[key] = row

    def __len__(self):
        return len(self.keys)

    def __contains__(self, key):
        return tuple(key) in self._index

    def vector(self, image_id, box_index):
        return FeatureVector(self.matrix[self._row(image_id, box_index)])

    def rows_for(self, keys):
        """
        Returns the (len(keys), feature_dim) float64 matrix for the given keys.

        Raises:
            CoverageError: Naming the first key without a stored vector.
        """
        rows = [self._row(image_id, box_index) for image_id, box_index in keys]
        return self.matrix[np.array(rows, dtype=np.int64)].astype(np.float64) if rows else \
            np.zeros((0, self.feature_dim), dtype=np.float64)

    def validate_against(self, proposals):
        """
        Checks that the stored keys are exactly the keys of ``proposals``.
        """
        wanted = {proposal.key for proposal in proposals}
        for key in (proposal.key for proposal in proposals):
            if key not in self._index:
                raise CoverageError(f"No {self.model_name} feature for proposal {key}")
        extra = [key for key in self.keys if key not in wanted]
        if extra:
            raise CoverageError(f"{self.model_name} has features for unknown proposal {extra[0]}")
        return self

    def _row(self, image_id, box_index):
        try:
            return self._index[(image_id, box_index)]
        except KeyError:
            raise CoverageError(f"No {self.model_name} feature for proposal {(image_id, box_index)}") from None


def encode_feature_store(store):
    parts = [_HEADER.pack(Config.FEATURE_MAGIC, Config.FEATURE_VERSION, store.feature_dim, len(store))]
    values = store.matrix.astype(_FLOAT, copy=False)
    for row, (image_id, box_index) in enumerate(store.keys):
        encoded = image_id.encode("utf-8")
        parts.append(_ID_LENGTH.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_BOX_INDEX.pack(box_index))
        parts.append(values[row].tobytes())
    return b"".join(parts)


def decode_feature_store(data, model_name):
    """
    Decodes DEFV bytes into a FeatureStore.

    Raises:
        FeatureFormatError: Bad magic, unsupported version, zero dimension or an id that is not UTF-8.
        FeatureLengthError: The data is shorter or longer than the header promises.
    """
    if len(data) < _HEADER.size:
        raise FeatureLengthError(f"Feature file is {len(data)} bytes, shorter than its {_HEADER.size}-byte header")
    magic, version, feature_dim, count = _HEADER.unpack_from(data, 0)
    if magic != Config.FEATURE_MAGIC:
        raise FeatureFormatError(f"Bad magic bytes {magic!r}, expected {Config.FEATURE_MAGIC!r}")
    if version != Config.FEATURE_VERSION:
        raise FeatureFormatError(f"Unsupported feature file version {version}")
    if feature_dim == 0:
        raise FeatureFormatError("Feature file declares dimension 0")

    row_bytes = feature_dim * _FLOAT.itemsize
    offset = _HEADER.size
    if count * (_ID_LENGTH.size + _BOX_INDEX.size + row_bytes) > len(data) - offset:
        raise FeatureLengthError(f"Feature file is truncated: header promises {count} records")

    keys = []
    matrix = np.empty((count, feature_dim), dtype=np.float32)
    for row in range(count):
        if offset + _ID_LENGTH.size > len(data):
            raise FeatureLengthError(f"Feature file is truncated in record {row}")
        (id_length,) = _ID_LENGTH.unpack_from(data, offset)
        offset += _ID_LENGTH.size
        end = offset + id_length + _BOX_INDEX.size + row_bytes
        if end > len(data):
            raise FeatureLengthError(f"Feature file is truncated in record {row}")
        try:
            image_id = bytes(data[offset:offset + id_length]).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FeatureFormatError(f"Record {row} has an image id that is not UTF-8: {e.reason}") from e
        offset += id_length
        (box_index,) = _BOX_INDEX.unpack_from(data, offset)
        offset += _BOX_INDEX.size
        matrix[row] = np.frombuffer(data, dtype=_FLOAT, count=feature_dim, offset=offset)
        offset += row_bytes
        keys.append((image_id, box_index))
    if offset != len(data):
        raise FeatureLengthError(f"Feature file has {len(data) - offset} trailing bytes after {count} records")
    return FeatureStore(model_name, feature_dim, keys, matrix)


def load_feature_store(path, expected=None, storage=None):
    """
    Loads a DEFV feature file.

    Parameters:
        path (str): File to read.
        expected (ModelSpec, optional): When given, the file's dimension must match and the
            store takes the ModelSpec's model name.
        storage (Storage, optional): File access.

    Returns:
        FeatureStore: The validated store.

    Raises:
        SpecMismatchError: If the dimension differs from ``expected.feature_dim``.
    """
    storage = storage or Storage()
    data = storage.read_bytes(path)
    if expected is not None and len(data) >= _HEADER.size:
        magic, _, feature_dim, _ = _HEADER.unpack_from(data, 0)
        if magic == Config.FEATURE_MAGIC and feature_dim != expected.feature_dim:
            raise SpecMismatchError(f"{path}: file feature_dim {feature_dim} does not match "
                                    f"{expected.model_name} feature_dim {expected.feature_dim}")
    model_name = expected.model_name if expected is not None else Path(path).stem
    store = decode_feature_store(data, model_name)
    logging.info(f"Loaded {len(store)} {store.feature_dim}-d features for {model_name} from {path}")
    return store


def write_feature_store(path, store, storage=None):
    storage = storage or Storage()
    logging.info(f"Writing {len(store)} {store.feature_dim}-d features for {store.model_name} to {path}")
    return storage.write_bytes(path, encode_feature_store(store))


def concatenate_stores(stores):
    """
    Joins per-network stores column-wise over their shared keys, in the first store's key order.

    Raises:
        AlignmentError: Naming the first key that is not present in every store.
    """
    if not stores:
        raise AlignmentError("Need at least one feature store to concatenate")
    if len(stores) == 1:
        return stores[0]
    base = stores[0]
    blocks = [base.matrix]
    for other in stores[1:]:
        missing = next((key for key in base.keys if key not in other), None)
        if missing is None:
            missing = next((key for key in other.keys if key not in base), None)
        if missing is not None:
            raise AlignmentError(f"Stores {base.model_name} and {other.model_name} are not aligned: "
                                 f"first mismatched key {missing}")
        blocks.append(other.matrix[[other._index[key] for key in base.keys]] if len(base) else
                      np.zeros((0, other.feature_dim), dtype=np.float32))
    name = "+".join(store.model_name for store in stores)
    return FeatureStore(name, sum(store.feature_dim for store in stores), base.keys, np.hstack(blocks))
