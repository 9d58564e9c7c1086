class DetensError(Exception):
    """Base class for every failure the pipeline reports to its caller."""


class AnnotationFormatError(DetensError, ValueError):
    """An annotation document is not well-formed XML or JSON."""


class FieldMissingError(AnnotationFormatError):
    """A required element or key is absent from an annotation document."""


class ValidationError(DetensError, ValueError):
    """Parsed content violates a domain invariant."""


class InvalidBoxError(ValidationError):
    pass


class DegenerateBoxError(InvalidBoxError):
    """Applying a regression produced a box with no area."""


class ReferentialIntegrityError(ValidationError):
    """A COCO annotation points at an image or category that does not exist."""


class PreconditionError(DetensError, ValueError):
    pass


class ParameterError(DetensError, ValueError):
    pass


class MergeConflictError(DetensError):
    """Two manifests being merged share an image id."""


class FeatureFormatError(DetensError, ValueError):
    pass


class FeatureLengthError(FeatureFormatError):
    """A feature file is shorter or longer than its header promises."""


class SpecMismatchError(DetensError):
    pass


class CoverageError(DetensError):
    """A proposal has no stored feature vector."""


class AlignmentError(DetensError):
    """Per-model inputs do not line up on the same (image_id, box) keys."""


class DimensionMismatchError(DetensError, ValueError):
    pass


class DegenerateTrainingError(DetensError):
    """A classifier was asked to train without both positive and negative examples."""


class SolverError(DetensError):
    pass
