"""Exception hierarchy. CLI exit codes key off ``ConfigError`` (2) and ``DataError`` (3)."""


class ReidError(Exception):
    """Base class for all library errors."""


class ConfigError(ReidError):
    pass


class DataError(ReidError):
    """Bad or inconsistent input data."""


class FormatError(DataError):
    """A file does not match its binary layout."""


class ShapeError(ReidError, ValueError):
    pass


class LabelError(DataError, ValueError):
    pass


class BatchStructureError(DataError):
    """A batch cannot support hardest-positive / hardest-negative mining."""


class InsufficientDataError(DataError):
    pass


class ClusteringError(ReidError):
    pass


class AugmentationError(ReidError):
    pass


class CongruenceError(ReidError, ValueError):
    """Two parameter stores differ in names or shapes."""


class EvaluationError(DataError):
    pass


class DegenerateInputError(ReidError, ValueError):
    pass


class StateError(ReidError, RuntimeError):
    pass
