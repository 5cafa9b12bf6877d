"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line front end can map
failures to process exit statuses without a lookup table.
"""


class TractoSurvError(Exception):
    exit_code = 1


class ConfigError(TractoSurvError):
    exit_code = 2


class DataError(TractoSurvError):
    exit_code = 3


class FormatError(DataError):
    """Malformed file header or magic."""


class DimensionalityError(DataError):
    pass


class DatatypeError(DataError):
    pass


class GridError(DataError):
    """Two volumes that must share a voxel grid do not."""


class ModeError(DataError):
    pass


class SchemaError(DataError):
    """Feature names/lengths disagree with what a model or table expects."""


class SeedError(DataError):
    pass


class LabelError(DataError):
    """Class labels are unusable (e.g. a single class)."""


class StratificationError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class WriteError(DataError):
    pass


class DegenerateInputError(TractoSurvError):
    exit_code = 4


class TransformError(DegenerateInputError):
    pass
