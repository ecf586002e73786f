"""Exception hierarchy shared by every subsystem.

Each class carries an ``exit_code`` so the command-line front end can map
failures onto distinct process exit statuses.
"""


class HybridError(Exception):
    exit_code = 1


class ConfigError(HybridError, ValueError):
    """Invalid architecture, training, or run configuration."""

    exit_code = 2


class ParameterError(ConfigError):
    """An argument lies outside its admissible range."""


class DimensionError(HybridError, ValueError):
    """Tensor or array shapes are incompatible."""

    exit_code = 3


class DataError(HybridError):
    exit_code = 3


class NotNiftiError(DataError):
    pass


class UnsupportedFormatError(DataError):
    pass


class TruncationError(DataError):
    pass


class LabelError(DataError, ValueError):
    pass


class StratificationError(DataError, ValueError):
    pass


class AlignmentError(DataError, ValueError):
    pass


class EmptyInputError(DataError, ValueError):
    pass


class CheckpointError(DataError):
    pass


class NumericalError(HybridError, ArithmeticError):
    exit_code = 4


class NonFiniteError(NumericalError):
    pass


class DegenerateBatchError(NumericalError, ValueError):
    """Batch statistics are undefined (e.g. train-mode batchnorm with N < 2)."""


class UndefinedMetricError(NumericalError, ValueError):
    pass


class GraphError(HybridError, RuntimeError):
    """Misuse of the autodiff graph, such as calling backward on a non-scalar."""
