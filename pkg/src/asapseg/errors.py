"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class AxisError(ValueError):
    """An axis argument does not exist for the given shape."""


class ContractError(ValueError):
    """A documented precondition was violated (e.g. non-scalar backward root)."""


class NumericError(ArithmeticError):
    """NaN/Inf showed up where finite values are required."""


class StateError(RuntimeError):
    """Operation used before required state exists (e.g. batch-norm eval with no stats)."""


class DegenerateBatchError(ValueError):
    """A loss was asked to score a batch with no scorable pixels."""


class DegenerateMetricError(ValueError):
    """A metric was asked to summarize an empty confusion matrix."""


class FormatError(ValueError):
    """Malformed on-disk file (PPM/PGM header, manifest, checkpoint)."""


class LabelError(ValueError):
    """A label map contains a class index outside the configured range."""


class ConfigError(ValueError):
    """Bad run configuration: unknown key, unparsable value or missing section."""
