"""Exceptions raised across the package.

Each error also derives from the closest builtin, so ``except ValueError`` keeps working for callers
that do not care about the package hierarchy.

"""


class CvrScaleError(Exception):
    """Root of all package errors."""


class DimensionError(CvrScaleError, ValueError):
    """Tensor or parameter shapes do not line up."""


class ContractError(CvrScaleError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(CvrScaleError, ValueError):
    """A configuration is invalid or internally inconsistent."""


class SchemaError(CvrScaleError, KeyError):
    """A feature name is unknown to the schema or the schema is malformed."""

    def __str__(self) -> str:
        # KeyError quotes its argument, keep the message readable
        return str(self.args[0]) if self.args else ""


class NumericError(CvrScaleError, ArithmeticError):
    """NaN or infinite values where finite ones are required."""


class IncompatibleCheckpointError(CvrScaleError, ValueError):
    """A checkpoint cannot warm-start the requested configuration."""


class UndefinedMetricError(CvrScaleError, ValueError):
    """A metric has no eligible inputs."""


class MeasurementError(CvrScaleError, RuntimeError):
    """A timing measurement is not meaningful with the requested settings."""


class TrainingDivergedError(CvrScaleError, RuntimeError):
    """Training produced a non-finite loss."""


class WireError(CvrScaleError, ValueError):
    """A serving frame is malformed."""


class OverloadError(CvrScaleError, RuntimeError):
    """The serving queue is full and the request was rejected."""
