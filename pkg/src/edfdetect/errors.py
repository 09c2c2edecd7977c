"""Exception hierarchy shared across the pipeline.

Two branches matter for the CLI exit codes: DataError covers malformed
inputs (files, configs, dimensions), NumericError covers failures of the
numerical machinery itself.
"""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class DataError(PipelineError):
    """Invalid input data, file contents, or configuration."""


class NumericError(PipelineError):
    """A numerical procedure could not produce a valid result."""


class InvalidBasisError(DataError):
    """Requested spline basis is impossible (q < 4 or q > m)."""


class IllPosedFitError(NumericError):
    """Normal matrix is singular at lambda = 0 (rank-deficient design)."""


class DegenerateGcvError(NumericError):
    """GCV denominator vanished: m - edf below tolerance."""


class DimensionMismatchError(DataError):
    """Feature vectors of inconsistent length."""


class SingleClassError(DataError):
    """A reference set needs at least two distinct classes."""


class ConfigError(DataError):
    """Malformed generation config or CLI parameter set."""
