"""Exception hierarchy shared by all modules; CLI maps these to exit codes."""


class OccufieldError(Exception):
    """Base class for package errors."""

    exit_code = 1


class UsageError(OccufieldError):
    """Caller-side mistake: bad dimensions, invalid arguments, missing inputs."""

    exit_code = 2


class DataError(OccufieldError):
    """Data-integrity violation: detections at unsurveyed cells, bad records."""

    exit_code = 3


class NumericalError(OccufieldError):
    """Numerical failure: factorization breakdown, non-finite sampler state."""

    exit_code = 4


class DataIntegrityWarning(UserWarning):
    """Non-fatal data oddity worth surfacing (e.g. draws outside prior support)."""
