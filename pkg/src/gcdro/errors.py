"""Exception types shared across the package."""


class GcdroError(Exception):
    """Base class for every error raised by this package."""


class InvalidDistribution(GcdroError):
    """A vector that must form a probability distribution cannot be normalized."""


class InvalidSpec(GcdroError):
    """A generator or partition spec violates its own invariants."""


class GenerationStalled(GcdroError):
    """Rejection sampling exceeded its retry cap."""


class MissingAttribute(GcdroError):
    """An operation requiring attribute annotations met an example without one."""


class IncompleteMergeMap(GcdroError):
    """A merge map does not cover every (attribute, label) cell in the data."""


class TooFewPoints(GcdroError):
    """Fewer points than requested clusters."""


class ShapeError(GcdroError):
    """Array shapes or lengths are inconsistent."""


class InvalidWeight(GcdroError):
    """A per-example weight is negative."""


class DivergedError(GcdroError):
    """Training produced a non-finite loss or gradient."""


class InvalidObservation(GcdroError):
    """A non-finite value was fed to a moving-average tracker."""


class InvalidAlpha(GcdroError):
    """Group coverage level outside (0, 1]."""


class InvalidStepSize(GcdroError):
    """Non-positive multiplicative-update step size."""


class InvalidArguments(GcdroError):
    """Numeric arguments outside their documented domain."""


class DegenerateGroupPrior(GcdroError):
    """A group's estimated prior is zero, so importance ratios are undefined."""


class NoCheckpoints(GcdroError):
    """Model selection asked for a checkpoint from an empty run record."""


class InsufficientRecord(GcdroError):
    """A run record lacks the per-step data needed for the requested analysis."""


class ConfigError(GcdroError):
    """An experiment config file failed validation."""


class IoError(GcdroError):
    """A required file or directory is missing or unreadable."""
