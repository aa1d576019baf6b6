"""Exception and warning types raised across the package."""


class RandGreenError(Exception):
    """Base class for computational errors (CLI exit code 3)."""


class DegenerateEvaluation(RandGreenError):
    """Both forms of a map vanish at the evaluation point."""


class RootSolverFailure(RandGreenError):
    """A pre-image failed the residual check after refinement."""


class RejectionOverflow(RandGreenError):
    """A rejection sampler discarded more draws than allowed."""


class DegenerateAtom(RandGreenError):
    """An ensemble atom lies on the degenerate locus (zero resultant)."""


class DegenerateEntry(RandGreenError):
    """A realized sequence entry is a degenerate map."""


class UnboundedTail(RandGreenError):
    """The ensemble gives no positive lower bound on the sphere norm of lifts."""


class InsufficientDepth(RandGreenError):
    """Green truncation error is too large relative to the probed increments."""


class MassDefect(RandGreenError):
    """Discrete Laplacian mass differs from 1 by more than the allowed defect."""


class BudgetExceeded(RandGreenError):
    """An exact pre-image tree would exceed the configured leaf budget."""


class FitUnreliable(RandGreenError):
    """Decay norms reached the noise floor before the last requested depth."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class NoiseFloor(RandGreenError):
    """Every correlation entry is indistinguishable from zero."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class TailTooFat(RandGreenError):
    """The extrapolated Gordin tail exceeds the tolerance."""


class VarianceZero(RandGreenError):
    """Limiting variance is zero (coboundary case)."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ConfigError(Exception):
    """Invalid experiment configuration (CLI exit code 2)."""

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if field is not None:
            loc.append(f"field {field!r}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)


class ExceptionalSuspect(UserWarning):
    """Backward pre-image tree collapsed; the start point may be exceptional."""


class SingularHit(UserWarning):
    """A dsh observable was evaluated at (or next to) one of its poles."""


class RejectionRate(UserWarning):
    """Informational: rejection rate of a conditioned coefficient ensemble."""
