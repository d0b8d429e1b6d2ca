"""Exception hierarchy shared by every module."""


class RobustCIError(Exception):
    """Base class for all package errors."""


class ValidationError(RobustCIError, ValueError):
    """A domain object violates one of its invariants."""


class DegenerateSupport(ValidationError):
    """The convex hull of the jump support (plus origin) has no interior around 0."""


class DomainError(RobustCIError, ValueError):
    """A kernel or utility was evaluated outside its domain."""


class LPFailure(RobustCIError):
    pass


class NoConvergence(RobustCIError):
    pass


class SaddleCertificateFailure(RobustCIError):
    def __init__(self, message, *, violation=None, x=None, weights=None):
        super().__init__(message)
        self.violation = violation
        self.x = x
        self.weights = weights


class AssumptionViolation(ValidationError):
    """A confidence set breaks the Sharpe-ratio bound the solver relies on."""


class RangeViolation(RobustCIError):
    def __init__(self, message, *, t=None, value=None):
        super().__init__(message)
        self.t = t
        self.value = value


class MismatchError(RobustCIError):
    pass


class StepRejection(RobustCIError):
    pass


class BoundsViolation(RobustCIError):
    pass


class Bankruptcy(RobustCIError):
    """A jump drove 1 + pi^T z to zero or below under a CRRA policy."""


class EqualityViolation(RobustCIError):
    def __init__(self, message, *, z_score=None):
        super().__init__(message)
        self.z_score = z_score


class SaddleViolation(RobustCIError):
    def __init__(self, message, *, perturbation=None):
        super().__init__(message)
        self.perturbation = perturbation


class SpecParseError(RobustCIError):
    """Raised by the market spec parser; carries the offending field and line."""

    def __init__(self, message, *, field=None, line=None):
        where = []
        if field:
            where.append(f"field {field!r}")
        if line is not None:
            where.append(f"line {line}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)
        self.field = field
        self.line = line
