"""Exception hierarchy shared across the package."""


class HmfpcError(Exception):
    """Base class for all errors raised by hmfpc."""


class DegenerateDesignError(HmfpcError, ValueError):
    """Too few distinct observation times to support the requested basis."""


class DomainError(HmfpcError, ValueError):
    """A time point or parameter lies outside its admissible domain."""


class EmptySubjectError(HmfpcError, ValueError):
    """A subject has no observations."""


class NonFiniteObjectiveError(HmfpcError, FloatingPointError):
    """The log-likelihood evaluated to a non-finite value.

    Attributes
    ----------
    subject : int or None
        Index of the first subject whose contribution is non-finite.
    """

    def __init__(self, message, subject=None):
        super().__init__(message)
        self.subject = subject


class NonDifferentiableError(HmfpcError, ArithmeticError):
    """The orthogonality transform is rank deficient at the requested point."""


class IndefiniteHessianError(HmfpcError, ArithmeticError):
    """The Hessian at an optimum is not negative definite, even after jitter."""


class TuningError(HmfpcError, RuntimeError):
    """Every smoothing-parameter grid point was invalid."""


class DataParseError(HmfpcError, ValueError):
    """Malformed long-format input.

    Attributes
    ----------
    line : int or None
        1-based line number of the offending row.
    """

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class IntegrityError(HmfpcError, ValueError):
    """A saved model does not match the data or basis it is used with."""


class NumericalError(HmfpcError, ArithmeticError):
    """A linear-algebra routine failed (e.g. an eigendecomposition)."""
