"""Exception taxonomy shared by all solver modules."""


class KrylovError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(KrylovError):
    """Non-finite data, dimension mismatch, or an out-of-range parameter."""


class ParseError(KrylovError):
    """Malformed Matrix Market content. Carries the offending line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UnsupportedFormatError(ParseError):
    """Well-formed Matrix Market file in a format this reader does not accept."""


class SingularOperatorError(KrylovError):
    """An operator or coupling block that must be nonsingular is not."""


class IndefiniteGramError(KrylovError):
    """A Gram matrix expected to be HPD has a non-positive pivot.

    Signals a (numerically) rank-deficient deflation basis W.
    """


class HarmonicBreakdownError(KrylovError):
    """The square Hessenberg block is singular; harmonic extraction impossible."""


class NotHpdError(KrylovError):
    """An operator claimed Hermitian positive definite produced p^H A p <= 0."""


class BreakdownError(KrylovError):
    """Krylov breakdown on a singular deflated system with a nonzero residual."""


class HarvestTooSmallError(KrylovError):
    """The retained solve state has fewer directions than the requested space."""
