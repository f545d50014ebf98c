"""Exception hierarchy shared by the simulator modules."""


class PamlabError(Exception):
    """Base class for all errors raised by pamlab."""


class DomainError(PamlabError, ValueError):
    """An argument lies outside the domain where the operation is defined."""


class NumericError(PamlabError, ArithmeticError):
    """A non-finite value appeared in a field."""


class BlowupError(NumericError):
    """The sup-norm exceeded the configured cap."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class PositivityError(PamlabError, ValueError):
    """A statistic that needs strictly positive fields met a nonpositive value."""


class DegeneracyError(PositivityError):
    """A trajectory lost strict positivity beyond the clamp budget."""


class OrderingError(PamlabError, ValueError):
    """Two solutions expected to stay ordered crossed each other."""


class DegeneracyWarning(RuntimeWarning):
    """Clamp events exceeded the budget; mixing ratios may be ill-conditioned."""
