"""Exception types shared across the package."""


class InputError(ValueError):
    """Malformed or out-of-range input."""


class DomainError(ValueError):
    """Quantity is undefined for the given parameters (e.g. a divergent MGF)."""


class NumericError(ArithmeticError):
    """An iterative routine produced non-finite values."""


class UnsupportedError(NotImplementedError):
    """Requested branch or problem size is not supported."""


class InfeasibleDualError(ValueError):
    """A dual point has conjugate -inf, so it certifies nothing."""
