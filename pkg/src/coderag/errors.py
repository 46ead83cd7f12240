"""Exception types shared across the toolkit."""


class DataError(ValueError):
    """Input data violates a documented format or precondition."""


class InvariantError(RuntimeError):
    """An internal invariant was violated (a bug, not bad input)."""
