"""Exception types shared across the package.

Validation failures (bad shapes, corrupt artifacts, unmet preconditions) and
numerical aborts (non-finite values, degenerate inputs) map to distinct CLI
exit codes, so they are kept as separate hierarchies.
"""


class ValidationError(ValueError):
    """Precondition or artifact-integrity violation."""


class NumericalError(ArithmeticError):
    """Non-finite values or a numerically degenerate computation."""
