"""Exception types shared across the package.

The CLI maps these onto its exit codes: validation problems exit 1,
numerical/runtime failures exit 2.
"""


class ValidationError(ValueError):
    """Bad input: malformed config, shape mismatch, out-of-range argument."""


class HashMismatchError(ValidationError):
    """A checkpoint was paired with a dataset it was not trained on."""


class NumericalError(ArithmeticError):
    """A NaN/Inf appeared during a computation."""
