class ContractViolation(ValueError):
    """An input broke a documented precondition (shape, symmetry, sign)."""


class NumericalFailure(ArithmeticError):
    """A factorization failed even after the maximum diagonal jitter.

    ``condition`` holds the 2-norm condition estimate of the offending
    matrix (``inf`` when it is exactly singular).
    """

    def __init__(self, message, condition=float("nan")):
        super().__init__(f"{message} (condition estimate {condition:.3e})")
        self.condition = condition
