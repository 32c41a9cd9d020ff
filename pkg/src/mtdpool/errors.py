"""Exception types shared across the package."""


class RejectedInput(ValueError):
    """An argument violated a precondition (shape, range, emptiness)."""


class NumericOverflow(ArithmeticError):
    """A forward/backward pass produced non-finite values."""


class AttackAborted(RuntimeError):
    """A black-box attack could not complete because its oracle failed."""


class GenerationFailure(RuntimeError):
    """Student generation could not satisfy the accuracy gate."""


class BudgetExhausted(RuntimeError):
    """The active pool expired and the standby buffer was empty."""
