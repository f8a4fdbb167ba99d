"""Exception types raised across the package."""


class CQECError(Exception):
    """Base class for all package errors."""


class InputError(CQECError, ValueError):
    """An argument is outside the domain of the operation."""


class StructureError(CQECError, ValueError):
    """An operator lacks the block structure an operation relies on."""


class DegenerateExtractionError(CQECError, ArithmeticError):
    """The code-space population is too small to normalize the logical state."""

    def __init__(self, p_code):
        super().__init__(f"code-space probability {p_code:.3e} is below 1e-12")
        self.p_code = p_code


class DivergenceError(CQECError, ValueError):
    """A closed-form expression diverges for the given thresholds."""


class ConfigError(CQECError, ValueError):
    """A configuration is inconsistent or numerically unusable."""


class InvariantViolation(CQECError, RuntimeError):
    """A physical-state invariant broke during a simulation."""

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step
