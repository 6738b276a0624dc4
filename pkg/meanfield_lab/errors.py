"""
Exception types shared by the solvers and the command line.
"""

from typing import Optional


class LabError(Exception):
    """Base class for every error raised by meanfield-lab."""


class ConfigError(LabError, ValueError):
    """Configuration file or section failed validation."""

    def __init__(self, message: str, section: Optional[str] = None):
        self.section = section
        if section:
            message = f"[{section}] {message}"
        super().__init__(message)


class ModelError(LabError, ValueError):
    """Invalid model parameters or an operation the model kind does not support."""


class TransportError(LabError, ValueError):
    """Measures that cannot be compared, or a distance request over the solver limits."""


class NumericalError(LabError, ArithmeticError):
    """A solver could not produce a valid state."""


class CFLViolation(NumericalError):
    """Time step too large for the stability condition of a scheme."""

    def __init__(self, message: str, section: Optional[str] = None):
        self.section = section
        if section:
            message = f"[{section}] {message}"
        super().__init__(message)


class NonFiniteStateError(NumericalError):
    """State contains NaN or infinite entries."""

    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)


class MassDriftError(NumericalError):
    """Total mass changed by more than the per-step tolerance."""


class SolverConvergenceError(NumericalError):
    """Linear or elliptic solve did not reach the requested residual."""


def annotate(error: LabError, context: str) -> LabError:
    """
    Return a copy of an error with a context prefix in its message.

    The copy keeps the original class so exit-code mapping is unchanged.

    Args:
        error: Error raised by a worker
        context: Label such as ``"replica 3"`` or ``"eps_p=0.01"``

    Returns:
        New error of the same type
    """
    annotated = error.__class__.__new__(error.__class__)
    LabError.__init__(annotated, f"{context}: {error}")
    annotated.__dict__.update(error.__dict__)
    return annotated
