"""Exception types shared across the package.

The CLI maps ValidationError (and its subclasses) to exit code 2 and
NotConvergedError to exit code 1; everything else is a genuine bug.
"""

from __future__ import annotations


class BlockspaiError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(BlockspaiError):
    """Malformed input: bad shapes, bad parameters, broken file contents."""


class DimensionMismatchError(ValidationError):
    """Operands whose shapes cannot be combined.

    Carries both shapes so callers can report them without re-deriving.
    """

    def __init__(self, op: str, left: tuple, right: tuple, detail: str = ""):
        self.op = op
        self.left = left
        self.right = right
        msg = f"{op}: incompatible shapes {left} and {right}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class SingularMatrixError(BlockspaiError):
    """A matrix that must be invertible (or positive definite) is not."""


class MissingSignalError(BlockspaiError):
    """A local estimate was asked for without all required neighbor signals."""

    def __init__(self, subsystem: int, missing_outputs: list[int], missing_inputs: list[int]):
        self.subsystem = subsystem
        self.missing_outputs = sorted(missing_outputs)
        self.missing_inputs = sorted(missing_inputs)
        parts = []
        if self.missing_outputs:
            parts.append(f"output signals from {self.missing_outputs}")
        if self.missing_inputs:
            parts.append(f"input signals from {self.missing_inputs}")
        super().__init__(
            f"subsystem {subsystem}: missing " + " and ".join(parts)
        )


class NotConvergedError(BlockspaiError):
    """An iterative solve that had to converge did not."""
