"""Exception hierarchy for selrobust.

Library code raises these; the ``runner`` layer turns them into exit codes
and ``Hint:`` log lines.
"""

from __future__ import annotations


class SelRobustError(Exception):
    """Base class for every error raised by selrobust."""

    hint: str = ""

    def __init__(self, message: str, hint: str = "") -> None:
        super().__init__(message)
        if hint:
            self.hint = hint

    def __str__(self) -> str:
        base = super().__str__()
        if self.hint:
            return f"{base}. Hint: {self.hint}"
        return base


class ShapeError(SelRobustError, ValueError):
    hint = "Check the input shapes against the network spec."


class NonFiniteError(SelRobustError, ArithmeticError):
    hint = "Lower the learning rate or inspect the inputs for NaN/Inf."


class GraphFreedError(SelRobustError, RuntimeError):
    hint = "Pass retain_graph=True to the first backward call when accumulating."


class MissingGradientError(SelRobustError, RuntimeError):
    hint = "Call backward() on the loss before sgd_step()."


class EmptyClassError(SelRobustError, ValueError):
    hint = "Every class needs at least one sample in the evaluation set."


class DegenerateInputError(SelRobustError, ValueError):
    hint = "The input carries no usable variation for this statistic."


class FloorEffectError(SelRobustError, ZeroDivisionError):
    hint = "Clean accuracy is 0; normalized accuracy is undefined (floor effect)."


class TrainingDivergedError(SelRobustError, ArithmeticError):
    hint = "Loss became non-finite; reduce the learning rate or |alpha|."


class ConfigError(SelRobustError, ValueError):
    hint = "See docs/CONFIGURATION.md for the config schema."


class StnsFormatError(SelRobustError, ValueError):
    hint = "The file is not a valid STNS tensor; regenerate it."
