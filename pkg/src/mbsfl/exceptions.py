"""Exception hierarchy shared by every module."""


class MBSFLError(Exception):
    """Base class for all errors raised by this package."""


class SpecError(MBSFLError, ValueError):
    """Layer specifications are inconsistent (broken dimension chain, misplaced head)."""


class ShapeError(MBSFLError, ValueError):
    """Array shapes do not match the model or each other."""


class WeightError(MBSFLError, ValueError):
    """Aggregation weights are negative or do not sum to one."""


class FormatError(MBSFLError, ValueError):
    """An input file is malformed."""


class NumericError(MBSFLError, ArithmeticError):
    """A computation produced a non-finite value.

    ``step`` is filled in by the training drivers so an aborted run reports
    the SGD step at which it failed.
    """

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class ConfigError(MBSFLError, ValueError):
    """Invalid experiment configuration; ``key`` names the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key
