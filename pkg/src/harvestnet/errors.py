"""Exception types shared across the package.

The CLI maps each family to its own exit code, so library code raises the
most specific class that applies.
"""


class HarvestNetError(Exception):
    """Base class for all package errors."""


class ParseError(HarvestNetError, ValueError):
    """A file or string could not be parsed.

    ``line`` is the 1-based line number when the source is line oriented.
    """

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class ValidationError(HarvestNetError, ValueError):
    """Input parsed fine but violates a documented precondition."""


class InvalidParamsError(ValidationError):
    """Quantization parameters are unusable (non-positive or non-finite scale)."""


class NonFiniteError(ValidationError):
    """A tensor contained NaN or infinity."""

    def __init__(self, index, value):
        self.index = index
        self.value = value
        super().__init__(f"non-finite element {value!r} at index {index}")


class DivergenceError(HarvestNetError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, step, history):
        self.epoch = epoch
        self.step = step
        self.history = history
        super().__init__(f"loss became non-finite at epoch {epoch}, step {step}")
