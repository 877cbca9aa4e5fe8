"""Exception hierarchy shared by the library and the command line."""
from typing import Optional

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ComboLabError(Exception):
    """Base class for every error raised by combolab."""

    exit_code = EXIT_USAGE


class UsageError(ComboLabError):
    """Bad command line arguments or run configuration."""


class ContractError(ComboLabError, ValueError):
    """A pre-condition of an operation was violated."""


class DimensionError(ComboLabError, ValueError):
    """Operand shapes are incompatible."""

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__("{0}: incompatible shapes {1}".format(op, joined))


class SampleShapeError(DimensionError):
    """Dataset samples do not have the shape the model was configured for."""

    exit_code = EXIT_DATA


class InputError(ComboLabError, ValueError):
    """A data value cannot be processed (e.g. a NaN score)."""

    exit_code = EXIT_DATA


class ParseError(ComboLabError):
    """A text dataset could not be parsed."""

    exit_code = EXIT_DATA

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = "{0}:".format(path)
        if line is not None:
            where += "{0}:".format(line)
        super().__init__("{0} {1}".format(where, message).strip())


class FormatError(ComboLabError):
    """A binary dataset or checkpoint is malformed."""

    exit_code = EXIT_DATA

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = "{0} (at byte offset {1})".format(message, offset)
        super().__init__(message)


class ImbalanceError(ComboLabError):
    """A class has no samples, so its class weight is undefined."""

    exit_code = EXIT_DATA

    def __init__(self, empty_class: int, counts):
        self.empty_class = empty_class
        self.counts = list(counts)
        super().__init__(
            "class {0} has no training samples (counts={1}); merge bins or resplit".format(
                empty_class, self.counts
            )
        )


class DomainError(ComboLabError, ArithmeticError):
    """A primitive was evaluated outside its domain."""

    exit_code = EXIT_NUMERIC


class DivergenceError(ComboLabError):
    """Training produced a non-finite loss or gradient."""

    exit_code = EXIT_NUMERIC

    def __init__(self, message: str, step: Optional[int] = None,
                 loss: Optional[float] = None, parameter: Optional[str] = None):
        self.step = step
        self.loss = loss
        self.parameter = parameter
        details = []
        if step is not None:
            details.append("step={0}".format(step))
        if loss is not None:
            details.append("loss={0!r}".format(loss))
        if parameter is not None:
            details.append("parameter={0}".format(parameter))
        if details:
            message = "{0} ({1})".format(message, ", ".join(details))
        super().__init__(message)


class GradCheckFailure(ComboLabError):
    """Analytic and numeric gradients disagree beyond tolerance."""

    exit_code = EXIT_NUMERIC
