"""Exception hierarchy shared by all pcreg modules."""


class PcregError(Exception):
    """Base class for every error raised by pcreg."""


class ParameterError(PcregError, ValueError):
    """An argument is outside its admissible range."""


class ShapeError(PcregError, ValueError):
    """Tensor or array shapes are incompatible."""


class ValidationError(PcregError, ValueError):
    """An input object violates its invariants (e.g. non-orthogonal rotation)."""


class DegenerateError(PcregError, ArithmeticError):
    """A closed-form solve has no unique solution (e.g. collinear points)."""


class ParseError(PcregError, ValueError):
    """A file could not be parsed; carries the offending path and line."""

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


class FormatError(PcregError, ValueError):
    """A file format is not supported."""


class CheckpointError(PcregError, IOError):
    """A checkpoint is corrupt, truncated, or has an unknown version."""


class TrainingError(PcregError, RuntimeError):
    """Training hit a non-finite loss or gradient."""
