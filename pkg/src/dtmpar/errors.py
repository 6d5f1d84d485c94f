"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when tensor shapes disagree; the message names the offending axes."""


class DegenerateBatchError(ValueError):
    """Raised when batch statistics cannot be formed (e.g. a single-sample vector batch)."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or infinity reaches a place that must stay finite."""


class SchemaMismatchError(ValueError):
    """Raised when attribute schemas of two artifacts disagree."""


class FormatError(ValueError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line
