"""Exception types shared across the package.

The CLI maps these onto exit codes: data validation problems exit with 3,
numeric divergence with 4.
"""


class DataValidationError(ValueError):
    """Input data violates a format or domain invariant."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class DivergenceError(RuntimeError):
    """Training loss blew up or went non-finite."""
