class ShapeError(ValueError):
    """Operand dimensions do not conform."""


class ProtocolFault(RuntimeError):
    """A boundary message was missing, duplicated or out of order."""


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DataFormatError(ValueError):
    """A dataset file does not follow the documented CSV layout."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
