"""Exception hierarchy shared by every module."""


class FDError(Exception):
    """Base class for all simulator errors."""


class ConfigError(FDError, ValueError):
    """A configuration value or model/data dimension is invalid."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class InputError(FDError, ValueError):
    """Arguments are malformed (bad label, misaligned lengths, ...)."""


class NumericError(FDError, ArithmeticError):
    """A computation produced NaN/Inf."""

    def __init__(self, message: str, round_idx: int | None = None, client_id: int | None = None):
        self.round_idx = round_idx
        self.client_id = client_id
        ctx = []
        if round_idx is not None:
            ctx.append(f"round {round_idx}")
        if client_id is not None:
            ctx.append(f"client {client_id}")
        if ctx:
            message = f"{message} ({', '.join(ctx)})"
        super().__init__(message)


class ParseError(FDError, ValueError):
    """A data file could not be parsed.

    ``offset`` is a byte offset for binary formats and a 1-based line
    number for text formats.
    """

    def __init__(self, message: str, offset: int | None = None, unit: str = "byte"):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at {unit} {offset})"
        super().__init__(message)
