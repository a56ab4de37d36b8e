"""Exception types raised across p4net."""


class P4NetError(Exception):
    """Base class for all p4net errors."""


class NumericDomainError(P4NetError, ValueError):
    """Input contains NaN/inf or lies outside a function's domain."""


class ShapeError(P4NetError, ValueError):
    """Array shapes or lengths do not line up."""


class ParameterError(P4NetError, ValueError):
    """A scalar or structural parameter is out of its allowed range."""


class BudgetExhaustedError(P4NetError, RuntimeError):
    """A client tried to spend privacy budget it no longer has."""


class ParseError(P4NetError, ValueError):
    """A file or byte buffer could not be decoded.

    Attributes:
        field: name of the offending field, when known.
        offset: byte offset at which decoding failed, when known.
    """

    def __init__(self, message: str, field: str | None = None, offset: int | None = None):
        where = []
        if field is not None:
            where.append(f"field={field}")
        if offset is not None:
            where.append(f"offset={offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.field = field
        self.offset = offset


class ConfigError(P4NetError, ValueError):
    """Experiment configuration is invalid.

    Attributes:
        field: the configuration key at fault.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
