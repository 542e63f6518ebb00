"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes, so each class carries one.
"""


class LwtaIcpError(Exception):
    exit_code = 1


class ContractError(LwtaIcpError, ValueError):
    """A caller violated an operation's precondition."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class ConfigError(LwtaIcpError, ValueError):
    exit_code = 2


class DataError(LwtaIcpError, ValueError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(f"path={path}")
        if offset is not None:
            where.append(f"offset={offset}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")


class DivergenceError(LwtaIcpError, FloatingPointError):
    """A loss term became non-finite.

    ``terms`` holds the per-term values at the time of failure.
    """

    exit_code = 4

    def __init__(self, message, terms=None, checkpoint=None):
        super().__init__(message)
        self.terms = dict(terms or {})
        self.checkpoint = checkpoint


class ExportError(LwtaIcpError, OSError):
    def __init__(self, message, path):
        super().__init__(f"{message}: {path}")
        self.path = path
