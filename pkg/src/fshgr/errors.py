"""Exception hierarchy shared by every module of the package."""


class FSHGRError(Exception):
    """Base class for all package errors."""


class DimensionError(FSHGRError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(FSHGRError, ValueError):
    """A configuration or operation parameter is out of its valid range."""


class FormatError(FSHGRError):
    """A binary file does not match its documented layout.

    ``offset`` is the byte position at which parsing failed (or None when the
    problem is not tied to a single position).
    """

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class CatalogError(FSHGRError):
    """The recording catalog is inconsistent (duplicate keys, missing data)."""


class SamplingError(FSHGRError):
    """A window pool cannot supply the requested N-way k-shot episodes."""


class DivergenceError(FSHGRError, FloatingPointError):
    """Training produced a non-finite loss."""
