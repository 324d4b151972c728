"""Exception hierarchy shared by every module."""


class DecompsegError(Exception):
    """Base class; the CLI maps these to exit code 2."""


class ShapeError(DecompsegError, ValueError):
    pass


class ContractError(DecompsegError, ValueError):
    """A documented precondition was violated."""


class DegenerateInputError(DecompsegError, ValueError):
    """Input is well-shaped but numerically degenerate (zero norm, empty mask, ...)."""

    def __init__(self, message, side=None):
        super().__init__(message)
        self.side = side


class NonFiniteError(DecompsegError, FloatingPointError):
    pass


class FormatError(DecompsegError):
    """Binary file could not be parsed. ``offset`` is the byte position of the failure."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ConfigError(DecompsegError):
    def __init__(self, message, key=None, line=None):
        where = []
        if key is not None:
            where.append(f"key {key!r}")
        if line is not None:
            where.append(f"line {line}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)
        self.key = key
        self.line = line
