"""Exception hierarchy shared by all modules.

The CLI maps these onto process exit codes: ArgumentError -> 2,
ParseError/FormatError/ContractError/DegenerateError -> 3, NumericError -> 4.
"""


class NoiseTransError(Exception):
    """Base class for all errors raised by this package."""


class ArgumentError(NoiseTransError):
    """A caller-supplied argument violates a precondition (bad shape, bad k, ...)."""


class ParseError(NoiseTransError):
    """A file could not be parsed; the message carries the location."""


class FormatError(NoiseTransError):
    """A file parsed but its content violates the format contract."""


class ContractError(NoiseTransError):
    """Data handed between components is inconsistent (manifest/weights mismatch)."""


class DegenerateError(NoiseTransError):
    """Geometrically degenerate input (zero scale, zero area, ...)."""


class NumericError(NoiseTransError):
    """A non-finite value appeared where the numerics contract forbids it."""
