"""Exception taxonomy shared across the package."""


class DistillwsdError(Exception):
    """Base class for all package errors."""


class DimensionError(DistillwsdError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(DistillwsdError, ArithmeticError):
    """Non-finite values entered a computation that requires finite input."""


class DomainError(DistillwsdError, ValueError):
    """An argument lies outside the operation's mathematical domain."""


class ContractError(DistillwsdError, ValueError):
    """A caller violated an API precondition."""


class StateError(DistillwsdError, RuntimeError):
    """The object is in the wrong state for the requested operation."""


class InputError(DistillwsdError, ValueError):
    """User-supplied data (images, datasets, files) is unusable."""


class ConfigError(DistillwsdError, ValueError):
    """A configuration file or value is invalid."""


class ManifestParseError(InputError):
    """A manifest line could not be parsed.  Carries the 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line
