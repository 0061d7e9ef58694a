"""Exception types shared across the toolkit."""


class DomainError(ValueError):
    """An argument lies outside the domain of an operation."""


class ConfigError(ValueError):
    """A parameter set or configuration is structurally invalid."""


class FormatError(ValueError):
    """A tensor or image file could not be decoded."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class NumericalError(RuntimeError):
    """A computation produced non-finite values."""
