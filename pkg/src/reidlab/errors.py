"""Shared exception types.

Everything user-facing derives from ValueError or RuntimeError so callers can
catch broadly; the CLI maps ConfigKeyError to exit code 2 and missing files to
exit code 3.
"""


class ShapeError(ValueError):
    """Operands have incompatible or unexpected dimensions."""


class DomainError(ValueError):
    """Numerical input outside the mathematical domain of an op (log of <= 0, div by 0)."""


class ValidationError(ValueError):
    """A parameter value is outside its documented range."""


class ConfigError(ValueError):
    """A configuration is inconsistent (non-integral conv output, bad preset)."""


class ConfigKeyError(ConfigError):
    """Unknown configuration key in a config file or CLI flag."""

    def __init__(self, key: str):
        super().__init__(f"unknown config key: {key!r}")
        self.key = key


class ContractError(RuntimeError):
    """An API precondition was violated (non-scalar backward, empty batch)."""


class DegenerateGradientError(ValueError):
    """A gradient vector has near-zero norm, so its direction is meaningless."""
