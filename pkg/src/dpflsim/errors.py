"""Exception types shared across the package."""


class DpflsimError(Exception):
    """Base class for all package errors."""


class ParameterError(DpflsimError, ValueError):
    """An argument is out of domain (wrong sign, wrong range, wrong shape)."""


class StateError(DpflsimError, RuntimeError):
    """An operation was invoked on an object whose state cannot support it."""


class EvaluationError(DpflsimError, ArithmeticError):
    """A formula evaluation is undefined for the given inputs."""


class ConfigError(DpflsimError, ValueError):
    """A config file, override, or input artifact failed validation."""
