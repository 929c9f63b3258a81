"""Exception hierarchy shared across the package."""


class MochaError(Exception):
    """Base class for all package errors."""


class InputError(MochaError, ValueError):
    """Malformed or out-of-range input."""


class ConfigError(MochaError):
    """Invalid experiment or algorithm configuration."""


class NonErgodicError(ConfigError):
    """The induced state chain is reducible or periodic."""


class AssumptionViolation(MochaError):
    """A structural assumption on features or matrices does not hold."""


class DivergenceError(MochaError):
    """Iterates left the finite / bounded region."""

    def __init__(self, message, objective=None, iteration=None):
        super().__init__(message)
        self.objective = objective
        self.iteration = iteration


class InstanceTooLargeError(MochaError):
    """Brute-force enumeration or grid generation exceeds the size guard."""


class DataError(MochaError):
    """Logged data is inconsistent with the behavior policy."""
