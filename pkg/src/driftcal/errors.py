"""Exception hierarchy shared across the package."""


class DriftCalError(Exception):
    """Base class for all package errors."""


class InvalidInputError(DriftCalError, ValueError):
    """Argument outside an operation's domain (non-finite logits, negative variance, ...)."""


class ConfigError(DriftCalError, ValueError):
    """Bad configuration value or unknown option."""


class ParseError(DriftCalError, ValueError):
    """A file could not be read as the expected format."""


class VersionError(ParseError):
    """A file carries an unknown format/version tag."""


class NumericalError(DriftCalError, ArithmeticError):
    """A numerical procedure produced non-finite values."""


class TrainingError(NumericalError):
    """Gradient descent diverged."""
