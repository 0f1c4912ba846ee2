"""Exception types shared across the package."""


class MothnetError(Exception):
    """Base class for all package errors."""


class FormatError(MothnetError):
    """Byte stream does not look like the expected file format."""


class TruncationError(MothnetError):
    """File header promises more payload than the stream contains."""


class ConfigError(MothnetError):
    """Invalid configuration value or combination."""


class InsufficientClassesError(MothnetError):
    """Fewer classes available than requested."""


class InsufficientSamplesError(MothnetError):
    """A class does not have enough samples for the requested split."""


class InputError(MothnetError):
    """Malformed runtime input (wrong dimension, NaN, empty set)."""


class StateError(MothnetError):
    """Operation called on an object in the wrong state (e.g. unfitted)."""


class DegenerateError(MothnetError):
    """Statistic undefined for the given inputs (e.g. zero spread)."""
