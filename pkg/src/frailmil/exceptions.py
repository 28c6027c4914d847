class FrailMILError(Exception):
    """Base class for all errors raised by frailmil."""


class ConfigError(FrailMILError, ValueError):
    pass


class SchemaError(FrailMILError, ValueError):
    """Malformed input file; the message names the file and row."""


class EcgError(FrailMILError, ValueError):
    pass


class NoPeaksError(EcgError):
    pass


class NumericalError(FrailMILError, FloatingPointError):
    """A non-finite value appeared inside the network; the message names the layer."""
