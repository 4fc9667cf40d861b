"""Exception hierarchy shared by every dpgrad module."""


class DPGradError(Exception):
    """Base class for all errors raised by dpgrad."""


class DimensionError(DPGradError, ValueError):
    pass


class ParameterError(DPGradError, ValueError):
    pass


class LifecycleError(DPGradError, RuntimeError):
    """An operation was called at the wrong stage of the gradient lifecycle."""


class RegistryError(DPGradError, KeyError):
    def __str__(self):
        # KeyError repr-quotes its message; keep it readable.
        return str(self.args[0]) if self.args else ""


class NumericError(DPGradError, FloatingPointError):
    pass


class CalibrationError(DPGradError, ValueError):
    pass


class IngestionError(DPGradError, ValueError):
    pass


class ConfigError(DPGradError, ValueError):
    pass
