"""Exception hierarchy. ``exit_code`` is what the CLI returns for each kind."""


class HdcamError(Exception):
    exit_code = 1


class ConfigError(HdcamError, ValueError):
    """Invalid architecture, operator arguments or run configuration."""

    exit_code = 2


class ShapeError(ConfigError):
    pass


class UsageError(HdcamError):
    exit_code = 2


class DataError(HdcamError, ValueError):
    exit_code = 3


class IngestionError(DataError):
    """A recording file failed validation."""


class ProtocolError(DataError):
    pass


class NumericalError(HdcamError, FloatingPointError):
    exit_code = 3


class CheckpointError(HdcamError):
    exit_code = 4
