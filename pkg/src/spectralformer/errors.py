"""Exception hierarchy shared by every module."""


class SpectralFormerError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SpectralFormerError, ValueError):
    pass


class DimensionError(SpectralFormerError, ValueError):
    pass


class ContractError(SpectralFormerError, ValueError):
    """A caller violated an operation's precondition."""


class DataError(SpectralFormerError, ValueError):
    pass


class ParseError(DataError):
    """Malformed HSIF or checkpoint file."""


class TrainingError(SpectralFormerError, RuntimeError):
    pass
