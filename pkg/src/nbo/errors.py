"""Exception types shared across the engine."""


class ContractError(ValueError):
    """A caller violated an operation's preconditions."""


class DimensionError(ContractError):
    pass


class NonFiniteError(ContractError):
    pass


class ModelFormatError(ValueError):
    """A model or config file could not be parsed."""


class AucUndefinedError(ContractError):
    pass


class OutOfOrderError(ValueError):
    pass


class StaleEventError(ValueError):
    pass


class SnapshotError(ValueError):
    pass


class ConfigError(ValueError):
    pass
