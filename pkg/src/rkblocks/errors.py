"""Exception types shared across the package."""


class RKBlocksError(Exception):
    pass


class DimensionError(RKBlocksError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(RKBlocksError):
    """A documented precondition was violated by the caller."""


class ConfigError(RKBlocksError, ValueError):
    """Invalid model, optimizer or experiment configuration."""


class DataError(RKBlocksError, ValueError):
    """Token ids or corpus contents are invalid."""


class DivergenceError(RKBlocksError, FloatingPointError):
    """A NaN or Inf showed up during integration or training."""

    def __init__(self, message, step=None, records=None):
        super().__init__(message)
        self.step = step
        self.records = records if records is not None else []
