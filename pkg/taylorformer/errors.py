"Exceptions raised by the taylorformer library."


class TaylorFormerError(Exception):
    "Base class for all errors raised by this package."


class DimensionError(TaylorFormerError, ValueError):
    """
    Raised when tensor shapes do not agree, for example when the inner
    dimensions of a matrix product differ or two operands cannot be broadcast.
    """


class ShapeError(DimensionError):
    """
    Raised when a spatial extent cannot be factorized the way an operation
    needs, for example when H*W does not match the token count or a resampling
    factor does not divide the image size.
    """


class ConfigurationError(TaylorFormerError, ValueError):
    "Raised for invalid settings, weights that do not match a config or bad files."


class ContractError(TaylorFormerError, RuntimeError):
    "Raised when a caller breaks the contract of the gradient tape."


class NumericalContractError(TaylorFormerError, ArithmeticError):
    "Raised when a quantity that has to be positive is not."
