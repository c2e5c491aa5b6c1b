"""Exception types shared across the engine."""


class BlagentError(Exception):
    """Base class for all engine errors."""


class InputError(BlagentError):
    """Bad user input: files, tickers, config values."""


class MissingTicker(InputError):
    def __init__(self, ticker):
        super().__init__(f"ticker {ticker!r} absent from source data")
        self.ticker = ticker


class NonPositivePrice(InputError):
    pass


class InsufficientHistory(InputError):
    pass


class TooFewSamples(BlagentError):
    """Covariance estimation needs more rows than assets plus one."""


class SingularCovariance(BlagentError):
    """SPD factorization failed even after ridge regularization."""


class ShapeMismatch(BlagentError):
    """Tensor primitive received incompatible operand shapes."""


class NotScalar(BlagentError):
    """Backward pass started from a non-scalar tensor."""


class Bankrupt(BlagentError):
    """Total asset value dropped to or below zero; the episode halts."""

    def __init__(self, message, period=None, day=None, value=None):
        super().__init__(message)
        self.period = period
        self.day = day
        self.value = value


class DivergenceDetected(BlagentError):
    """A parameter or tracked metric went non-finite during training."""


class EmptySeries(BlagentError):
    pass


class MissingCheckpoint(InputError):
    pass
