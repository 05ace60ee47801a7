"""Exception types raised by the simulator."""


class FlexMoEError(Exception):
    """Base class for all simulator errors."""


class InvalidParameter(FlexMoEError, ValueError):
    pass


class InvalidAssignment(FlexMoEError, ValueError):
    pass


class InvalidFeedback(FlexMoEError, ValueError):
    pass


class NumericalFailure(FlexMoEError, ArithmeticError):
    pass


class EmptyRound(FlexMoEError, ValueError):
    pass


class DimensionMismatch(FlexMoEError, ValueError):
    pass


class InfeasibleAfterRelaxation(FlexMoEError, RuntimeError):
    pass


class ConfigError(FlexMoEError, ValueError):
    """Bad configuration; ``key`` names the offending entry when known."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


class RoundFailed(FlexMoEError, RuntimeError):
    def __init__(self, round_index: int, cause: BaseException):
        super().__init__(f"round {round_index} failed: {cause}")
        self.round_index = round_index
        self.cause = cause
