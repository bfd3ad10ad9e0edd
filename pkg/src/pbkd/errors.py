"""Exception hierarchy shared by every module."""


class PbkdError(Exception):
    """Base class for all library errors."""


class MalformedTrajectory(PbkdError, ValueError):
    pass


class CapExceeded(PbkdError):
    """Exact enumeration requested on a trajectory space larger than the cap."""


class UnknownState(PbkdError, KeyError):
    pass


class DimensionMismatch(PbkdError, ValueError):
    pass


class EmptyDataset(PbkdError, ValueError):
    pass


class NonFinite(PbkdError, ArithmeticError):
    """An objective or parameter became NaN/inf."""


class MissingOracle(PbkdError, ValueError):
    pass


class IterationOrderViolation(PbkdError, ValueError):
    pass


class ConfigInvalid(PbkdError, ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class IncompatibleRuns(PbkdError, ValueError):
    pass


class NonPositivePoint(PbkdError, ValueError):
    pass
