"""Exception types raised across the package."""


class FedForgetError(Exception):
    """Base class for every error raised by fedforget."""


class ShapeMismatch(FedForgetError, ValueError):
    pass


class MissingFile(FedForgetError, FileNotFoundError):
    def __init__(self, path):
        self.path = str(path)
        super().__init__(f"required file missing: {self.path}")


class MalformedLine(FedForgetError, ValueError):
    def __init__(self, path, line_no, detail):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{self.path}:{line_no}: {detail}")


class LabelOutOfRange(FedForgetError, ValueError):
    def __init__(self, path, line_no, value):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{self.path}:{line_no}: raw label {value!r} not in 1..6")


class LengthMismatch(FedForgetError, ValueError):
    pass


class EmptyDataset(FedForgetError, ValueError):
    pass


class InsufficientData(FedForgetError, ValueError):
    """A draw asked for more windows of a class than the pool holds."""

    def __init__(self, message, *, label=None, shortfall=None):
        self.label = label
        self.shortfall = shortfall
        super().__init__(message)


class WeightSumInvalid(FedForgetError, ValueError):
    pass


class RoundOutOfRange(FedForgetError, IndexError):
    pass


class ScheduleInvalid(FedForgetError, ValueError):
    pass


class CheckpointCorrupt(FedForgetError, ValueError):
    pass


class TooFewRounds(FedForgetError, ValueError):
    pass


class DegenerateInput(FedForgetError, ValueError):
    pass


class PerplexityInfeasible(FedForgetError, ValueError):
    pass


class IoFailure(FedForgetError, OSError):
    pass
