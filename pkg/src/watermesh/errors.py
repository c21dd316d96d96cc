"""Exception types shared across the pipeline."""


class WatermeshError(Exception):
    """Base class for all watermesh errors."""


class ParseError(WatermeshError):
    def __init__(self, line, reason):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


class EmptyMesh(WatermeshError):
    pass


class EmptyCloud(WatermeshError):
    pass


class EmptyReference(WatermeshError):
    pass


class DepthLimitInvalid(WatermeshError):
    pass


class StitchFailure(WatermeshError):
    pass


class InfeasibleInit(WatermeshError):
    pass


class DegenerateNormal(WatermeshError):
    pass


class NonConvergenceWarning(UserWarning):
    """Raised as a warning (never an error) when the optimizer hits its pass cap."""
