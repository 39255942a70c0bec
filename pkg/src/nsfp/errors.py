"""Exception hierarchy shared by every module."""


class NSFPError(Exception):
    pass


class ValidationError(NSFPError, ValueError):
    """Input violates a documented invariant (non-finite value, empty cloud, ...)."""


class FormatError(NSFPError, ValueError):
    """A file could not be parsed in its declared format."""


class DimensionError(NSFPError, ValueError):
    """Array shapes or element counts disagree."""


class DivergenceError(NSFPError, ArithmeticError):
    def __init__(self, iteration, value):
        super().__init__(f"objective became non-finite ({value}) at iteration {iteration}")
        self.iteration = iteration
        self.value = value


class UndefinedMetricError(NSFPError, ArithmeticError):
    pass
