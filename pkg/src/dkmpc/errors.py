"""Exception hierarchy shared by every module of the package."""


class DkmpcError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(DkmpcError, ValueError):
    pass


class EmptyDataset(DkmpcError, ValueError):
    pass


class ConstantFeature(DkmpcError, ValueError):
    def __init__(self, index, name=None):
        self.index = index
        self.name = name
        label = f"{index} ({name})" if name else str(index)
        super().__init__(f"feature {label} is constant; cannot min-max scale it")


class BadSplit(DkmpcError, ValueError):
    pass


class ParseError(DkmpcError, ValueError):
    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")


class NonUniformTimestep(ParseError):
    pass


class NoForwardPass(DkmpcError, RuntimeError):
    pass


class ConvergenceFailure(DkmpcError, ArithmeticError):
    pass


class EmptyBatch(DkmpcError, ValueError):
    pass


class DivergenceDetected(DkmpcError, ArithmeticError):
    pass


class NotPsd(DkmpcError, ValueError):
    pass


class MaxIterations(DkmpcError, RuntimeError):
    """Solver hit its iteration cap. ``result`` holds the best iterate."""

    def __init__(self, message, result=None):
        self.result = result
        super().__init__(message)


class NonFinite(DkmpcError, ArithmeticError):
    pass


class EulerSingularity(DkmpcError, ArithmeticError):
    pass


class GenerationFailed(DkmpcError, RuntimeError):
    pass


class ConstantTruth(DkmpcError, ValueError):
    pass
