"""Exception hierarchy shared by the solvers, generators and CLI."""


class MsssaError(Exception):
    """Base class for all errors raised by this package."""


class InvalidDimensionError(MsssaError, ValueError):
    """Matrix shapes do not conform."""


class InvalidArgumentError(MsssaError, ValueError):
    """A scalar argument lies outside its admissible range."""


class NumericError(MsssaError, ArithmeticError):
    """A numerical routine failed (non-convergence, non-finite values)."""


class IllConditionedError(NumericError):
    """The diagonalized Sylvester divisor grid has entries below the floor."""

    def __init__(self, message, min_value=None, index=None):
        super().__init__(message)
        self.min_value = min_value
        self.index = index


class DivergenceError(NumericError):
    """An iterative solver produced a non-finite objective."""


class RankDeficiencyError(NumericError):
    """A greedy active-set least-squares system became singular."""


class HeuristicFailureError(NumericError):
    """No penalty pair on the search grid produced a usable iteration."""


class CoherenceInfeasibleError(MsssaError, RuntimeError):
    """Rejection sampling could not reach the requested dictionary coherence."""


class UndefinedMetricError(MsssaError, ValueError):
    """The recovery distance is undefined for an all-zero reference."""


class ReferenceFailureError(NumericError):
    """The high-precision reference run did not converge."""


class IOFailure(MsssaError, OSError):
    """A matrix, configuration or report file could not be read or written."""
