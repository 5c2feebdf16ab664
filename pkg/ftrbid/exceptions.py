class FTRBidError(Exception):
    """
    Base class for custom exceptions thrown by ftrbid.
    """


class ConfigError(FTRBidError):
    """
    This exception is thrown if there is an issue with the configuration file or a scenario document.
    """


class SchemaError(ConfigError):
    """
    This exception is thrown if a scenario document is missing a field or holds a value of the wrong type.
    """


class TopologyError(ConfigError):
    """
    This exception is thrown if the network is disconnected, references a bus that doesn't exist,
    or contains a line with invalid electrical data.
    """


class SolverError(FTRBidError):
    """
    This exception is thrown if a numerical backend fails to produce a usable result.
    """


class SingularNetworkError(SolverError):
    """
    This exception is thrown if the reduced susceptance matrix can't be inverted.
    """


class InfeasibleDispatchError(SolverError):
    """
    This exception is thrown if the DC optimal power flow has no feasible dispatch.
    """


class UnboundedError(SolverError):
    """
    This exception is thrown if the DC optimal power flow is unbounded. (e.g. negative costs without capacity limits)
    """


class InfeasibleInstanceError(SolverError):
    """
    This exception is thrown if the FTR clearing problem can't satisfy its minimum awards.
    """


class InfeasibleError(SolverError):
    """
    This exception is thrown if the joint complementarity problem has no feasible point.
    """


class NonconvergenceError(SolverError):
    """
    This exception is thrown if a solver stops before meeting its tolerances.
    The best iterate found is available through the ``solution`` attribute.
    """

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


class MetricError(FTRBidError):
    """
    Base class for degenerate inputs to the risk and contribution metrics.
    """


class ZeroDispatchError(MetricError):
    """
    This exception is thrown if the total generator output is not positive.
    """


class DegenerateWeightsError(MetricError):
    """
    This exception is thrown if every adverse load effect is zero and the uniform fallback is disabled.
    """


class DegenerateChanceError(MetricError):
    """
    This exception is thrown if the chance coefficient denominator is not positive.
    """


class ZeroPerturbationError(MetricError):
    """
    This exception is thrown if a finite difference is requested with a zero output change.
    """


class InconsistentBoundsError(FTRBidError):
    """
    This exception is thrown if a player's FTR lower bound exceeds its upper bound.
    """
