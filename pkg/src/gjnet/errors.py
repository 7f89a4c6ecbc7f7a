"""Exception hierarchy shared across the package."""


class GJNError(Exception):
    """Base class for analysis errors (CLI exit code 1)."""


class ConfigError(GJNError):
    """Invalid or malformed configuration (CLI exit code 2)."""


class NotSubStochasticDual(GJNError):
    pass


class NotDoubleSemiStochastic(GJNError):
    pass


class NonSummableColumn(GJNError):
    pass


class Divergent(GJNError):
    pass


class TailExhausted(GJNError):
    pass


class QueueExplosion(GJNError):
    pass


class InvalidSpec(GJNError):
    pass


class MassLoss(GJNError):
    pass


class OverflowBreach(GJNError):
    pass


class NotConverged(GJNError):
    def __init__(self, message, oscillation=None):
        super().__init__(message)
        self.oscillation = oscillation


class Overloaded(GJNError):
    pass


class Infinite(GJNError):
    pass


class ZeroMean(GJNError):
    pass


class TooFewSamples(GJNError):
    pass


class DegenerateSeries(GJNError):
    pass


class EitherNotConverged(GJNError):
    pass


class ReplicationError(GJNError):
    def __init__(self, seed, cause):
        super().__init__(f"replication with seed {seed} failed: {cause}")
        self.seed = seed
        self.cause = cause


class ConservationBreach(GJNError):
    """Simulator bookkeeping lost or created a customer."""
