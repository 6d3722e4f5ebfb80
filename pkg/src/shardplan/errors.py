"""Exception hierarchy shared across shardplan modules."""


class ShardPlanError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(ShardPlanError):
    """An input object violates one of its declared invariants."""


class ConfigError(ShardPlanError):
    """A configuration document could not be parsed or validated."""


class InfeasibleError(ShardPlanError):
    """A requested plan cannot be realized on the given hardware."""
