"""Exception types shared across gradsim modules."""


class GradsimError(Exception):
    """Base class for all gradsim errors."""


class ShapeError(GradsimError):
    """Operands have incompatible shapes or precisions."""


class ConfigError(GradsimError):
    """Invalid configuration value; message names the offending field path."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class DecodeError(GradsimError):
    """A wire payload failed structural validation."""


class DeadNodeError(GradsimError):
    """An operation was attempted on a crashed node."""


class DeadlockError(GradsimError):
    """The event queue drained before the run condition was met."""


class SimTimeLimitError(GradsimError):
    """Simulated time exceeded the configured limit before completion."""


class CollectiveFailedError(GradsimError):
    """A participant of a non-tolerant collective crashed mid-flight."""

    def __init__(self, node: int, message: str = ""):
        self.node = node
        super().__init__(message or f"collective failed: node {node} crashed")


class GroupUnavailableError(GradsimError):
    """A replica group lost its majority and cannot make progress."""

    def __init__(self, logical_node: int, message: str = ""):
        self.logical_node = logical_node
        super().__init__(
            message or f"replica group for logical node {logical_node} is unavailable"
        )


class OverflowSignal(GradsimError):
    """Non-finite gradient detected; consumed by the loss-scaling loop."""
