class TSExpertsError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(TSExpertsError, ValueError):
    pass


class DivergenceError(TSExpertsError):
    """Loss became non-finite or exceeded the divergence threshold."""


class InvariantViolation(TSExpertsError):
    """A frozen tensor changed or received gradient."""


class StageMismatch(TSExpertsError):
    """Checkpoint stage is incompatible with the requested operation."""


class ConfigError(TSExpertsError, ValueError):
    pass
