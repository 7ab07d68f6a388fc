"""Exception hierarchy shared by the services."""


class SimulationError(RuntimeError):
    """Raised when a simulation cannot continue (overflow, broken invariant)."""


class ProfileError(ValueError):
    """Raised when a profile violates the H(R) invariants."""


class DomainError(ValueError):
    """Raised when a formula is evaluated outside its domain."""


class FrontOutOfWindowError(ValueError):
    """Raised when the 1/2 level set is not bracketed by the spatial window."""


class StabilityError(ValueError):
    """Raised when a grid violates the stability constraint of the scheme."""


class TrajectoryError(ValueError):
    """Raised when a trajectory lacks the resolution an estimator needs."""


class ConfigError(ValueError):
    """Raised when an experiment configuration is incomplete or inconsistent."""
