class DomainError(ValueError):
    """An argument lies outside the domain of a map or distribution."""


class NoCriticalInitError(DomainError):
    """No (sigma_w, sigma_b) pair makes the variance map the identity."""


class UnsupportedActivationError(DomainError):
    """The requested closed form only exists for rectifier activations."""


class FitError(ValueError):
    """Too few usable points for a log-linear depth-scale fit."""
