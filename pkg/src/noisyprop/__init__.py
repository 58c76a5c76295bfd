"""Mean-field signal propagation in noise-regularised deep networks."""

__version__ = "0.1.0"

from ._backend import BACKEND  # noqa: E402
from .activations import DEFAULT_RULE, Activation, QuadratureRule  # noqa: E402
from .errors import DomainError, FitError, NoCriticalInitError, UnsupportedActivationError  # noqa: E402
from .meanfield import (  # noqa: E402
    InitSpec,
    LayerTrace,
    NetworkShape,
    chi,
    correlation_fixed_point,
    correlation_step_general,
    correlation_step_relu_critical,
    critical_init,
    depth_scale,
    fit_depth_scale,
    overflow_depth,
    variance_fixed_point,
    variance_step,
    variance_trace,
)
from .noise import NoiseSpec, second_moment  # noqa: E402

__all__ = [
    "BACKEND",
    "DEFAULT_RULE",
    "Activation",
    "DomainError",
    "FitError",
    "InitSpec",
    "LayerTrace",
    "NetworkShape",
    "NoCriticalInitError",
    "NoiseSpec",
    "QuadratureRule",
    "UnsupportedActivationError",
    "chi",
    "correlation_fixed_point",
    "correlation_step_general",
    "correlation_step_relu_critical",
    "critical_init",
    "depth_scale",
    "fit_depth_scale",
    "overflow_depth",
    "second_moment",
    "variance_fixed_point",
    "variance_step",
    "variance_trace",
]
