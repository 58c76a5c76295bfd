"""Mean-field maps for noisy deep networks.

Forward: the variance map, the correlation map (general quadrature form and
the closed form for critically initialised ReLU), their fixed points, the
slope chi(c*) and the correlation depth scale. Backward: error variance and
error covariance recursions. Plus the overflow-depth predictor for
off-critical rectifier networks and a log-linear depth-scale fit.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .activations import (
    DEFAULT_RULE,
    Activation,
    QuadratureRule,
    clamp_correlation,
    gauss_cross_moment,
    gauss_moment_dphi_sq,
    gauss_moment_phi_sq,
)
from .errors import DomainError, FitError, NoCriticalInitError, UnsupportedActivationError
from .noise import NoiseMode, NoiseSpec, second_moment

FLOAT32_MAX = 3.4028235e38
FLOAT32_TINY = 1.1754944e-38

FP_TOL = 1e-12
FP_MAX_ITER = 100_000
FP_DIVERGENCE = 1e300
FIT_FLOOR = 1e-10


@dataclass(frozen=True)
class InitSpec:
    """Weight and bias scales; each weight has variance ``sigma_w**2 / fan_in``."""

    sigma_w: float
    sigma_b: float = 0.0

    def __post_init__(self):
        if not self.sigma_w > 0:
            raise DomainError(f"sigma_w must be positive, got {self.sigma_w}")
        if not self.sigma_b >= 0:
            raise DomainError(f"sigma_b must be non-negative, got {self.sigma_b}")

    @classmethod
    def from_variances(cls, sigma_w2: float, sigma_b2: float = 0.0) -> InitSpec:
        return cls(math.sqrt(sigma_w2), math.sqrt(sigma_b2))

    @property
    def sigma_w2(self) -> float:
        return self.sigma_w**2

    @property
    def sigma_b2(self) -> float:
        return self.sigma_b**2


@dataclass(frozen=True)
class NetworkShape:
    """Layer widths ``D_0 .. D_L``. Widths may be real-valued for theory checks."""

    widths: tuple

    def __post_init__(self):
        w = tuple(self.widths)
        if len(w) < 2:
            raise DomainError("a network needs at least an input and one layer")
        if any(not d >= 1 for d in w):
            raise DomainError(f"widths must be >= 1, got {w}")
        object.__setattr__(self, "widths", w)

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    @classmethod
    def constant(cls, width, depth: int) -> NetworkShape:
        return cls((width,) * (depth + 1))

    @classmethod
    def growing(cls, d0, depth: int, factor: float, integer: bool = True) -> NetworkShape:
        """``D_{l+1} = ceil(factor * D_l)``, or exactly ``factor * D_l`` if not ``integer``."""
        widths = [d0]
        for _ in range(depth):
            nxt = factor * widths[-1]
            # guard against 2.0000000000000004-style round-up
            widths.append(math.ceil(nxt - 1e-9) if integer else nxt)
        return cls(tuple(widths))


class TraceKind(str, enum.Enum):
    VARIANCE = "variance"
    CORRELATION = "correlation"
    ERROR_VARIANCE = "error_variance"
    ERROR_COVARIANCE = "error_covariance"


@dataclass(frozen=True)
class LayerTrace:
    """Per-layer values of one statistic, index = layer.

    ``overflow_layer``/``underflow_layer`` mark the first layer whose value
    leaves the configured representable range (variance traces only).
    """

    kind: TraceKind
    values: np.ndarray
    initial: float
    overflow_layer: int | None = None
    underflow_layer: int | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "kind", TraceKind(self.kind))

    def __len__(self):
        return len(self.values)

    @property
    def layers(self) -> np.ndarray:
        return np.arange(len(self.values))


@dataclass(frozen=True)
class FixedPointResult:
    value: float
    residual: float
    iterations: int
    converged: bool
    marginal: bool = False


@dataclass(frozen=True)
class DepthScaleFit:
    """``ln|c^l - c*| ~ slope * l + intercept``; ``xi = -1/slope``."""

    slope: float
    intercept: float
    xi: float
    layers: np.ndarray
    r_squared: float


# ---------------------------------------------------------------------------
# forward variance
# ---------------------------------------------------------------------------


def _noise_term(moment: float, noise: NoiseSpec) -> float:
    if noise.mode is NoiseMode.MULTIPLICATIVE:
        return moment * second_moment(noise)
    if noise.mode is NoiseMode.ADDITIVE:
        return moment + second_moment(noise)
    return moment


def variance_step(q_prev: float, init: InitSpec, noise: NoiseSpec, act: Activation,
                  rule: QuadratureRule = DEFAULT_RULE) -> float:
    """One application of the noisy variance map."""
    if not q_prev >= 0:
        raise DomainError(f"variance must be non-negative, got {q_prev}")
    m = gauss_moment_phi_sq(act, q_prev, rule)
    return init.sigma_w2 * _noise_term(m, noise) + init.sigma_b2


def variance_trace(q0: float, depth: int, init: InitSpec, noise: NoiseSpec, act: Activation,
                   rule: QuadratureRule = DEFAULT_RULE, overflow: float = FLOAT32_MAX,
                   underflow: float = FLOAT32_TINY) -> LayerTrace:
    """Iterate the variance map ``depth`` times from ``q0``.

    Values outside ``[underflow, overflow]`` are flagged, not rejected. An
    exactly zero trace (zero input, no bias, no additive noise) is not flagged.
    """
    if not q0 >= 0:
        raise DomainError(f"q0 must be non-negative, got {q0}")
    if depth < 1:
        raise DomainError("depth must be at least 1")
    vals = [float(q0)]
    over = under = None
    for layer in range(1, depth + 1):
        q = variance_step(vals[-1], init, noise, act, rule) if math.isfinite(vals[-1]) else math.inf
        vals.append(q)
        if over is None and not q <= overflow:
            over = layer
        if under is None and 0 < q < underflow:
            under = layer
    return LayerTrace(TraceKind.VARIANCE, vals, float(q0), over, under)


def rectifier_slope(init: InitSpec, noise: NoiseSpec, act: Activation) -> float:
    """Slope of the (affine) rectifier variance map, ``sigma_w^2 mu2 (1+alpha^2) / 2``.

    Additive noise shifts the map but leaves the slope at ``sigma_w^2 (1+alpha^2)/2``.
    """
    if not act.is_rectifier:
        raise UnsupportedActivationError(f"{act} has no affine variance map")
    mu2 = second_moment(noise) if noise.is_multiplicative else 1.0
    return init.sigma_w2 * mu2 * 0.5 * (1.0 + act.alpha**2)


def _solve_fixed_point(f, x0, tol, max_iter, divergence, lo=-math.inf, hi=math.inf):
    """Fixed-point iteration with safeguarded Steffensen acceleration.

    The accelerated point is only taken when the local secant slope shows
    contraction and the point stays inside ``[lo, hi]``, so repelling fixed
    points (e.g. q = 0 of an exploding map) are never reported. On marginal
    fixed points (slope exactly 1) plain iteration converges only
    algebraically, the accelerated one linearly.
    """
    x = float(x0)
    it = 0
    while it < max_iter:
        fx = f(x)
        it += 1
        if not (math.isfinite(fx) and abs(fx) <= divergence):
            return FixedPointResult(fx, math.inf, it, False)
        d1 = fx - x
        r = abs(d1)
        if r <= tol * max(1.0, abs(x)):
            return FixedPointResult(x, r, it, True)
        ffx = f(fx)
        it += 1
        if not (math.isfinite(ffx) and abs(ffx) <= divergence):
            return FixedPointResult(ffx, math.inf, it, False)
        d2 = ffx - fx
        nxt = ffx
        denom = d2 - d1
        if denom != 0.0 and -1.0 < d2 / d1 < 1.0:
            cand = x - d1 * d1 / denom
            if lo <= cand <= hi:
                nxt = cand
        x = nxt
    fx = f(x)
    return FixedPointResult(x, abs(fx - x), it, False)


def variance_fixed_point(init: InitSpec, noise: NoiseSpec, act: Activation,
                         rule: QuadratureRule = DEFAULT_RULE, q0: float = 1.0,
                         tol: float = FP_TOL, max_iter: int = FP_MAX_ITER,
                         divergence: float = FP_DIVERGENCE) -> FixedPointResult:
    """Fixed point of the variance map, iterating from ``q0``.

    For a rectifier with unit slope and no offset the map is the identity;
    this is reported as converged at ``q0`` with ``marginal=True``.
    """
    if act.is_rectifier:
        offset = init.sigma_b2 + (init.sigma_w2 * second_moment(noise) if noise.is_additive else 0.0)
        if offset == 0.0 and abs(rectifier_slope(init, noise, act) - 1.0) <= FP_TOL:
            return FixedPointResult(float(q0), 0.0, 0, True, marginal=True)
    return _solve_fixed_point(lambda q: variance_step(q, init, noise, act, rule), q0, tol,
                              max_iter, divergence, lo=0.0)


def critical_init(noise: NoiseSpec, act: Activation) -> InitSpec:
    """The (sigma_w, 0) pair that makes the rectifier variance map the identity.

    Raises :class:`NoCriticalInitError` for additive noise with nonzero second
    moment: the map then has unit slope and a positive offset.
    """
    if not act.is_rectifier:
        raise UnsupportedActivationError(f"no closed-form critical initialisation for {act}")
    mu2 = second_moment(noise)
    if noise.is_additive:
        if mu2 > 0:
            raise NoCriticalInitError(
                f"additive noise {noise} (mu2={mu2:g}) shifts the variance map off the identity "
                "for every (sigma_w, sigma_b); only the noiseless tuple is critical"
            )
        mu2 = 1.0
    return InitSpec(math.sqrt(2.0 / (mu2 * (1.0 + act.alpha**2))), 0.0)


# ---------------------------------------------------------------------------
# forward correlation
# ---------------------------------------------------------------------------


def _check_mu2(mu2: float) -> float:
    if not mu2 >= 1.0:
        raise DomainError(f"mu2 must be >= 1 for multiplicative noise, got {mu2}")
    return float(mu2)


def correlation_step_relu_critical(c_prev: float, mu2: float) -> float:
    """Closed-form correlation map of a ReLU network at its critical initialisation."""
    mu2 = _check_mu2(mu2)
    c = clamp_correlation(c_prev)
    s = math.sqrt(max(0.0, (1.0 - c) * (1.0 + c)))
    return ((c * math.asin(c) + s) / math.pi + 0.5 * c) / mu2


def correlation_step_general(c_prev: float, q_aa_prev: float, q_bb_prev: float,
                             init: InitSpec, noise: NoiseSpec, act: Activation,
                             rule: QuadratureRule = DEFAULT_RULE) -> tuple[float, float, float]:
    """Advance ``(c, q_aa, q_bb)`` one layer.

    Noise enters only through the two variances: independent noise draws on
    the two inputs contribute nothing to the covariance.
    """
    q_ab = init.sigma_w2 * gauss_cross_moment(act, q_aa_prev, q_bb_prev, c_prev, rule) + init.sigma_b2
    q_aa = variance_step(q_aa_prev, init, noise, act, rule)
    q_bb = variance_step(q_bb_prev, init, noise, act, rule)
    denom = math.sqrt(q_aa * q_bb)
    if denom == 0.0:
        raise DomainError("correlation undefined: a variance is zero")
    return clamp_correlation(min(1.0, max(-1.0, q_ab / denom))), q_aa, q_bb


def correlation_trace_relu_critical(c0: float, depth: int, mu2: float) -> LayerTrace:
    vals = [clamp_correlation(c0)]
    for _ in range(depth):
        vals.append(correlation_step_relu_critical(vals[-1], mu2))
    return LayerTrace(TraceKind.CORRELATION, vals, float(c0))


def correlation_trace(c0: float, q0: float, depth: int, init: InitSpec, noise: NoiseSpec,
                      act: Activation, rule: QuadratureRule = DEFAULT_RULE) -> LayerTrace:
    """General correlation trace for two inputs of equal variance ``q0``."""
    c, qa, qb = clamp_correlation(c0), float(q0), float(q0)
    vals = [c]
    for _ in range(depth):
        c, qa, qb = correlation_step_general(c, qa, qb, init, noise, act, rule)
        vals.append(c)
    return LayerTrace(TraceKind.CORRELATION, vals, float(c0))


def correlation_fixed_point(mu2: float, c0: float = 0.5, tol: float = FP_TOL,
                            max_iter: int = FP_MAX_ITER) -> FixedPointResult:
    """Fixed point c* of the critical ReLU correlation map.

    At ``mu2 == 1`` the map touches the identity at c = 1 with unit slope;
    that case is returned directly as marginal.
    """
    mu2 = _check_mu2(mu2)
    if mu2 == 1.0:
        return FixedPointResult(1.0, 0.0, 0, True, marginal=True)
    return _solve_fixed_point(lambda c: correlation_step_relu_critical(c, mu2), c0, tol,
                              max_iter, FP_DIVERGENCE, lo=-1.0, hi=1.0)


def chi(c_star: float, mu2: float) -> float:
    """Slope of the critical ReLU correlation map at ``c_star``."""
    mu2 = _check_mu2(mu2)
    c = clamp_correlation(c_star)
    return (math.asin(c) + 0.5 * math.pi) / (mu2 * math.pi)


def chi_quadrature(c_star: float, q_star: float, init: InitSpec, act: Activation,
                   rule: QuadratureRule = DEFAULT_RULE) -> float:
    """``sigma_w^2 E[phi'(u1) phi'(u2)]`` at the fixed point, for any activation."""
    return init.sigma_w2 * gauss_cross_moment(act, q_star, q_star, c_star, rule, use_derivative=True)


def depth_scale(mu2: float) -> float:
    """``-1 / ln chi(c*)``; infinite in the noiseless case where chi(c*) = 1."""
    mu2 = _check_mu2(mu2)
    if mu2 == 1.0:
        return math.inf
    fp = correlation_fixed_point(mu2)
    return -1.0 / math.log(chi(fp.value, mu2))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backprop_variance_trace(shape: NetworkShape, init: InitSpec, noise: NoiseSpec,
                            act: Activation, forward_trace: LayerTrace | None = None,
                            q_delta_top: float = 1.0, q0: float = 1.0,
                            rule: QuadratureRule = DEFAULT_RULE) -> LayerTrace:
    """Error variance from the top layer down to layer 0.

    ``q_delta^l = q_delta^{l+1} (D_{l+1}/D_l) sigma_w^2 E[phi'(sqrt(q^l) z)^2]``
    with ``q^l`` from ``forward_trace`` (computed from ``q0`` if omitted).
    The layer-0 entry treats the input as a layer-0 pre-activation.
    """
    L = shape.depth
    if forward_trace is None:
        forward_trace = variance_trace(q0, L, init, noise, act, rule)
    if len(forward_trace) != L + 1:
        raise DomainError(f"forward trace has {len(forward_trace)} entries, shape needs {L + 1}")
    if not q_delta_top > 0:
        raise DomainError("q_delta_top must be positive")
    D = shape.widths
    vals = [0.0] * (L + 1)
    vals[L] = float(q_delta_top)
    for l in range(L - 1, -1, -1):
        g = gauss_moment_dphi_sq(act, forward_trace.values[l], rule)
        vals[l] = vals[l + 1] * (D[l + 1] / D[l]) * init.sigma_w2 * g
    return LayerTrace(TraceKind.ERROR_VARIANCE, vals, float(q_delta_top))


def backprop_covariance_trace(shape: NetworkShape, chi_value: float,
                              q_ab_delta_top: float = 1.0) -> LayerTrace:
    """Error covariance ``q^l = q^{l+1} (D_{l+1}/D_{l+2}) chi`` for l = L-2 .. 0.

    The recursion reaches two layers ahead, so the trace covers layers
    0 .. L-1 and is seeded at layer L-1.
    """
    L = shape.depth
    if L < 2:
        raise DomainError("error covariance recursion needs depth >= 2")
    if not 0.0 < chi_value <= 1.0:
        raise DomainError(f"chi must lie in (0, 1], got {chi_value}")
    D = shape.widths
    vals = [0.0] * L
    vals[L - 1] = float(q_ab_delta_top)
    for l in range(L - 2, -1, -1):
        vals[l] = vals[l + 1] * (D[l + 1] / D[l + 2]) * chi_value
    return LayerTrace(TraceKind.ERROR_COVARIANCE, vals, float(q_ab_delta_top))


# ---------------------------------------------------------------------------
# numerical range
# ---------------------------------------------------------------------------


def overflow_depth(init: InitSpec, noise: NoiseSpec, q0: float = 1.0, K: float | None = None,
                   act: Activation | None = None) -> float:
    """Depth at which ``q0 * g^L`` reaches ``K`` for the growth factor ``g``.

    ``g = sigma_w^2 mu2 (1 + alpha^2) / 2``. ``K`` defaults to the largest
    float32 when the map grows and the smallest normal float32 when it
    shrinks. Returns ``inf`` at criticality (``g == 1``).
    """
    act = act or Activation.relu()
    if noise.is_additive:
        raise DomainError("overflow depth assumes multiplicative or no noise")
    if init.sigma_b != 0.0:
        raise DomainError("overflow depth assumes sigma_b = 0")
    if not q0 > 0:
        raise DomainError("q0 must be positive")
    g = rectifier_slope(init, noise, act)
    if abs(g - 1.0) <= FP_TOL:
        return math.inf
    if K is None:
        K = FLOAT32_MAX if g > 1.0 else FLOAT32_TINY
    if not K > 0:
        raise DomainError("K must be positive")
    return math.log(K / q0) / math.log(g)


# ---------------------------------------------------------------------------
# depth-scale fit
# ---------------------------------------------------------------------------


def fit_depth_scale(trace, c_star: float, floor=None, min_layer: int = 1,
                    contiguous: bool = False) -> DepthScaleFit:
    """Least-squares fit of ``ln|c^l - c*|`` against ``l``.

    Layers below ``min_layer`` and layers with ``|c^l - c*| < 1e-10`` are
    dropped; ``floor`` (scalar or per-layer array) raises that threshold, e.g.
    to a multiple of the standard error of a simulated trace. With
    ``contiguous`` the fit stops at the first dropped layer past ``min_layer``.
    """
    if isinstance(trace, LayerTrace):
        values = trace.values
    elif hasattr(trace, "mean") and not isinstance(trace, np.ndarray):
        values = trace.mean  # simulated trace: fit the across-run mean
    else:
        values = trace
    values = np.asarray(values, dtype=float)
    if not math.isfinite(c_star):
        raise FitError("c_star must be finite")
    diff = np.abs(values - c_star)
    thresh = np.full(diff.shape, FIT_FLOOR)
    if floor is not None:
        thresh = np.maximum(thresh, np.broadcast_to(np.asarray(floor, dtype=float), diff.shape))
    ok = np.isfinite(diff) & (diff >= thresh)
    ok[:min_layer] = False
    if contiguous:
        bad = np.flatnonzero(~ok[min_layer:])
        if bad.size:
            ok[min_layer + bad[0]:] = False
    layers = np.flatnonzero(ok)
    if layers.size < 3:
        raise FitError(f"need at least 3 admissible layers, have {layers.size}")
    res = stats.linregress(layers, np.log(diff[layers]))
    xi = -1.0 / res.slope if res.slope != 0 else math.inf
    return DepthScaleFit(float(res.slope), float(res.intercept), float(xi), layers,
                         float(res.rvalue**2))
