"""Monte-Carlo simulation of wide random noisy networks.

A run samples one network, pushes a batch of inputs through it with fresh
noise per layer and per input, and records per-layer statistics. Runs are
independent: run ``i`` draws from its own child of ``SeedSequence(seed)``,
and results are reduced in run order, so serial and threaded execution give
bit-identical float64 output.

The input ``x^0`` is treated as the layer-0 pre-activation, i.e.
``h^1 = W^1 (phi(x^0) * eps^0) + b^1``. This is the convention under which
iterating the variance map from ``q^0`` describes every layer including the
first.
"""

from __future__ import annotations

import enum
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .activations import Activation
from .errors import DomainError
from .meanfield import FLOAT32_TINY, InitSpec, NetworkShape
from .noise import NoiseMode, NoiseSpec, make_rng, sample_noise


class Precision(str, enum.Enum):
    FLOAT64 = "float64"
    FLOAT32 = "float32"


class BackpropMode(str, enum.Enum):
    INDEPENDENT = "independent"
    TIED = "tied"


_NOISE_CODE = {
    NoiseMode.NONE: kernels.NOISE_NONE,
    NoiseMode.MULTIPLICATIVE: kernels.NOISE_MULT,
    NoiseMode.ADDITIVE: kernels.NOISE_ADD,
}


@dataclass(frozen=True)
class SimConfig:
    shape: NetworkShape
    init: InitSpec
    noise: NoiseSpec
    act: Activation
    runs: int = 50
    seed: int = 0
    precision: Precision = Precision.FLOAT64
    inputs: int = 50
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "precision", Precision(self.precision))
        if self.runs < 1 or self.inputs < 1:
            raise DomainError("runs and inputs must be >= 1")
        if any(int(d) != d for d in self.shape.widths):
            raise DomainError("simulated networks need integer widths")

    @classmethod
    def standard(cls, init, noise, act, depth=15, width=1000, **kw) -> SimConfig:
        """Width 1000, depth 15, 50 runs of 50 inputs unless overridden."""
        return cls(NetworkShape.constant(width, depth), init, noise, act, **kw)

    @property
    def dtype(self):
        return np.float32 if self.precision is Precision.FLOAT32 else np.float64

    def to_dict(self) -> dict:
        return {
            "widths": [int(d) for d in self.shape.widths],
            "sigma_w": self.init.sigma_w,
            "sigma_b": self.init.sigma_b,
            "noise": str(self.noise),
            "activation": str(self.act),
            "runs": self.runs,
            "seed": self.seed,
            "precision": self.precision.value,
            "inputs": self.inputs,
        }


@dataclass(frozen=True)
class EmpiricalTrace:
    """Across-run mean and standard deviation of a per-layer statistic.

    ``samples`` holds the per-run values (runs x layers). ``overflow_layer``
    and ``underflow_layer`` are the earliest layers, over all runs, at which
    the float32 statistic became non-finite or dropped below the smallest
    normal float32.
    """

    mean: np.ndarray
    std: np.ndarray
    n_runs: int
    samples: np.ndarray = field(repr=False)
    overflow_layer: int | None = None
    underflow_layer: int | None = None

    @classmethod
    def from_samples(cls, samples, overflow_layer=None, underflow_layer=None) -> EmpiricalTrace:
        samples = np.asarray(samples, dtype=float)
        n = samples.shape[0]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            mean = np.nanmean(samples, axis=0)
            std = np.nanstd(samples, axis=0, ddof=1) if n > 1 else np.zeros(samples.shape[1])
        return cls(mean, std, n, samples, overflow_layer, underflow_layer)

    @property
    def stderr(self) -> np.ndarray:
        return self.std / math.sqrt(self.n_runs)

    @property
    def layers(self) -> np.ndarray:
        return np.arange(len(self.mean))

    def __len__(self):
        return len(self.mean)


@dataclass(frozen=True)
class Network:
    weights: list
    biases: list
    shape: NetworkShape


@dataclass
class ForwardState:
    """Pre-activations ``h^0 .. h^L`` (each units x inputs); ``h^0`` is the input."""

    preacts: list
    nonfinite_layer: int | None = None


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def _layer_params(shape: NetworkShape, init: InitSpec, rng, layer: int, dtype):
    fan_in, fan_out = int(shape.widths[layer - 1]), int(shape.widths[layer])
    W = rng.standard_normal((fan_out, fan_in))
    W *= init.sigma_w / math.sqrt(fan_in)
    b = rng.standard_normal((fan_out, 1)) * init.sigma_b
    return W.astype(dtype, copy=False), b.astype(dtype, copy=False)


def sample_network(shape: NetworkShape, init: InitSpec, rng: np.random.Generator,
                   dtype=np.float64) -> Network:
    """Weights ~ N(0, sigma_w^2 / fan_in), biases ~ N(0, sigma_b^2), layer by layer."""
    Ws, bs = [], []
    for layer in range(1, shape.depth + 1):
        W, b = _layer_params(shape, init, rng, layer, dtype)
        Ws.append(W)
        bs.append(b)
    return Network(Ws, bs, shape)


def generate_input(dim: int, target_q: float, rng: np.random.Generator, n: int | None = None):
    """Standard-normal input rescaled so that ``x.x / dim == target_q`` exactly.

    With ``n`` given, returns ``n`` such inputs as columns of a (dim, n) array.
    """
    if target_q < 0:
        raise DomainError(f"target_q must be non-negative, got {target_q}")
    if dim < 1:
        raise DomainError("dim must be >= 1")
    shape = (dim,) if n is None else (dim, n)
    x = rng.standard_normal(shape)
    norm = np.sqrt(np.sum(x * x, axis=0) / dim)
    return x * (math.sqrt(target_q) / norm)


def generate_correlated_pair(dim: int, target_c: float, target_q: float,
                             rng: np.random.Generator, n: int | None = None):
    """Two inputs with empirical variance ``target_q`` and cosine ``target_c``.

    ``x_b = c x_a + sqrt(1 - c^2) u`` where ``u`` is an independent draw made
    exactly orthogonal to ``x_a`` (Gram-Schmidt), so the targets hold to
    rounding error. With ``n`` given, returns (dim, n) arrays of ``n`` pairs.
    """
    if not abs(target_c) <= 1.0:
        raise DomainError(f"target_c must lie in [-1, 1], got {target_c}")
    if dim < 2 and abs(target_c) < 1:
        raise DomainError("a correlated pair needs dim >= 2")
    a = generate_input(dim, 1.0, rng, n)
    u = rng.standard_normal(a.shape)
    u -= a * (np.sum(u * a, axis=0) / np.sum(a * a, axis=0))
    u *= 1.0 / np.sqrt(np.sum(u * u, axis=0) / dim)
    b = target_c * a + math.sqrt(1.0 - target_c * target_c) * u
    scale = math.sqrt(target_q)
    return a * scale, b * scale


# ---------------------------------------------------------------------------
# forward / backward passes
# ---------------------------------------------------------------------------


def _corrupt(h, act: Activation, noise: NoiseSpec, rng, dtype):
    """``phi(h)`` corrupted by fresh noise, one draw per unit and input."""
    mode = _NOISE_CODE[noise.mode]
    eps = sample_noise(noise, h.shape, rng, dtype) if mode != kernels.NOISE_NONE else np.empty(0, dtype)
    code = act.kernel_code
    if code is None:
        x = act.phi(h).astype(dtype, copy=False)
        if mode == kernels.NOISE_MULT:
            x = x * eps
        elif mode == kernels.NOISE_ADD:
            x = x + eps
        return x
    out = np.empty_like(h)
    return kernels.activate_corrupt(np.ascontiguousarray(h), eps, out, code, act.alpha, mode)


def _propagate(x0, shape, init, noise, act, w_rng, noise_rng, dtype, weights=None):
    """Yield ``(layer, h)`` for layers 0..L; weights are drawn lazily unless given."""
    h = np.ascontiguousarray(x0, dtype=dtype)
    if h.ndim == 1:
        h = h[:, None]
    yield 0, h
    for layer in range(1, shape.depth + 1):
        if weights is None:
            W, b = _layer_params(shape, init, w_rng, layer, dtype)
        else:
            W, b = weights.weights[layer - 1], weights.biases[layer - 1]
        x = _corrupt(h, act, noise, noise_rng, dtype)
        h = W @ x
        h += b
        yield layer, h


def forward_noisy(x0, net: Network, noise: NoiseSpec, act: Activation, rng: np.random.Generator,
                  precision: Precision = Precision.FLOAT64) -> ForwardState:
    """Pre-activations of every layer for input(s) ``x0`` through ``net``.

    In float32 mode weights, activations and products are rounded to float32;
    the first layer holding a non-finite value is recorded, not raised.
    """
    dtype = np.float32 if Precision(precision) is Precision.FLOAT32 else np.float64
    if dtype is np.float32:
        net = Network([W.astype(dtype) for W in net.weights],
                      [b.astype(dtype) for b in net.biases], net.shape)
    state = ForwardState([])
    with np.errstate(over="ignore", invalid="ignore"):
        for layer, h in _propagate(x0, net.shape, None, noise, act, None, rng, dtype, weights=net):
            state.preacts.append(h)
            if state.nonfinite_layer is None and not np.all(np.isfinite(h)):
                state.nonfinite_layer = layer
    return state


def backprop_errors(state: ForwardState, net: Network, act: Activation, rng: np.random.Generator,
                    mode: BackpropMode = BackpropMode.INDEPENDENT, init: InitSpec | None = None):
    """Error signals ``delta^L .. delta^0`` (returned indexed by layer).

    ``delta^L`` is standard normal; below it
    ``delta^l = phi'(h^l) * (W^{l+1}.T delta^{l+1})``. In ``independent`` mode
    every ``W^{l+1}`` is a fresh draw from the initialisation distribution
    (needs ``init``); in ``tied`` mode the forward weights are reused.
    """
    mode = BackpropMode(mode)
    if mode is BackpropMode.INDEPENDENT and init is None:
        raise DomainError("independent backprop needs the InitSpec to redraw weights")
    L = net.shape.depth
    top = state.preacts[L]
    deltas = [None] * (L + 1)
    deltas[L] = rng.standard_normal(top.shape)
    for layer in range(L - 1, -1, -1):
        if mode is BackpropMode.TIED:
            W = net.weights[layer]
        else:
            W, _ = _layer_params(net.shape, init, rng, layer + 1, np.float64)
        deltas[layer] = act.dphi(state.preacts[layer]) * (W.T @ deltas[layer + 1])
    return deltas


# ---------------------------------------------------------------------------
# multi-run statistics
# ---------------------------------------------------------------------------


def _run_seeds(seed: int, runs: int):
    root = np.random.SeedSequence(seed)
    inputs_ss, runs_ss = root.spawn(2)
    return inputs_ss, runs_ss.spawn(runs)


def _map_runs(cfg: SimConfig, fn, seeds):
    if cfg.workers > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            return list(pool.map(fn, seeds))
    return [fn(s) for s in seeds]


def _to_float32_stat(q: float) -> float:
    with np.errstate(over="ignore"):
        return float(np.float32(q))


def empirical_variance_trace(cfg: SimConfig, q0: float = 4.0,
                             stop_on_instability: bool = False) -> EmpiricalTrace:
    """Per-layer ``(1/D_l) h.h`` averaged over inputs, then over runs.

    In float32 mode the per-layer statistic is rounded to float32; a run's
    instability layer is where it becomes inf (overflow) or drops below the
    smallest normal float32 (underflow). ``stop_on_instability`` ends a run
    there, leaving NaN for the remaining layers.
    """
    inputs_ss, run_seeds = _run_seeds(cfg.seed, cfg.runs)
    x0 = generate_input(int(cfg.shape.widths[0]), q0, make_rng(inputs_ss), cfg.inputs)
    f32 = cfg.precision is Precision.FLOAT32
    L = cfg.shape.depth

    def one_run(ss):
        w_ss, n_ss = ss.spawn(2)
        row = np.full(L + 1, np.nan)
        over = under = None
        with np.errstate(over="ignore", invalid="ignore", under="ignore"):
            for layer, h in _propagate(x0, cfg.shape, cfg.init, cfg.noise, cfg.act,
                                       make_rng(w_ss), make_rng(n_ss), cfg.dtype):
                q = float(np.mean(kernels.column_second_moment(h)))
                if f32:
                    q = _to_float32_stat(q)
                    if over is None and not math.isfinite(q):
                        over = layer
                    if under is None and q < FLOAT32_TINY:
                        under = layer
                row[layer] = q
                if stop_on_instability and (over is not None or under is not None):
                    break
        return row, over, under

    results = _map_runs(cfg, one_run, run_seeds)
    samples = np.stack([r[0] for r in results])
    overs = [r[1] for r in results if r[1] is not None]
    unders = [r[2] for r in results if r[2] is not None]
    return EmpiricalTrace.from_samples(samples, min(overs) if overs else None,
                                       min(unders) if unders else None)


def empirical_correlation_traces(cfg: SimConfig, c0_values, q0: float = 4.0) -> list[EmpiricalTrace]:
    """Correlation traces for several starting correlations at once.

    Each run pushes ``cfg.inputs`` pairs per ``c0`` through one shared network;
    every input gets its own noise. The per-run value is the mean over pairs
    of the cosine between the paired pre-activations.
    """
    c0_values = [float(c) for c in c0_values]
    inputs_ss, run_seeds = _run_seeds(cfg.seed, cfg.runs)
    in_rng = make_rng(inputs_ss)
    D0, n = int(cfg.shape.widths[0]), cfg.inputs
    blocks = []
    for c0 in c0_values:
        a, b = generate_correlated_pair(D0, c0, q0, in_rng, n)
        blocks += [a, b]
    x0 = np.concatenate(blocks, axis=1)
    L = cfg.shape.depth

    def one_run(ss):
        w_ss, n_ss = ss.spawn(2)
        rows = np.empty((len(c0_values), L + 1))
        for layer, h in _propagate(x0, cfg.shape, cfg.init, cfg.noise, cfg.act,
                                   make_rng(w_ss), make_rng(n_ss), cfg.dtype):
            for k in range(len(c0_values)):
                a = h[:, 2 * k * n:(2 * k + 1) * n]
                b = h[:, (2 * k + 1) * n:(2 * k + 2) * n]
                rows[k, layer] = np.mean(kernels.column_correlation(a, b))
        return rows

    results = np.stack(_map_runs(cfg, one_run, run_seeds))
    return [EmpiricalTrace.from_samples(results[:, k, :]) for k in range(len(c0_values))]


def empirical_correlation_trace(cfg: SimConfig, c0: float, q0: float = 4.0) -> EmpiricalTrace:
    return empirical_correlation_traces(cfg, [c0], q0)[0]


def gaussian_layer_product(X, scale: float, rows: int, rng: np.random.Generator):
    """Draw ``W @ X`` for a fresh ``W`` (``rows`` x ``X.shape[0]``, i.i.d. N(0, scale^2)).

    With the thin factorisation ``X = Q R``, ``W Q`` again has i.i.d.
    N(0, scale^2) entries, so ``W @ X`` is drawn as ``Z @ R`` without forming
    ``W``. Exact in distribution whenever the weight matrix is used only
    once; an all-zero column of ``X`` gives an exactly zero output column.
    """
    R = np.linalg.qr(X, mode="r")
    return (rng.standard_normal((rows, R.shape[0])) @ R) * scale


def _implicit_backprop_run(x0, cfg: SimConfig, n_rng, b_rng):
    shape, init, act = cfg.shape, cfg.init, cfg.act
    D = [int(d) for d in shape.widths]
    h = np.asarray(x0, dtype=float)
    preacts = [h]
    for layer in range(1, shape.depth + 1):
        x = _corrupt(h, act, cfg.noise, n_rng, np.float64)
        h = gaussian_layer_product(x, init.sigma_w / math.sqrt(D[layer - 1]), D[layer], n_rng)
        if init.sigma_b:
            h += n_rng.standard_normal((D[layer], 1)) * init.sigma_b
        preacts.append(h)
    L = shape.depth
    deltas = [None] * (L + 1)
    deltas[L] = b_rng.standard_normal(preacts[L].shape)
    for layer in range(L - 1, -1, -1):
        back = gaussian_layer_product(deltas[layer + 1], init.sigma_w / math.sqrt(D[layer]),
                                      D[layer], b_rng)
        deltas[layer] = act.dphi(preacts[layer]) * back
    return deltas


def empirical_backprop_trace(cfg: SimConfig, q0: float = 4.0,
                             mode: BackpropMode = BackpropMode.INDEPENDENT,
                             implicit_weights: bool = False) -> EmpiricalTrace:
    """Per-layer error variance ``mean(delta^l ** 2)`` over runs (float64).

    ``implicit_weights`` (independent mode only) draws every layer product
    with :func:`gaussian_layer_product` instead of materialising weights,
    which makes wide growing-width networks affordable.
    """
    mode = BackpropMode(mode)
    if implicit_weights and mode is not BackpropMode.INDEPENDENT:
        raise DomainError("implicit weights need independent backprop weights")
    inputs_ss, run_seeds = _run_seeds(cfg.seed, cfg.runs)
    x0 = generate_input(int(cfg.shape.widths[0]), q0, make_rng(inputs_ss), cfg.inputs)
    cfg64 = replace(cfg, precision=Precision.FLOAT64)

    def one_run(ss):
        w_ss, n_ss, b_ss = ss.spawn(3)
        if implicit_weights:
            deltas = _implicit_backprop_run(x0, cfg64, make_rng(n_ss), make_rng(b_ss))
            return np.array([np.mean(kernels.column_second_moment(d)) for d in deltas])
        net = sample_network(cfg64.shape, cfg64.init, make_rng(w_ss))
        state = forward_noisy(x0, net, cfg64.noise, cfg64.act, make_rng(n_ss))
        deltas = backprop_errors(state, net, cfg64.act, make_rng(b_ss), mode, cfg64.init)
        return np.array([np.mean(kernels.column_second_moment(d)) for d in deltas])

    return EmpiricalTrace.from_samples(np.stack(_map_runs(cfg, one_run, run_seeds)))


def _one_layer(cfg: SimConfig) -> NetworkShape:
    return NetworkShape(tuple(int(d) for d in cfg.shape.widths[:2]))


def empirical_variance_map(cfg: SimConfig, q_values) -> EmpiricalTrace:
    """Single-hidden-layer estimate of the variance map at each ``q`` in ``q_values``.

    Each run samples one layer and pushes ``cfg.inputs`` inputs per grid value
    through it. Entry ``k`` of the returned trace is the across-run statistic
    for ``q_values[k]`` (indexed by grid position, not by layer).
    """
    q_values = [float(q) for q in q_values]
    shape = _one_layer(cfg)
    inputs_ss, run_seeds = _run_seeds(cfg.seed, cfg.runs)
    in_rng = make_rng(inputs_ss)
    n = cfg.inputs
    x0 = np.concatenate([generate_input(int(shape.widths[0]), q, in_rng, n) for q in q_values], axis=1)

    def one_run(ss):
        w_ss, n_ss = ss.spawn(2)
        h = None
        for layer, h in _propagate(x0, shape, cfg.init, cfg.noise, cfg.act,
                                   make_rng(w_ss), make_rng(n_ss), cfg.dtype):
            pass
        per_input = kernels.column_second_moment(h)
        return per_input.reshape(len(q_values), n).mean(axis=1)

    return EmpiricalTrace.from_samples(np.stack(_map_runs(cfg, one_run, run_seeds)))


def empirical_correlation_map(cfg: SimConfig, c_values, q0: float = 4.0) -> EmpiricalTrace:
    """Single-hidden-layer estimate of the correlation map at each ``c`` in ``c_values``.

    Entry ``k`` is the across-run mean cosine between ``cfg.inputs`` pairs of
    first-layer pre-activations whose inputs had correlation ``c_values[k]``.
    """
    c_values = [float(c) for c in c_values]
    shape = _one_layer(cfg)
    inputs_ss, run_seeds = _run_seeds(cfg.seed, cfg.runs)
    in_rng = make_rng(inputs_ss)
    n = cfg.inputs
    blocks = []
    for c in c_values:
        blocks += list(generate_correlated_pair(int(shape.widths[0]), c, q0, in_rng, n))
    x0 = np.concatenate(blocks, axis=1)

    def one_run(ss):
        w_ss, n_ss = ss.spawn(2)
        h = None
        for layer, h in _propagate(x0, shape, cfg.init, cfg.noise, cfg.act,
                                   make_rng(w_ss), make_rng(n_ss), cfg.dtype):
            pass
        out = np.empty(len(c_values))
        for k in range(len(c_values)):
            a = h[:, 2 * k * n:(2 * k + 1) * n]
            b = h[:, (2 * k + 1) * n:(2 * k + 2) * n]
            out[k] = np.mean(kernels.column_correlation(a, b))
        return out

    return EmpiricalTrace.from_samples(np.stack(_map_runs(cfg, one_run, run_seeds)))
