"""Hot numeric kernels with interchangeable numba and numpy implementations.

Every kernel exists twice: ``*_loop`` is an explicit loop compiled with
``numba.njit``, ``*_numpy`` is the vectorised fallback. The public name is
bound to one of them according to :data:`noisyprop._backend.BACKEND`.
Both versions are importable so they can be benchmarked and cross-checked.

Activation codes used by the kernels: ``RECTIFIER`` is PReLU with slope
``alpha`` on negative inputs (``alpha = 0`` is ReLU), ``TANH`` is tanh.
Noise codes: ``NOISE_NONE``, ``NOISE_MULT``, ``NOISE_ADD``.
"""

import math

import numpy as np

from ._backend import USE_NUMBA, njit

RECTIFIER = 0
TANH = 1

NOISE_NONE = 0
NOISE_MULT = 1
NOISE_ADD = 2

INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Gaussian mass beyond |z| = 12 is below 1e-32.
Z_MAX = 12.0


# ---------------------------------------------------------------------------
# fused activation + noise injection
# ---------------------------------------------------------------------------


@njit(cache=True)
def activate_corrupt_loop(h, eps, out, kind, alpha, noise_mode):
    hf = h.reshape(-1)
    of = out.reshape(-1)
    ef = eps.reshape(-1)
    for i in range(hf.size):
        v = hf[i]
        if kind == RECTIFIER:
            if v < 0:
                v = alpha * v
        else:
            v = math.tanh(v)
        if noise_mode == NOISE_MULT:
            v = v * ef[i]
        elif noise_mode == NOISE_ADD:
            v = v + ef[i]
        of[i] = v
    return out


def activate_corrupt_numpy(h, eps, out, kind, alpha, noise_mode):
    if kind == RECTIFIER:
        np.multiply(h, np.where(h < 0, alpha, 1.0).astype(h.dtype), out=out)
    else:
        np.tanh(h, out=out)
    if noise_mode == NOISE_MULT:
        np.multiply(out, eps, out=out)
    elif noise_mode == NOISE_ADD:
        np.add(out, eps, out=out)
    return out


# ---------------------------------------------------------------------------
# per-column statistics of (units x inputs) blocks, accumulated in float64
# ---------------------------------------------------------------------------


@njit(cache=True)
def column_second_moment_loop(H):
    rows, cols = H.shape
    out = np.zeros(cols)
    for i in range(rows):
        for j in range(cols):
            v = np.float64(H[i, j])
            out[j] += v * v
    return out / rows


def column_second_moment_numpy(H):
    H64 = np.asarray(H, dtype=np.float64)
    return np.einsum("ij,ij->j", H64, H64) / H64.shape[0]


@njit(cache=True)
def column_correlation_loop(A, B):
    """Cosine between matching columns; NaN when either column is all zero."""
    rows, cols = A.shape
    ab = np.zeros(cols)
    aa = np.zeros(cols)
    bb = np.zeros(cols)
    for i in range(rows):
        for j in range(cols):
            a = np.float64(A[i, j])
            b = np.float64(B[i, j])
            ab[j] += a * b
            aa[j] += a * a
            bb[j] += b * b
    return ab / np.sqrt(aa * bb)


def column_correlation_numpy(A, B):
    A64 = np.asarray(A, dtype=np.float64)
    B64 = np.asarray(B, dtype=np.float64)
    ab = np.einsum("ij,ij->j", A64, B64)
    aa = np.einsum("ij,ij->j", A64, A64)
    bb = np.einsum("ij,ij->j", B64, B64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return ab / np.sqrt(aa * bb)


# ---------------------------------------------------------------------------
# kink-aware bivariate Gaussian expectation for rectifiers
#
#   E[g(sa*z1) g(sb*(c*z1 + s*z2))],  z1, z2 ~ N(0, 1) independent,
#
# with g = PReLU(alpha) or its derivative. Both integrals are split at the
# kink of g and each piece is integrated with Gauss-Legendre on [-Z_MAX, Z_MAX].
# ---------------------------------------------------------------------------


@njit(cache=True)
def _rect(u, alpha, deriv):
    if deriv:
        return 1.0 if u > 0 else alpha
    return u if u > 0 else alpha * u


@njit(cache=True)
def rectifier_pair_loop(sa, sb, c, s, alpha, deriv, x, w, zmax):
    n = x.size
    total = 0.0
    for piece in range(2):
        lo = -zmax if piece == 0 else 0.0
        hi = 0.0 if piece == 0 else zmax
        half = 0.5 * (hi - lo)
        mid = 0.5 * (hi + lo)
        for i in range(n):
            z1 = mid + half * x[i]
            wt1 = half * w[i] * math.exp(-0.5 * z1 * z1) * INV_SQRT_2PI
            g1 = _rect(sa * z1, alpha, deriv)
            if g1 == 0.0:
                continue
            if s == 0.0:
                total += wt1 * g1 * _rect(sb * c * z1, alpha, deriv)
                continue
            zk = -c * z1 / s
            if zk < -zmax:
                zk = -zmax
            elif zk > zmax:
                zk = zmax
            inner = 0.0
            for piece2 in range(2):
                lo2 = -zmax if piece2 == 0 else zk
                hi2 = zk if piece2 == 0 else zmax
                if hi2 <= lo2:
                    continue
                half2 = 0.5 * (hi2 - lo2)
                mid2 = 0.5 * (hi2 + lo2)
                for j in range(n):
                    z2 = mid2 + half2 * x[j]
                    wt2 = half2 * w[j] * math.exp(-0.5 * z2 * z2) * INV_SQRT_2PI
                    inner += wt2 * _rect(sb * (c * z1 + s * z2), alpha, deriv)
            total += wt1 * g1 * inner
    return total


def _rect_np(u, alpha, deriv):
    if deriv:
        return np.where(u > 0, 1.0, alpha)
    return np.where(u > 0, u, alpha * u)


def rectifier_pair_numpy(sa, sb, c, s, alpha, deriv, x, w, zmax):
    return piecewise_pair_expectation(
        lambda u: _rect_np(u, alpha, deriv),
        lambda u: _rect_np(u, alpha, deriv),
        sa, sb, c, s, (0.0,), x, w, zmax,
    )


def _pieces(breaks, x, w, zmax):
    """Gauss-Legendre nodes/weights (with the normal pdf folded in) on the
    pieces of [-zmax, zmax] cut at ``breaks``.

    ``breaks`` has shape (..., k), sorted along the last axis. Returns nodes and
    weights of shape (..., k + 1, n).
    """
    breaks = np.clip(breaks, -zmax, zmax)
    lead = breaks.shape[:-1]
    edges = np.concatenate(
        [np.full(lead + (1,), -zmax), breaks, np.full(lead + (1,), zmax)], axis=-1
    )
    lo = edges[..., :-1, None]
    hi = edges[..., 1:, None]
    half = 0.5 * (hi - lo)
    nodes = 0.5 * (hi + lo) + half * x
    weights = half * w * np.exp(-0.5 * nodes * nodes) * INV_SQRT_2PI
    return nodes, weights


def piecewise_expectation(g, scale, kinks, x, w, zmax=Z_MAX):
    """E[g(scale * z)] for z ~ N(0, 1), splitting at the kinks of ``g``."""
    if scale == 0.0:
        return float(np.asarray(g(np.zeros(1)))[0])
    brk = np.sort(np.asarray(kinks, dtype=float) / scale)
    nodes, weights = _pieces(brk, x, w, zmax)
    return float(np.sum(weights * g(scale * nodes)))


def piecewise_pair_expectation(g1, g2, sa, sb, c, s, kinks, x, w, zmax=Z_MAX):
    """E[g1(sa*z1) g2(sb*(c*z1 + s*z2))] split at the kinks of g1 and g2.

    ``s`` is sqrt(1 - c^2); ``s == 0`` selects the degenerate 1-D form.
    """
    kinks = np.asarray(kinks, dtype=float)
    if s == 0.0:
        brk = np.sort(np.concatenate([kinks / sa if sa else [], kinks / (sb * c) if sb else []]))
        nodes, weights = _pieces(brk, x, w, zmax)
        return float(np.sum(weights * g1(sa * nodes) * g2(sb * c * nodes)))
    brk1 = np.sort(kinks / sa) if sa > 0 else np.empty(0)
    z1, w1 = _pieces(brk1, x, w, zmax)
    z1 = z1.reshape(-1)
    w1 = w1.reshape(-1)
    if sb > 0:
        brk2 = (kinks[None, :] / sb - c * z1[:, None]) / s
        brk2.sort(axis=-1)
    else:
        brk2 = np.empty((z1.size, 0))
    z2, w2 = _pieces(brk2, x, w, zmax)
    u2 = sb * (c * z1[:, None, None] + s * z2)
    inner = np.sum(w2 * g2(u2), axis=(1, 2))
    return float(np.sum(w1 * g1(sa * z1) * inner))


def _activate_corrupt_dispatch(h, eps, out, kind, alpha, noise_mode):
    # numba's scalar tanh goes through libm and loses to numpy's vectorised
    # tanh by about 10x, so only the rectifier branch uses the jitted loop.
    if kind == RECTIFIER:
        return activate_corrupt_loop(h, eps, out, kind, alpha, noise_mode)
    return activate_corrupt_numpy(h, eps, out, kind, alpha, noise_mode)


if USE_NUMBA:
    activate_corrupt = _activate_corrupt_dispatch
    column_second_moment = column_second_moment_loop
    column_correlation = column_correlation_loop
    rectifier_pair = rectifier_pair_loop
else:
    activate_corrupt = activate_corrupt_numpy
    column_second_moment = column_second_moment_numpy
    column_correlation = column_correlation_numpy
    rectifier_pair = rectifier_pair_numpy
