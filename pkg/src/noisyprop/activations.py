"""Activations and their Gaussian moments.

The three expectations used by the mean-field maps are

* ``E[phi(sqrt(q) z)^2]``            (variance map)
* ``E[phi'(sqrt(q) z)^2]``           (error-variance map)
* ``E[phi(u1) phi(u2)]`` over the bivariate Gaussian of a correlated pair.

Rectifiers have exact closed forms for the first two. Everything else goes
through quadrature: a probabilists' Gauss-Hermite rule for smooth activations,
and a kink-aware piecewise Gauss-Legendre rule for activations that declare
kinks (tensor Gauss-Hermite converges slowly across a kink, ~5e-3 error for
ReLU at 101 nodes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss

from . import kernels
from .errors import DomainError

C_SLACK = 1e-12
DEGENERATE_1MC2 = 1e-14


@dataclass(frozen=True)
class Activation:
    """An elementwise nonlinearity.

    ``kind`` is one of ``relu``, ``prelu``, ``tanh`` or ``custom``. PReLU uses
    ``alpha`` as the slope for negative inputs. Custom activations supply
    vectorised ``fn``/``dfn`` callables and may list ``kinks`` (points where the
    derivative jumps) so that quadrature can split there.

    At a rectifier kink the derivative is taken from the left, so ReLU has
    ``phi'(0) = 0``.
    """

    kind: str
    alpha: float = 0.0
    fn: Callable | None = field(default=None, compare=False)
    dfn: Callable | None = field(default=None, compare=False)
    kinks: tuple = ()
    name: str | None = None

    def __post_init__(self):
        if self.kind not in ("relu", "prelu", "tanh", "custom"):
            raise DomainError(f"unknown activation kind {self.kind!r}")
        if self.kind == "custom" and (self.fn is None or self.dfn is None):
            raise DomainError("custom activations need fn and dfn")
        if self.kind == "relu":
            object.__setattr__(self, "alpha", 0.0)
        if self.kind in ("relu", "prelu"):
            object.__setattr__(self, "kinks", (0.0,))
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "kinks", tuple(float(k) for k in self.kinks))

    @classmethod
    def relu(cls) -> Activation:
        return cls("relu")

    @classmethod
    def prelu(cls, alpha: float) -> Activation:
        return cls("prelu", alpha=alpha)

    @classmethod
    def tanh(cls) -> Activation:
        return cls("tanh")

    @classmethod
    def custom(cls, fn, dfn, kinks=(), name="custom") -> Activation:
        return cls("custom", fn=fn, dfn=dfn, kinks=tuple(kinks), name=name)

    @classmethod
    def parse(cls, text: str) -> Activation:
        """``relu``, ``tanh`` or ``prelu:<alpha>``."""
        t = text.strip().lower()
        if t in ("relu", "tanh"):
            return cls(t)
        if t.startswith("prelu"):
            _, _, a = t.partition(":")
            try:
                return cls.prelu(float(a or 0.0))
            except ValueError:
                raise DomainError(f"bad PReLU slope in {text!r}") from None
        raise DomainError(f"unknown activation {text!r}")

    def __str__(self) -> str:
        if self.kind == "prelu":
            return f"prelu:{self.alpha:g}"
        if self.kind == "custom":
            return self.name or "custom"
        return self.kind

    @property
    def is_rectifier(self) -> bool:
        return self.kind in ("relu", "prelu")

    @property
    def kernel_code(self) -> int | None:
        """Code understood by :mod:`noisyprop.kernels`, or None for custom."""
        if self.is_rectifier:
            return kernels.RECTIFIER
        if self.kind == "tanh":
            return kernels.TANH
        return None

    def phi(self, x):
        x = np.asarray(x, dtype=float)
        if self.is_rectifier:
            return np.where(x > 0, x, self.alpha * x)
        if self.kind == "tanh":
            return np.tanh(x)
        return np.asarray(self.fn(x), dtype=float)

    def dphi(self, x):
        x = np.asarray(x, dtype=float)
        if self.is_rectifier:
            return np.where(x > 0, 1.0, self.alpha)
        if self.kind == "tanh":
            return 1.0 / np.cosh(x) ** 2
        return np.asarray(self.dfn(x), dtype=float)


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Gauss-Hermite rule for expectations under N(0, 1).

    ``nodes``/``weights`` integrate against the standard normal density, so
    ``sum(weights * f(nodes))`` approximates ``E[f(z)]``. The same ``order`` is
    used per piece by the kink-aware Gauss-Legendre path.
    """

    nodes: np.ndarray
    weights: np.ndarray
    order: int

    @classmethod
    def gauss_hermite(cls, order: int = 101) -> QuadratureRule:
        if order < 1:
            raise DomainError("quadrature order must be positive")
        z, w = hermegauss(order)
        w = w / w.sum()
        z.setflags(write=False)
        w.setflags(write=False)
        return cls(z, w, order)

    @cached_property
    def legendre(self) -> tuple[np.ndarray, np.ndarray]:
        return leggauss(self.order)

    def expect(self, f) -> float:
        return float(np.dot(self.weights, f(self.nodes)))


DEFAULT_RULE = QuadratureRule.gauss_hermite(101)


def _check_q(q: float) -> float:
    q = float(q)
    if not q >= 0.0:
        raise DomainError(f"variance must be non-negative, got {q}")
    return q


def clamp_correlation(c: float) -> float:
    """Clamp ``c`` to [-1, 1], rejecting values beyond a 1e-12 slack."""
    c = float(c)
    if not abs(c) <= 1.0 + C_SLACK:
        raise DomainError(f"correlation must lie in [-1, 1], got {c}")
    return min(1.0, max(-1.0, c))


def _moment_1d(act: Activation, g, q: float, rule: QuadratureRule) -> float:
    scale = math.sqrt(q)
    if act.kinks:
        x, w = rule.legendre
        return kernels.piecewise_expectation(lambda u: g(u) ** 2, scale, act.kinks, x, w)
    return rule.expect(lambda z: g(scale * z) ** 2)


def gauss_moment_phi_sq(act: Activation, q: float, rule: QuadratureRule = DEFAULT_RULE,
                        method: str = "auto") -> float:
    """``E[phi(sqrt(q) z)^2]`` for z ~ N(0, 1).

    ``method="auto"`` uses the exact rectifier value ``q (1 + alpha^2) / 2``;
    ``method="quadrature"`` forces numerical integration.
    """
    q = _check_q(q)
    if method == "auto" and act.is_rectifier:
        return 0.5 * q * (1.0 + act.alpha**2)
    return _moment_1d(act, act.phi, q, rule)


def gauss_moment_dphi_sq(act: Activation, q: float, rule: QuadratureRule = DEFAULT_RULE,
                         method: str = "auto") -> float:
    """``E[phi'(sqrt(q) z)^2]``; ``(1 + alpha^2) / 2`` for rectifiers at any q."""
    q = _check_q(q)
    if method == "auto" and act.is_rectifier:
        return 0.5 * (1.0 + act.alpha**2)
    return _moment_1d(act, act.dphi, q, rule)


def gauss_cross_moment(act: Activation, q_aa: float, q_bb: float, c: float,
                       rule: QuadratureRule = DEFAULT_RULE,
                       use_derivative: bool = False) -> float:
    """Bivariate expectation ``E[phi(u1) phi(u2)]`` (or of ``phi'`` products).

    ``u1 = sqrt(q_aa) z1`` and ``u2 = sqrt(q_bb) (c z1 + sqrt(1 - c^2) z2)``.
    When ``1 - c^2 < 1e-14`` the second coordinate is collinear with the first
    and the 1-D form is evaluated directly.
    """
    q_aa, q_bb = _check_q(q_aa), _check_q(q_bb)
    c = clamp_correlation(c)
    one_m_c2 = (1.0 - c) * (1.0 + c)
    s = 0.0 if one_m_c2 < DEGENERATE_1MC2 else math.sqrt(one_m_c2)
    sa, sb = math.sqrt(q_aa), math.sqrt(q_bb)
    g = act.dphi if use_derivative else act.phi

    if act.is_rectifier:
        x, w = rule.legendre
        return float(kernels.rectifier_pair(sa, sb, c, s, act.alpha, use_derivative,
                                            x, w, kernels.Z_MAX))
    if act.kinks:
        x, w = rule.legendre
        return kernels.piecewise_pair_expectation(g, g, sa, sb, c, s, act.kinks, x, w)

    z, wt = rule.nodes, rule.weights
    if s == 0.0:
        return float(np.dot(wt, g(sa * z) * g(sb * c * z)))
    u1 = g(sa * z)
    u2 = g(sb * (c * z[:, None] + s * z[None, :]))
    return float(wt @ (u1[:, None] * u2) @ wt)
