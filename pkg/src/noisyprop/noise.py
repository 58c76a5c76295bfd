"""Noise distributions injected between layers and their moments.

Additive noise is zero-mean and multiplicative noise has mean one; the
signal-propagation maps only ever see the second moment ``mu2 = E[eps^2]``.
Dropout uses the inverted convention, ``eps in {0, 1/p}``.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import DomainError


class NoiseMode(str, enum.Enum):
    ADDITIVE = "add"
    MULTIPLICATIVE = "mult"
    NONE = "none"


class NoiseFamily(str, enum.Enum):
    GAUSSIAN = "gaussian"
    LAPLACE = "laplace"
    POISSON = "poisson"
    DROPOUT = "dropout"


_MODE_ALIASES = {
    "add": NoiseMode.ADDITIVE,
    "additive": NoiseMode.ADDITIVE,
    "mult": NoiseMode.MULTIPLICATIVE,
    "mul": NoiseMode.MULTIPLICATIVE,
    "multiplicative": NoiseMode.MULTIPLICATIVE,
    "none": NoiseMode.NONE,
}

_SPEC_RE = re.compile(r"^\s*(\w+)\s*:\s*(\w+)\s*(?:\(\s*([^)]*?)\s*\))?\s*$")


@dataclass(frozen=True)
class NoiseSpec:
    """A noise family together with its single parameter.

    ``param`` is the standard deviation for Gaussian noise, the scale ``beta``
    for Laplace noise, the rate for Poisson noise (only 1 is accepted) and the
    keep probability ``p`` for dropout. It is ignored when ``mode`` is NONE.
    """

    mode: NoiseMode
    family: NoiseFamily | None = None
    param: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mode", NoiseMode(self.mode))
        if self.family is not None:
            object.__setattr__(self, "family", NoiseFamily(self.family))
        object.__setattr__(self, "param", float(self.param))
        _validate(self)

    @classmethod
    def none(cls) -> NoiseSpec:
        return cls(NoiseMode.NONE)

    @classmethod
    def dropout(cls, p: float) -> NoiseSpec:
        return cls(NoiseMode.MULTIPLICATIVE, NoiseFamily.DROPOUT, p)

    @classmethod
    def gaussian(cls, sigma: float, *, additive: bool = False) -> NoiseSpec:
        mode = NoiseMode.ADDITIVE if additive else NoiseMode.MULTIPLICATIVE
        return cls(mode, NoiseFamily.GAUSSIAN, sigma)

    @classmethod
    def laplace(cls, beta: float, *, additive: bool = False) -> NoiseSpec:
        mode = NoiseMode.ADDITIVE if additive else NoiseMode.MULTIPLICATIVE
        return cls(mode, NoiseFamily.LAPLACE, beta)

    @classmethod
    def poisson(cls, rate: float = 1.0) -> NoiseSpec:
        return cls(NoiseMode.MULTIPLICATIVE, NoiseFamily.POISSON, rate)

    @classmethod
    def parse(cls, text: str) -> NoiseSpec:
        """Parse the ``<mode>:<family>(<param>)`` form, e.g. ``mult:dropout(0.6)``."""
        stripped = text.strip().lower()
        if stripped in ("none", "none:none", "none:none()"):
            return cls.none()
        m = _SPEC_RE.match(stripped)
        if m is None:
            raise DomainError(f"cannot parse noise spec {text!r}")
        mode_s, family_s, param_s = m.groups()
        if mode_s not in _MODE_ALIASES:
            raise DomainError(f"unknown noise mode {mode_s!r}")
        mode = _MODE_ALIASES[mode_s]
        if mode is NoiseMode.NONE:
            return cls.none()
        try:
            family = NoiseFamily(family_s)
        except ValueError:
            raise DomainError(f"unknown noise family {family_s!r}") from None
        if param_s is None or param_s == "":
            if family is not NoiseFamily.POISSON:
                raise DomainError(f"noise family {family_s!r} needs a parameter")
            param = 1.0
        else:
            try:
                param = float(param_s)
            except ValueError:
                raise DomainError(f"bad noise parameter {param_s!r}") from None
        return cls(mode, family, param)

    def __str__(self) -> str:
        if self.mode is NoiseMode.NONE:
            return "none"
        return f"{self.mode.value}:{self.family.value}({self.param:g})"

    @property
    def is_multiplicative(self) -> bool:
        return self.mode is NoiseMode.MULTIPLICATIVE

    @property
    def is_additive(self) -> bool:
        return self.mode is NoiseMode.ADDITIVE

    @property
    def mean(self) -> float:
        return 0.0 if self.is_additive else 1.0


def _validate(spec: NoiseSpec) -> None:
    if spec.mode is NoiseMode.NONE:
        return
    if spec.family is None:
        raise DomainError(f"{spec.mode.value} noise needs a family")
    p = spec.param
    if not math.isfinite(p):
        raise DomainError(f"noise parameter must be finite, got {p}")
    fam = spec.family
    if fam is NoiseFamily.DROPOUT:
        if spec.mode is not NoiseMode.MULTIPLICATIVE:
            raise DomainError("dropout is multiplicative noise")
        if not 0.0 < p <= 1.0:
            raise DomainError(f"dropout keep probability must lie in (0, 1], got {p}")
    elif fam is NoiseFamily.POISSON:
        if spec.mode is not NoiseMode.MULTIPLICATIVE:
            raise DomainError("Poisson noise is only defined in multiplicative mode")
        # mean one is required, so only the unit rate is admissible
        if p != 1.0:
            raise DomainError(f"Poisson noise requires rate 1, got {p}")
    elif p < 0.0:
        raise DomainError(f"{fam.value} scale must be non-negative, got {p}")


def second_moment(spec: NoiseSpec) -> float:
    """Return ``mu2 = E[eps^2]`` for ``spec``.

    NONE returns 1, the multiplicative identity; the variance map treats it as
    leaving the Gaussian moment untouched.
    """
    if spec.mode is NoiseMode.NONE:
        return 1.0
    fam, p = spec.family, spec.param
    if fam is NoiseFamily.GAUSSIAN:
        mu2 = p * p
    elif fam is NoiseFamily.LAPLACE:
        mu2 = 2.0 * p * p
    elif fam is NoiseFamily.POISSON:
        return 2.0
    else:
        return 1.0 / p
    if spec.is_multiplicative:
        mu2 += 1.0
    return mu2


def sample_noise(spec: NoiseSpec, n, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Draw i.i.d. noise of shape ``n`` (an int or a shape tuple)."""
    if spec.mode is NoiseMode.NONE:
        return np.ones(n, dtype=dtype)
    loc = spec.mean
    fam, p = spec.family, spec.param
    if fam is NoiseFamily.GAUSSIAN:
        out = rng.standard_normal(n)
        out *= p
        out += loc
    elif fam is NoiseFamily.LAPLACE:
        out = rng.laplace(loc, p, n) if p > 0 else np.full(n, loc)
    elif fam is NoiseFamily.POISSON:
        out = rng.poisson(p, n).astype(np.float64)
    else:
        out = np.where(rng.random(n) < p, 1.0 / p, 0.0)
    return np.asarray(out, dtype=dtype)


def make_rng(seed) -> np.random.Generator:
    """A PCG64 generator from an int seed or a ``SeedSequence``."""
    return np.random.Generator(np.random.PCG64(seed))
