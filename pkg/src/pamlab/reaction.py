"""Reaction/noise coefficient pairs (f, g) and their derived constants.

A :class:`ReactionSpec` bundles the drift ``f``, the noise coefficient ``g``,
their slopes at 0+ (``mu``, ``sigma``), global Lipschitz bounds, the
intermittency constant ``L_g = inf_{z>0} |g(z)/z|`` and ``sup_{z>0} f(z)/z``.
The solver works with the rates ``f(z)/z`` and ``g(z)/z`` so that it can carry
fields far below the smallest normal double.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

# sampling used when no closed form is registered
RATIO_SAMPLES = 20001
RATIO_RANGE = (1e-12, 1e12)
LIP_SAMPLES = 20001
LIP_RANGE = (-10.0, 10.0)
DEFAULT_CAP = 10.0


def _generic_rate(func, slope):
    def rate(z):
        z = np.asarray(z, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(z != 0.0, func(z) / np.where(z != 0.0, z, 1.0), slope)
        return r
    return rate


def right_derivative(func, h1=1e-6, h2=1e-7):
    """Slope at 0+ of a function vanishing at 0, by Richardson extrapolation."""
    d1 = func(h1) / h1
    d2 = func(h2) / h2
    return float((h1 * d2 - h2 * d1) / (h1 - h2))


def sampled_lipschitz(func, lo=LIP_RANGE[0], hi=LIP_RANGE[1], n=LIP_SAMPLES):
    z = np.linspace(lo, hi, n)
    v = np.asarray(func(z), dtype=float)
    return float(np.max(np.abs(np.diff(v) / np.diff(z))))


def _positive_samples(n=RATIO_SAMPLES):
    return np.geomspace(RATIO_RANGE[0], RATIO_RANGE[1], n)


@dataclass(frozen=True)
class ReactionSpec:
    """Immutable (f, g) pair with its derived constants."""

    f: object = field(repr=False)
    g: object = field(repr=False)
    mu: float
    sigma: float
    lip_f: float
    lip_g: float
    L_g: float
    sup_f_ratio: float
    rate_f: object = field(repr=False)
    rate_g: object = field(repr=False)
    chi: float = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if float(self.f(0.0)) != 0.0 or float(self.g(0.0)) != 0.0:
            raise DomainError("f(0) and g(0) must both be 0")

    @classmethod
    def from_functions(cls, f, g, *, mu=None, sigma=None, lip_f=None, lip_g=None,
                       L_g=None, sup_f_ratio=None, rate_f=None, rate_g=None,
                       chi=None, name="custom", params=None):
        """Build a spec, estimating any constant that is not supplied.

        Slopes use Richardson extrapolation at 1e-6 and 1e-7; ``L_g`` and
        ``sup f(z)/z`` use 20001 log-spaced points in [1e-12, 1e12]; Lipschitz
        bounds use difference quotients on 20001 points of [-10, 10].
        """
        if mu is None:
            mu = right_derivative(f)
        if sigma is None:
            sigma = right_derivative(g)
        z = _positive_samples()
        if L_g is None:
            L_g = float(np.min(np.abs(g(z) / z)))
        if sup_f_ratio is None:
            sup_f_ratio = float(max(np.max(f(z) / z), mu))
        if lip_f is None:
            lip_f = sampled_lipschitz(f)
        if lip_g is None:
            lip_g = sampled_lipschitz(g)
        rate_f = rate_f or _generic_rate(f, mu)
        rate_g = rate_g or _generic_rate(g, sigma)
        return cls(f=f, g=g, mu=float(mu), sigma=float(sigma), lip_f=float(lip_f),
                   lip_g=float(lip_g), L_g=float(L_g), sup_f_ratio=float(sup_f_ratio),
                   rate_f=rate_f, rate_g=rate_g, chi=chi, name=name,
                   params=dict(params or {}))

    def __reduce__(self):
        # preset-built specs travel to worker processes by name and parameters
        if PRESETS.get(self.name) is None:
            raise TypeError(f"reaction spec {self.name!r} is not a preset and cannot be pickled")
        return (_rebuild, (self.name, tuple(sorted(self.params.items()))))

    def require_intermittency(self):
        if not self.L_g > 0:
            raise DomainError(f"{self.name}: L_g = {self.L_g} but coupling needs L_g > 0")
        return self


# ---------------------------------------------------------------- presets

def _linear_rate(c):
    def rate(z):
        return np.full(np.shape(z), c)
    return rate


def linear(mu, sigma):
    """f(z) = mu z, g(z) = sigma z (the parabolic Anderson model)."""
    mu, sigma = float(mu), float(sigma)
    return ReactionSpec.from_functions(
        lambda z: mu * np.asarray(z, dtype=float),
        lambda z: sigma * np.asarray(z, dtype=float),
        mu=mu, sigma=sigma, lip_f=abs(mu), lip_g=abs(sigma), L_g=abs(sigma),
        sup_f_ratio=mu, rate_f=_linear_rate(mu), rate_g=_linear_rate(sigma),
        chi=math.inf, name="linear", params={"mu": mu, "sigma": sigma})


def _clamped(inner, inner_rate, dinner, cap):
    """Extend ``inner`` beyond ``|z| <= cap`` by its tangent lines."""
    fp, fm = inner(cap), inner(-cap)
    dp, dm = dinner(cap), dinner(-cap)

    def f(z):
        z = np.asarray(z, dtype=float)
        zc = np.clip(z, -cap, cap)
        return np.where(z > cap, fp + dp * (z - cap),
                        np.where(z < -cap, fm + dm * (z + cap), inner(zc)))

    def rate(z):
        z = np.asarray(z, dtype=float)
        zc = np.clip(z, -cap, cap)
        big = np.abs(z) > cap
        zb = np.where(big, z, 2.0 * cap)
        outer = np.where(zb > 0, (fp + dp * (zb - cap)) / zb, (fm + dm * (zb + cap)) / zb)
        return np.where(big, outer, inner_rate(zc))

    return f, rate


def fisher_kpp(a, b, sigma=1.0, cap=DEFAULT_CAP):
    """f(z) = a z - b z^2 on |z| <= cap, tangent lines outside; g(z) = sigma z."""
    a, b, sigma, cap = float(a), float(b), float(sigma), float(cap)
    if b < 0 or not all(map(math.isfinite, (a, b, sigma, cap))) or cap <= 0:
        raise DomainError("fisher_kpp needs finite a, sigma and b >= 0, cap > 0")
    f, rate_f = _clamped(lambda z: a * z - b * z * z, lambda z: a - b * z,
                         lambda z: a - 2.0 * b * z, cap)
    return ReactionSpec.from_functions(
        f, lambda z: sigma * np.asarray(z, dtype=float),
        mu=a, sigma=sigma, lip_f=abs(a) + 2.0 * b * cap, lip_g=abs(sigma), L_g=abs(sigma),
        sup_f_ratio=a, rate_f=rate_f, rate_g=_linear_rate(sigma), chi=math.inf,
        name="fisher_kpp", params={"a": a, "b": b, "sigma": sigma, "cap": cap})


def allen_cahn(a, b, sigma=1.0, cap=DEFAULT_CAP):
    """f(z) = a z - b z^3 on |z| <= cap, tangent lines outside; g(z) = sigma z."""
    a, b, sigma, cap = float(a), float(b), float(sigma), float(cap)
    if b < 0 or not all(map(math.isfinite, (a, b, sigma, cap))) or cap <= 0:
        raise DomainError("allen_cahn needs finite a, sigma and b >= 0, cap > 0")
    f, rate_f = _clamped(lambda z: a * z - b * z ** 3, lambda z: a - b * z * z,
                         lambda z: a - 3.0 * b * z * z, cap)
    return ReactionSpec.from_functions(
        f, lambda z: sigma * np.asarray(z, dtype=float),
        mu=a, sigma=sigma, lip_f=max(abs(a), abs(a - 3.0 * b * cap * cap)),
        lip_g=abs(sigma), L_g=abs(sigma), sup_f_ratio=a, rate_f=rate_f,
        rate_g=_linear_rate(sigma), chi=math.inf, name="allen_cahn",
        params={"a": a, "b": b, "sigma": sigma, "cap": cap})


PRESETS = {"linear": linear, "fisher_kpp": fisher_kpp, "allen_cahn": allen_cahn}


def _rebuild(name, items):
    return preset(name, **dict(items))


def preset(name, **params):
    try:
        factory = PRESETS[name]
    except KeyError:
        raise DomainError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return factory(**params)


# ------------------------------------------------------- derived quantities

def linearization_error(spec, a, n_samples=1000):
    """Sampled ``sup_{0<z<=a} |f(z)/z - mu| + sup_{0<z<=a} |g(z)/z - sigma|``.

    The supremum is taken over ``n_samples`` log-spaced points in
    ``[a * 1e-12, a]``.
    """
    a = float(a)
    if not a > 0:
        raise DomainError(f"linearization error needs a > 0, got {a}")
    if n_samples < 2:
        raise DomainError("n_samples must be at least 2")
    z = np.geomspace(a * 1e-12, a, int(n_samples))
    ef = np.max(np.abs(spec.rate_f(z) - spec.mu))
    eg = np.max(np.abs(spec.rate_g(z) - spec.sigma))
    return float(ef + eg)


def dissipation_rate(spec):
    """``L_g^2 / 64 - sup_{z>0} f(z)/z``; positive exactly when the high-noise condition holds."""
    return spec.L_g ** 2 / 64.0 - spec.sup_f_ratio


@dataclass(frozen=True)
class HighNoiseReport:
    holds: bool
    sup_f_ratio: float
    threshold: float

    @property
    def margin(self):
        return self.threshold - self.sup_f_ratio

    def __bool__(self):
        return self.holds

    def describe(self):
        rel = "<" if self.holds else ">="
        return (f"sup f(z)/z = {self.sup_f_ratio:.6g} {rel} L_g^2/64 = {self.threshold:.6g} "
                f"(margin {self.margin:.6g})")


def check_high_noise(spec):
    threshold = spec.L_g ** 2 / 64.0
    return HighNoiseReport(bool(spec.sup_f_ratio < threshold), spec.sup_f_ratio, threshold)
