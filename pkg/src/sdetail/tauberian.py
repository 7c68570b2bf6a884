"""Laplace-type integral asymptotics and distribution-tail expansions.

The bridge from a log-MGF exploding at mu* to the right tail of the law:
with Lambda* the convex conjugate, p* the tilt root and p*' = 1/Lambda''(p*),

    P(X >= x)  ~  e^{-Lambda*(x)} sqrt(p*'(x)) / (p*(x) sqrt(2 pi)),

with a computable second-order correction when x -> Lambda(mu* - 1/x) behaves
like a power of index alpha.  The driving estimate is the concentration of

    I(x) = int g(xz) e^{chi_x(z)} dz,
    chi_x(z) = (p*(x) - p*(xz)) xz + Lambda(p*(xz)) - Lambda(p*(x)),

around z = 1, where chi_x is ~ -x^2 p*'(x) (z-1)^2 / 2.  Every asymptotic
here is paired with an adaptive-quadrature evaluation of the same integral so
the expansion can be verified at finite x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial import chebyshev as _cheb
from scipy import integrate

from .errors import DomainError, NumericError
from .legendre import LegendreData, LogMgf
from .models import PowerFn

__all__ = [
    "c_alpha",
    "fit_alpha",
    "ChiKernel",
    "LaplaceResult",
    "TailExpansion",
    "laplace_integral",
    "ccdf_expansion",
    "tilt_ratio",
]

SQRT_2PI = math.sqrt(2.0 * math.pi)


def c_alpha(alpha: float) -> float:
    """Second-order constant of the refined Laplace integral.

    c_alpha = -1/4 (1 + 1/(a+1)) (2 + 1/(a+1)) + 5/12 (1 + 1/(a+1))^2.
    Vanishes at alpha = 1, so a weight with zero log-derivative has no
    1/(x^2 p*') correction on index-1 kernels.
    """
    r = 1.0 + 1.0 / (alpha + 1.0)
    return -0.25 * r * (r + 1.0) + (5.0 / 12.0) * r * r


def fit_alpha(source: LogMgf, x_hi: float = 1e8, decades: float = 2.0,
              n: int = 30) -> float:
    """Regular-variation index of x -> Lambda(mu* - 1/x), by log-log slope.

    Uses the top ``decades`` decades below ``x_hi``; models that know their
    index analytically should carry it on the LogMgf instead.
    """
    xs = np.geomspace(x_hi * 10.0 ** (-decades), x_hi, n)
    vals = np.array([source.fn(source.mu_star - 1.0 / x) for x in xs])
    if np.any(vals <= 0):
        raise DomainError("Lambda must be positive on the fitting window")
    slope, _ = np.polyfit(np.log(xs), np.log(vals), 1)
    return float(slope)


class ChiKernel:
    """The exponent chi_x(z) of the tilted Laplace integral at scale x.

    Evaluated through the cancellation-free integral representation
    chi_x(z) = -x * int_1^z (p*(xv) - p*(x)) dv, with p*(x ) approximated on
    the integration window by a Chebyshev interpolant (p* is smooth there).

    ``window`` is the +-h integration half-width around z = 1; by default
    ``half_width_sds`` standard deviations of the local Gaussian
    1/sqrt(x^2 p*'(x)).  The proof-style window x^{-1+margin/4}/sqrt(p*') is
    exposed separately when envelope parameters are available.
    """

    def __init__(self, data: LegendreData, x: float, half_width_sds: float = 8.0,
                 cheb_degree: int = 40):
        if x <= data.x_min:
            raise DomainError(f"x={x} below the conjugate's valid range")
        self.data = data
        self.x = float(x)
        self.p_star_x = float(data.p_star(x))
        self.p_star_prime_x = float(data.p_star_prime(x))
        self.curvature = self.x ** 2 * self.p_star_prime_x
        sd = 1.0 / math.sqrt(self.curvature)
        self.window = min(half_width_sds * sd, 0.9)
        hw = 1.25 * self.window
        self._poly = _cheb.Chebyshev.interpolate(
            lambda v: data.p_star(self.x * np.asarray(v)), cheb_degree,
            domain=[1.0 - hw, 1.0 + hw])
        self._anti = self._poly.integ()
        self._anti1 = float(self._anti(1.0))

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        val = -self.x * (self._anti(z) - self._anti1 - self.p_star_x * (z - 1.0))
        return val if val.ndim else float(val)

    def exact(self, z: float) -> float:
        """chi_x(z) by direct quadrature of p*(xv) - p*(x); no interpolant."""
        val, _ = integrate.quad(
            lambda v: self.data.p_star(self.x * v) - self.p_star_x, 1.0, z,
            limit=200)
        return -self.x * val

    def quadratic(self, z):
        """The local Gaussian approximation -x^2 p*'(x) (z-1)^2 / 2."""
        z = np.asarray(z, dtype=float)
        return -0.5 * self.curvature * (z - 1.0) ** 2

    def proof_window(self) -> float:
        """x^{-1+margin/4}/sqrt(p*'(x)) with the envelope exponent margin."""
        src = self.data.source
        if not src.has_envelope():
            raise DomainError("proof window needs envelope parameters")
        a1, a2 = src.alpha1, src.alpha2
        margin = 2.0 - (a2 / a1) * (1.0 + 1.0 / (1.0 + a2))
        if margin <= 0:
            raise DomainError("envelope margin is nonpositive")
        return self.x ** (-1.0 + margin / 4.0) / math.sqrt(self.p_star_prime_x)


def _weight_parts(g) -> tuple[Callable, float]:
    """Normalize a weight argument to (callable, log-derivative index)."""
    if isinstance(g, PowerFn):
        return g, g.expo
    if callable(g) and hasattr(g, "gamma"):
        return g, float(g.gamma)
    raise DomainError(
        "weight must be a PowerFn or a callable with a .gamma index")


@dataclass
class LaplaceResult:
    """Asymptotic vs quadrature values of the tilted Laplace integral."""

    x: float
    asymptotic: float
    quadrature: float
    tail_bound: float
    order: str
    curvature: float          # x^2 p*'(x)
    reliable: bool
    notes: list[str] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return self.quadrature / self.asymptotic


def laplace_integral(g, kernel: ChiKernel, order: str = "leading",
                     alpha: float | None = None) -> LaplaceResult:
    """Evaluate int g(xz) exp(chi_x(z)) dz both ways.

    Closed form: sqrt(2 pi) g(x) / (x sqrt(p*'(x))) at leading order;
    refined multiplies by 1 + (gamma^2 + gamma/(alpha+1) + c_alpha) /
    (2 x^2 p*'(x)) where gamma is the log-derivative index of g.

    Quadrature: adaptive integration over [1-h, 1+h] (h = the kernel window)
    plus an exponential bound on the discarded tails, which is attached and
    added as a +- uncertainty, not silently ignored.
    """
    if order not in ("leading", "refined"):
        raise DomainError("order must be 'leading' or 'refined'")
    gfn, gamma = _weight_parts(g)
    x = kernel.x
    gx = float(gfn(x))
    if gx == 0.0:
        raise DomainError("weight vanishes at the evaluation point")

    lead = SQRT_2PI * gx / (x * math.sqrt(kernel.p_star_prime_x))
    if order == "refined":
        if alpha is None:
            alpha = kernel.data.source.alpha
        if alpha is None:
            alpha = fit_alpha(kernel.data.source)
        corr = (gamma * gamma + gamma / (alpha + 1.0) + c_alpha(alpha)) \
            / (2.0 * kernel.curvature)
        asym = lead * (1.0 + corr)
    else:
        asym = lead

    h = kernel.window

    def integrand(z):
        return float(gfn(x * z)) / gx * math.exp(kernel(z))

    quad_val, quad_err = integrate.quad(integrand, 1.0 - h, 1.0 + h,
                                        limit=300, epsabs=0.0, epsrel=1e-11)
    quad_val *= gx
    if not np.isfinite(quad_val):
        raise NumericError("Laplace quadrature did not converge")

    # discarded tails: chi is monotone beyond +-h, so e^{chi} is dominated by
    # a pure exponential with the boundary slope
    notes = []
    tail = 0.0
    for sgn in (+1.0, -1.0):
        zb = 1.0 + sgn * h
        chib = kernel(zb)
        slope = x * abs(kernel.data.p_star(x * zb) - kernel.p_star_x)
        if slope <= 0:
            notes.append("tail slope vanished; bound skipped")
            continue
        gb = abs(float(gfn(x * zb))) / abs(gx)
        tail += 2.0 * gb * math.exp(chib) / slope * abs(gx)
    reliable = kernel.curvature >= 10.0
    if not reliable:
        notes.append("x^2 p*'(x) < 10: expansion outside its regime")
    return LaplaceResult(x=x, asymptotic=asym, quadrature=quad_val,
                         tail_bound=tail, order=order,
                         curvature=kernel.curvature, reliable=reliable,
                         notes=notes)


@dataclass
class TailExpansion:
    """CCDF expansion P(X >= x) ~ e^{-Lambda*} (leading + correction).

    ``leading`` is sqrt(p*')/(p* sqrt(2pi)); ``correction`` the second-order
    term -(2 + alpha/(alpha+1)^2) / (24 mu* sqrt(2pi) x^2 sqrt(p*')).
    ``log_estimate`` stays informative when e^{-Lambda*} underflows.
    ``reliable`` flags points past the crossover
    x^2 p*' > (2 + alpha/(alpha+1)^2) p*^2 / (12 mu*).
    """

    x: np.ndarray
    lambda_star: np.ndarray
    leading: np.ndarray
    correction: np.ndarray
    estimate: np.ndarray
    log_estimate: np.ndarray
    alpha: float
    diagnostics: np.ndarray   # x^2 p*'(x)
    reliable: np.ndarray
    clamped: np.ndarray
    order: str


def ccdf_expansion(data: LegendreData, x, order: str = "leading",
                   alpha: float | None = None) -> TailExpansion:
    """Tail expansion of the law behind ``data`` at the query points.

    Values are clamped to [0, 1] with a flag rather than raising: querying
    the asymptotics at small x is a user error the report carries.
    """
    if order not in ("leading", "refined"):
        raise DomainError("order must be 'leading' or 'refined'")
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(xs <= data.x_min):
        raise DomainError(
            f"query below the conjugate's valid range (x_min={data.x_min})")
    if alpha is None:
        alpha = data.source.alpha
    if alpha is None:
        alpha = fit_alpha(data.source)

    ms = data.source.mu_star
    ps = np.asarray(data.p_star(xs), dtype=float)
    pp = np.asarray(data.p_star_prime(xs), dtype=float)
    ls = np.asarray(data.lambda_star(xs), dtype=float)

    leading = np.sqrt(pp) / (ps * SQRT_2PI)
    a_const = 2.0 + alpha / (alpha + 1.0) ** 2
    correction = np.zeros_like(xs)
    if order == "refined":
        correction = -a_const / (24.0 * ms * SQRT_2PI) / (xs ** 2 * np.sqrt(pp))

    bracket = leading + correction
    curvature = xs ** 2 * pp
    reliable = curvature > a_const * ps ** 2 / (12.0 * ms)

    log_estimate = np.where(bracket > 0, -ls + np.log(np.maximum(bracket, 1e-300)),
                            -np.inf)
    with np.errstate(over="ignore", under="ignore"):
        estimate = np.exp(log_estimate)
    clamped = (estimate > 1.0) | (bracket <= 0)
    estimate = np.clip(estimate, 0.0, 1.0)

    return TailExpansion(x=xs, lambda_star=ls, leading=leading,
                         correction=correction, estimate=estimate,
                         log_estimate=log_estimate, alpha=float(alpha),
                         diagnostics=curvature, reliable=reliable,
                         clamped=clamped, order=order)


def tilt_ratio(g, data: LegendreData, x: float, order: str = "leading") -> float:
    """Tilted-mean ratio E[g(X) e^{(mu*-1/x) X}] / E[e^{(mu*-1/x) X}].

    leading:  g(L') + g'(L') / (mu* - 1/x)
    refined:  g(L') (1 + (gamma^2 - gamma) L'' / (2 L'^2))

    with L', L'' the derivatives of the log-MGF at mu* - 1/x.  The refined
    form is exact for constant g and for the identity (gamma in {0, 1} kills
    the correction, and the tilted mean is L' identically).
    """
    if order not in ("leading", "refined"):
        raise DomainError("order must be 'leading' or 'refined'")
    ms = data.source.mu_star
    if x <= 1.0 / ms:
        raise DomainError("x must satisfy mu* - 1/x > 0")
    mu = ms - 1.0 / x
    L1 = data.source.d1(mu)
    gfn, gamma = _weight_parts(g)
    if order == "leading":
        if hasattr(gfn, "deriv"):
            gprime = float(gfn.deriv(L1))
        else:
            eps = 1e-6 * max(abs(L1), 1.0)
            gprime = (float(gfn(L1 + eps)) - float(gfn(L1 - eps))) / (2 * eps)
        return float(gfn(L1)) + gprime / mu
    L2 = data.source.d2(mu)
    return float(gfn(L1)) * (1.0 + (gamma * gamma - gamma) * L2 / (2.0 * L1 ** 2))
