"""Convex-conjugate toolkit for log-MGFs that explode at a critical moment.

Given Lambda(mu) = ln E exp(mu X) finite on [0, mu*), this module builds the
Fenchel-Legendre transform Lambda*(x) = sup_mu (mu x - Lambda(mu)), the tilt
root p*(x) solving Lambda'(p*) = x, and its derivative p*'(x) = 1/Lambda''(p*).
These three objects drive every tail expansion downstream.

Power-law envelopes  c1/(mu*-mu)^a1 <= Lambda(mu) <= c2/(mu*-mu)^a2  near the
explosion pin p*(x) and p*'(x) between explicit power bounds; the checker
here verifies those brackets on a grid and reports the worst slack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize

from .errors import DomainError, NumericError
from .models import CirParams

__all__ = [
    "LogMgf",
    "LegendreData",
    "EnvelopeReport",
    "cir_log_mgf_model",
    "cir_a0_legendre",
    "gaussian_log_mgf",
    "log_mgf_from_samples",
    "fit_envelope",
    "build_legendre",
    "check_pstar_envelope",
    "biconjugate",
]


@dataclass
class LogMgf:
    """A log-MGF Lambda on [0, mu*) with first and second derivatives.

    ``alpha`` is the regular-variation index of x -> Lambda(mu* - 1/x) when
    known; ``alpha1/alpha2/c1/c2`` are optional power-envelope parameters.
    All callables accept scalars.
    """

    mu_star: float
    fn: Callable[[float], float]
    d1: Callable[[float], float]
    d2: Callable[[float], float]
    alpha: float | None = None
    alpha1: float | None = None
    alpha2: float | None = None
    c1: float | None = None
    c2: float | None = None

    def convexity_gaps(self, n: int = 60) -> np.ndarray:
        """Second differences of Lambda on a grid refined toward mu*."""
        gaps = self.mu_star * np.geomspace(1e-6, 0.999, n)[::-1]
        mus = self.mu_star - gaps
        vals = np.array([self.fn(m) for m in mus])
        return np.diff(vals, 2)

    def has_envelope(self) -> bool:
        return None not in (self.alpha1, self.alpha2, self.c1, self.c2)


def cir_log_mgf_model(params: CirParams) -> LogMgf:
    """Analytic LogMgf of the reference square-root process.

    Lambda(mu) = K mu/(mu*-mu) + (2a/sigma^2) ln(mu*/(mu*-mu)) with
    K = x0 e^{-bt} mu*; derivatives in closed form.
    """
    ms = params.mu_star
    K = params.x0 * math.exp(-params.b * params.t) * ms
    ln_coef = 2.0 * params.a / params.sigma ** 2

    def fn(mu):
        g = ms - mu
        return K * mu / g + ln_coef * math.log(ms / g)

    def d1(mu):
        g = ms - mu
        return K * ms / g ** 2 + ln_coef / g

    def d2(mu):
        g = ms - mu
        return 2.0 * K * ms / g ** 3 + ln_coef / g ** 2

    return LogMgf(mu_star=ms, fn=fn, d1=d1, d2=d2, alpha=1.0)


def gaussian_log_mgf(cap: float = 1e12) -> LogMgf:
    """Lambda(p) = p^2/2 with a large artificial explosion cap (test surrogate)."""
    return LogMgf(mu_star=cap, fn=lambda m: 0.5 * m * m, d1=lambda m: m,
                  d2=lambda m: 1.0)


def log_mgf_from_samples(mu: np.ndarray, values: np.ndarray,
                         mu_star: float) -> LogMgf:
    """Monotone C^1 model of Lambda from samples on a grid refined toward mu*.

    Interpolates ln Lambda against ln(mu* - mu) with a shape-preserving cubic,
    so the conjugate machinery sees smooth first and second derivatives; raw
    second differences of the samples are never used.
    """
    from scipy.interpolate import PchipInterpolator

    mu = np.asarray(mu, dtype=float)
    values = np.asarray(values, dtype=float)
    keep = values > 0
    if np.count_nonzero(keep) < 4:
        raise DomainError("need at least 4 samples with Lambda > 0")
    w = np.log(mu_star - mu[keep])
    v = np.log(values[keep])
    order = np.argsort(w)
    interp = PchipInterpolator(w[order], v[order])
    dinterp = interp.derivative()
    d2interp = interp.derivative(2)

    def fn(m):
        return float(np.exp(interp(math.log(mu_star - m))))

    def d1(m):
        g = mu_star - m
        return float(-np.exp(interp(math.log(g))) * dinterp(math.log(g)) / g)

    def d2(m):
        g = mu_star - m
        lw = math.log(g)
        f = float(np.exp(interp(lw)))
        a1 = float(dinterp(lw))
        a2 = float(d2interp(lw))
        # d2/dm2 of exp(interp(ln g)) with dg/dm = -1
        return f * (a1 * a1 + a2 - a1) / g ** 2

    return LogMgf(mu_star=mu_star, fn=fn, d1=d1, d2=d2)


def fit_envelope(source: LogMgf, gap_window: tuple[float, float] = (1e-6, 1e-2),
                 n: int = 40) -> LogMgf:
    """Fit power-envelope parameters from Lambda samples near the explosion.

    Fits a common exponent alpha1 = alpha2 by log-log regression of Lambda
    against the gap mu* - mu, then sets c1 (c2) to the min (max) of
    Lambda * gap^alpha over the window.  Returns a copy with the envelope
    fields populated.
    """
    gaps = source.mu_star * np.geomspace(gap_window[0], gap_window[1], n)
    vals = np.array([source.fn(source.mu_star - g) for g in gaps])
    if np.any(vals <= 0):
        raise DomainError("Lambda must be positive on the fitting window")
    slope, _ = np.polyfit(np.log(gaps), np.log(vals), 1)
    alpha = -float(slope)
    prods = vals * gaps ** alpha
    return LogMgf(mu_star=source.mu_star, fn=source.fn, d1=source.d1,
                  d2=source.d2, alpha=source.alpha,
                  alpha1=alpha, alpha2=alpha,
                  c1=float(np.min(prods)), c2=float(np.max(prods)))


# ---------------------------------------------------------------------------
# Conjugate construction
# ---------------------------------------------------------------------------

@dataclass
class LegendreData:
    """Conjugate bundle: p*(x), p*'(x), Lambda*(x) for x >= x_min."""

    source: LogMgf
    x_min: float
    _closed_form: tuple | None = None

    def _root_gap(self, x: float) -> float:
        """Solve Lambda'(mu* - g) = x for the gap g, to ~1e-13 relative."""
        ms = self.source.mu_star
        d1 = self.source.d1

        def f_of_u(u):
            return d1(ms - math.exp(u)) - x

        u_hi = math.log(ms) - 1e-12
        if f_of_u(u_hi) > 0.0:
            raise DomainError(
                f"x={x} below the image of Lambda' (valid range starts at {self.x_min})")
        u_lo = u_hi
        step = 2.0
        while f_of_u(u_lo) < 0.0:
            u_lo -= step
            step *= 2.0
            if u_lo < -680.0:
                raise NumericError("tilt root bracket collapsed")
        u = optimize.brentq(f_of_u, u_lo, u_hi, xtol=1e-14, rtol=8.9e-16)
        g = math.exp(u)
        # one Newton polish: d/dg Lambda'(mu*-g) = -Lambda''
        for _ in range(2):
            resid = d1(ms - g) - x
            g_new = g + resid / self.source.d2(ms - g)
            if not (0.0 < g_new < ms):
                break
            if abs(g_new - g) <= 1e-13 * g:
                g = g_new
                break
            g = g_new
        return g

    def p_star(self, x):
        if self._closed_form is not None:
            ms, c = self._closed_form
            return ms - np.sqrt(c / np.asarray(x, dtype=float))
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.array([self.source.mu_star - self._root_gap(v) for v in xs])
        return out if np.ndim(x) else float(out[0])

    def p_star_prime(self, x):
        if self._closed_form is not None:
            ms, c = self._closed_form
            xa = np.asarray(x, dtype=float)
            return 0.5 * np.sqrt(c) * xa ** -1.5
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.array([1.0 / self.source.d2(self.source.mu_star - self._root_gap(v))
                        for v in xs])
        return out if np.ndim(x) else float(out[0])

    def lambda_star(self, x):
        if self._closed_form is not None:
            ms, c = self._closed_form
            xa = np.asarray(x, dtype=float)
            k = c / ms
            return ms * xa - 2.0 * np.sqrt(c * xa) + k
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.empty_like(xs)
        for i, v in enumerate(xs):
            g = self._root_gap(v)
            p = self.source.mu_star - g
            out[i] = p * v - self.source.fn(p)
        return out if np.ndim(x) else float(out[0])


def build_legendre(source: LogMgf, x_range: tuple[float, float]) -> LegendreData:
    """Construct the conjugate bundle, validating that x_range is reachable.

    The tilt root is found by a bracketed solve in ln(mu* - mu) followed by
    Newton polish, converging the gap to ~1e-13 relative.
    """
    lo, hi = x_range
    if not (0.0 < lo < hi):
        raise DomainError("x_range must satisfy 0 < lo < hi")
    x_min = source.d1(0.0)
    if lo <= x_min:
        raise DomainError(
            f"x_range starts at {lo} but the tilt root is only bracketed for "
            f"x > Lambda'(0) = {x_min}")
    data = LegendreData(source=source, x_min=x_min)
    data._root_gap(lo)
    data._root_gap(hi)
    return data


def cir_a0_legendre(params: CirParams) -> LegendreData:
    """Closed-form conjugate for the zero-drift-level reference process.

    With Lambda(mu) = K mu/(mu*-mu), K = x0 e^{-bt} mu*, the tilt root is
    p*(x) = mu* - sqrt(K mu*/x), Lambda*(x) = mu* x - 2 sqrt(K mu* x) + K,
    p*'(x) = sqrt(K mu*)/(2 x^{3/2}).  Used as an exact regression target for
    the root-finding path.
    """
    if params.a != 0.0:
        raise DomainError("closed-form conjugate requires a = 0")
    source = cir_log_mgf_model(params)
    ms = params.mu_star
    K = params.x0 * math.exp(-params.b * params.t) * ms
    data = LegendreData(source=source, x_min=source.d1(0.0))
    data._closed_form = (ms, K * ms)
    return data


def biconjugate(data: LegendreData, p: float, x_grid: np.ndarray,
                refine: bool = True) -> float:
    """sup of (p x - Lambda*(x)); recovers Lambda(p) for convex Lambda.

    Starts from the discrete sup over ``x_grid`` and, by default, polishes it
    with a bounded scalar maximization inside the bracketing cells (the grid
    alone limits accuracy to the square of its local spacing).
    """
    x_grid = np.sort(np.asarray(x_grid, dtype=float))
    vals = p * x_grid - data.lambda_star(x_grid)
    i = int(np.argmax(vals))
    best = float(vals[i])
    if not refine:
        return best
    lo = x_grid[max(i - 1, 0)]
    hi = x_grid[min(i + 1, x_grid.size - 1)]
    if lo < hi:
        res = optimize.minimize_scalar(
            lambda x: -(p * x - data.lambda_star(float(x))),
            bounds=(lo, hi), method="bounded",
            options={"xatol": 1e-12 * hi})
        best = max(best, float(-res.fun))
    return best


# ---------------------------------------------------------------------------
# Envelope verification
# ---------------------------------------------------------------------------

@dataclass
class EnvelopeReport:
    """Outcome of the p* / p*' power-bound checks at the queried points."""

    x: np.ndarray
    p_star: np.ndarray
    lower_bound: np.ndarray
    upper_bound: np.ndarray
    bounds_hold: bool
    m1: float
    m2: float
    pprime_spread: float
    x2_pprime: np.ndarray
    x2_pprime_increasing: bool
    worst_slack: float
    notes: list[str] = field(default_factory=list)


def check_pstar_envelope(data: LegendreData, xs) -> EnvelopeReport:
    """Verify the conjugate-root bounds implied by a power envelope on Lambda.

    With ct2 = (c2 a2)^{1/(1+a2)} (1+a2)/a2 the tilt root must satisfy

        mu* - ct2 x^{-1/(a2+1)}  <=  p*(x)  <=  mu* - (c1/ct2) x^{-(a2/a1)/(a2+1)}

    and p*'(x) must lie between m1 x^{-(a2/a1)(1+1/(1+a2))} and
    m2 x^{-(a1/a2)(1+1/(1+a2))} for some positive constants; m1, m2 are fitted
    as the extreme ratios over the queried points and reported together with
    their spread.  Floating-point slack of 1e-9 is allowed on the inequalities.
    """
    src = data.source
    if not src.has_envelope():
        raise DomainError("source LogMgf carries no envelope parameters")
    a1, a2, c1, c2 = src.alpha1, src.alpha2, src.c1, src.c2
    ms = src.mu_star
    xs = np.asarray(xs, dtype=float)

    ct2 = (c2 * a2) ** (1.0 / (1.0 + a2)) * (1.0 + a2) / a2
    lower = ms - ct2 * xs ** (-1.0 / (a2 + 1.0))
    upper = ms - (c1 / ct2) * xs ** (-(a2 / a1) / (a2 + 1.0))

    ps = data.p_star(xs)
    slack = 1e-9 * ms
    holds = bool(np.all(ps >= lower - slack) and np.all(ps <= upper + slack))

    pp = data.p_star_prime(xs)
    exp_lo = -(a2 / a1) * (1.0 + 1.0 / (1.0 + a2))
    exp_hi = -(a1 / a2) * (1.0 + 1.0 / (1.0 + a2))
    m1 = float(np.min(pp / xs ** exp_lo))
    m2 = float(np.max(pp / xs ** exp_hi))
    spread = max(np.max(pp / xs ** exp_lo) / m1, m2 / np.min(pp / xs ** exp_hi))

    x2pp = xs ** 2 * pp
    increasing = bool(np.all(np.diff(x2pp[np.argsort(xs)]) > 0))

    gaps_low = (ps - lower) / ms
    gaps_up = (upper - ps) / ms
    worst = float(min(np.min(gaps_low), np.min(gaps_up)))

    notes = []
    if not holds:
        notes.append("a p* power bound failed beyond floating-point slack")
    if not increasing:
        notes.append("x^2 p*'(x) is not increasing over the queried points")
    return EnvelopeReport(xs, ps, lower, upper, holds, m1, m2, float(spread),
                          x2pp, increasing, worst, notes)
