"""SDE model definitions and the exact square-root-diffusion reference process.

The reference process here is the mean-reverting square-root diffusion

    dX_t = (a - b X_t) dt + sigma sqrt(X_t) dW_t,   X_0 = x0 > 0,

whose moment generating function explodes at a finite critical moment and
whose terminal law is a scaled noncentral chi-squared.  Everything downstream
(conjugates, tail expansions, fixed-point solvers) is validated against the
closed forms in this module.

Also provided: the state-space change of variables that maps a general scalar
SDE ``dX = B(X)dt + sigma(X)dW`` to square-root form, and a validator for the
drift-regularity metadata carried by :class:`SdeSpec`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, optimize, special

from .errors import DomainError, ExplosionError, NumericError

__all__ = [
    "PowerFn",
    "AffineFn",
    "PowerSum",
    "CirParams",
    "SdeSpec",
    "SigmaTransform",
    "DriftValidation",
    "critical_moment",
    "cir_log_mgf",
    "cir_mean",
    "cir_exact_ccdf",
    "cir_exact_log_ccdf",
    "sigma_transform",
    "validate_drift",
    "load_model_spec",
]


# ---------------------------------------------------------------------------
# Structured callables.  Named functional forms unlock analytic derivatives;
# anything else falls back to finite differences.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PowerFn:
    """c * y**p, with analytic derivative."""

    coef: float
    expo: float

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        if self.expo == 0.0:
            return np.broadcast_to(np.float64(self.coef), y.shape).copy() if y.ndim else float(self.coef)
        return self.coef * y ** self.expo

    def deriv(self, y):
        y = np.asarray(y, dtype=float)
        if self.expo == 0.0:
            return np.zeros_like(y) if y.ndim else 0.0
        return self.coef * self.expo * y ** (self.expo - 1.0)

    @property
    def gamma(self) -> float:
        """Logarithmic derivative index y*f'(y)/f(y)."""
        return self.expo


@dataclass(frozen=True)
class AffineFn:
    """c0 + c1 * y."""

    c0: float
    c1: float

    def __call__(self, y):
        return self.c0 + self.c1 * np.asarray(y, dtype=float)

    def deriv(self, y):
        y = np.asarray(y, dtype=float)
        return np.full_like(y, self.c1) if y.ndim else self.c1


@dataclass(frozen=True)
class PowerSum:
    """sum_i c_i * y**e_i  (each term keeps its own tail index e_i)."""

    terms: tuple[tuple[float, float], ...]

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        out = np.zeros_like(y)
        for c, e in self.terms:
            out = out + (c if e == 0.0 else c * y ** e)
        return out if out.ndim else float(out)

    def deriv(self, y):
        y = np.asarray(y, dtype=float)
        out = np.zeros_like(y)
        for c, e in self.terms:
            if e != 0.0:
                out = out + c * e * y ** (e - 1.0)
        return out if out.ndim else float(out)

    @property
    def max_exponent(self) -> float:
        return max(e for _, e in self.terms)


# ---------------------------------------------------------------------------
# Reference square-root process
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CirParams:
    """Parameters of dX = (a - bX)dt + sigma sqrt(X) dW over horizon t.

    ``a >= 0`` (drift level), ``b`` real (mean-reversion rate), ``sigma > 0``,
    ``x0 > 0``, ``t > 0``.
    """

    a: float
    b: float
    sigma: float
    x0: float
    t: float

    def __post_init__(self):
        if self.sigma <= 0.0:
            raise DomainError("sigma must be positive")
        if self.x0 <= 0.0:
            raise DomainError("x0 must be positive")
        if self.t <= 0.0:
            raise DomainError("t must be positive")
        if self.a < 0.0:
            raise DomainError("drift level a must be nonnegative")

    @property
    def mu_star(self) -> float:
        """Critical moment of X_t."""
        return critical_moment(self.b, self.sigma, self.t)

    # scaled-noncentral-chi-squared representation of the terminal law:
    # X_t = scale * Y with Y ~ chi2(df, nc)
    @property
    def chi2_scale(self) -> float:
        return 1.0 / (2.0 * self.mu_star)

    @property
    def chi2_df(self) -> float:
        return 4.0 * self.a / self.sigma ** 2

    @property
    def chi2_nc(self) -> float:
        return self.x0 * math.exp(-self.b * self.t) / self.chi2_scale


def critical_moment(b: float, sigma: float, t: float) -> float:
    """Smallest mu at which E exp(mu X_t) becomes infinite.

    Equals ``2 b / (sigma^2 (1 - exp(-b t)))`` with continuous extension
    ``2 / (sigma^2 t)`` at b = 0.  Evaluated through ``expm1`` so that small
    ``b*t`` incurs no cancellation.
    """
    if sigma <= 0.0:
        raise DomainError("sigma must be positive")
    if t <= 0.0:
        raise DomainError("t must be positive")
    if b == 0.0:
        return 2.0 / (sigma ** 2 * t)
    return 2.0 * b / (sigma ** 2 * (-math.expm1(-b * t)))


def cir_log_mgf(params: CirParams, mu: float | None = None, *,
                gap: float | None = None) -> float:
    """ln E exp(mu X_t) for the reference process.

    Derived from the Riccati solution of the transform ODE; for general sigma

        ln E e^{mu X_t} = x0 e^{-bt} mu mu*_t / (mu*_t - mu)
                          + (2a/sigma^2) ln( mu*_t / (mu*_t - mu) ).

    Near the explosion the value is controlled by ``mu*_t - mu``; callers that
    know the gap directly should pass ``gap`` instead of ``mu`` so it never
    forms as a difference of large numbers.
    """
    ms = params.mu_star
    if gap is None:
        if mu is None:
            raise TypeError("provide either mu or gap")
        gap = ms - mu
    if gap <= 0.0:
        raise ExplosionError(
            f"moment {ms - gap} is at or beyond the critical moment {ms}", ms)
    mu_val = ms - gap
    lin = params.x0 * math.exp(-params.b * params.t) * mu_val * ms / gap
    logpart = (2.0 * params.a / params.sigma ** 2) * math.log(ms / gap)
    return lin + logpart


def cir_mean(params: CirParams) -> float:
    """E X_t = x0 e^{-bt} + (a/b)(1 - e^{-bt}), extended continuously at b=0."""
    if params.b == 0.0:
        return params.x0 + params.a * params.t
    w = -math.expm1(-params.b * params.t)
    return params.x0 * math.exp(-params.b * params.t) + params.a / params.b * w


def _ncx2_sf_series(y: np.ndarray, df: float, nc: float) -> np.ndarray:
    """Upper tail of the noncentral chi-squared via its Poisson-gamma mixture.

    Handles df = 0 (point mass at zero plus a continuous part), which the
    scipy distribution does not.
    """
    y = np.asarray(y, dtype=float)
    half_nc = 0.5 * nc
    j_peak = int(half_nc)
    j_hi = j_peak + int(25.0 + 12.0 * math.sqrt(half_nc + 1.0))
    j = np.arange(0, j_hi + 1)
    logw = -half_nc + j * math.log(half_nc) - special.gammaln(j + 1) \
        if half_nc > 0 else np.where(j == 0, 0.0, -np.inf)
    w = np.exp(logw)
    out = np.zeros_like(y)
    for jj, wjj in zip(j, w):
        shape = 0.5 * df + jj
        if shape == 0.0:
            continue  # zero-degree component: point mass at the origin
        out += wjj * special.gammaincc(shape, 0.5 * y)
    return out


def cir_exact_ccdf(params: CirParams, x) -> np.ndarray | float:
    """P(X_t >= x) from the scaled noncentral chi-squared terminal law."""
    x_arr = np.atleast_1d(np.asarray(x, dtype=float))
    y = x_arr / params.chi2_scale
    df, nc = params.chi2_df, params.chi2_nc
    if df > 0:
        out = 1.0 - special.chndtr(y, df, nc)
        # chndtr loses accuracy in the far tail; switch to the series there
        small = out < 1e-8
        if np.any(small):
            out[small] = _ncx2_sf_series(y[small], df, nc)
    else:
        out = _ncx2_sf_series(y, df, nc)
    out = np.where(x_arr <= 0.0, 1.0, out)
    if not np.all(np.isfinite(out)):
        raise NumericError("noncentral chi-squared tail series did not converge")
    return out if np.ndim(x) else float(out[0])


def cir_exact_log_ccdf(params: CirParams, x: float, dps: int = 30) -> float:
    """ln P(X_t >= x), accurate far below double-precision underflow.

    Integrates the Bessel form of the noncentral chi-squared density in
    arbitrary precision; used as the deep-tail oracle when P underflows.
    """
    import mpmath as mp

    p_plain = cir_exact_ccdf(params, x)
    if p_plain > 1e-280 and p_plain < 1.0:
        return math.log(p_plain)

    df, nc, scale = params.chi2_df, params.chi2_nc, params.chi2_scale
    y0 = x / scale
    with mp.workdps(dps):
        yb = mp.mpf(y0)
        delta = mp.mpf(nc)
        nu = mp.mpf(df)
        order = nu / 2 - 1

        def dens(v):
            return mp.mpf("0.5") * mp.e ** (-(v + delta) / 2) \
                * (v / delta) ** ((nu - 2) / 4) * mp.besseli(order, mp.sqrt(delta * v))

        # e^{-u/2}-type decay: a few hundred units of u capture the mass
        pieces = [0, 5, 20, 60, 160, 400]
        total = mp.mpf(0)
        for lo, hi in zip(pieces[:-1], pieces[1:]):
            total += mp.quad(lambda u: dens(yb + u), [lo, hi])
        return float(mp.log(total))


# ---------------------------------------------------------------------------
# General SDE specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SdeSpec:
    """A scalar SDE dX = B(X)dt + sigma(X)dW with drift-regularity metadata.

    ``beta`` is the growth exponent of the perturbation
    ``Bbar(y) = B(y) + b_limit * y`` on ``[M, inf)``; ``monotone_class``
    records whether y -> B(y)/y increases or decreases there.  When the
    perturbation is a sum of powers, ``bbar_terms`` carries (coef, exponent)
    pairs so downstream code can use analytic derivatives and per-term tail
    indices.
    """

    drift: Callable
    diffusion: Callable
    beta: float
    M: float
    monotone_class: str
    b_limit: float
    x0: float = 1.0
    bbar_terms: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if self.beta >= 1.0:
            raise DomainError("beta must be < 1")
        if self.M <= 0.0:
            raise DomainError("M must be positive")
        if self.monotone_class not in ("increasing", "decreasing"):
            raise DomainError("monotone_class must be 'increasing' or 'decreasing'")
        if self.b_limit <= 0.0:
            raise DomainError("b_limit must be positive")
        if self.monotone_class == "increasing" and self.beta > 0.5:
            raise DomainError("increasing drift ratio requires beta <= 1/2")

    def bbar(self, y):
        """Drift perturbation Bbar(y) = B(y) + b*y."""
        if self.bbar_terms is not None:
            return PowerSum(self.bbar_terms)(y)
        return self.drift(y) + self.b_limit * np.asarray(y, dtype=float)

    @classmethod
    def from_power_perturbation(cls, bbar_terms: Sequence[tuple[float, float]],
                                b: float, x0: float, M: float | None = None,
                                beta: float | None = None,
                                monotone_class: str | None = None) -> "SdeSpec":
        """Build a square-root SDE spec from Bbar given as a sum of powers."""
        terms = tuple((float(c), float(e)) for c, e in bbar_terms)
        ps = PowerSum(terms)
        if beta is None:
            beta = max(0.0, max(e for _, e in terms))
        if M is None:
            M = 1.0
        if monotone_class is None:
            # Bbar(y)/y -> 0; its sign at large y decides the class of B(y)/y
            lead = max(terms, key=lambda t: t[1])
            monotone_class = "decreasing" if lead[0] > 0 else "increasing"
        drift = lambda y: ps(y) - b * np.asarray(y, dtype=float)
        diffusion = PowerFn(1.0, 0.5)
        return cls(drift=drift, diffusion=diffusion, beta=beta, M=M,
                   monotone_class=monotone_class, b_limit=b, x0=x0,
                   bbar_terms=terms)


@dataclass
class DriftValidation:
    """Report produced by :func:`validate_drift`; never raises."""

    monotone_class_observed: str
    b_fitted: float
    beta_fitted: float
    envelope_constant: float
    condition_passed: bool
    warnings: list[str] = field(default_factory=list)


def validate_drift(spec: SdeSpec, grid: np.ndarray) -> DriftValidation:
    """Check the drift-regularity metadata of ``spec`` on a sample grid.

    Reports (i) the observed monotonicity of B(y)/y, (ii) the fitted rate
    -b = lim B(y)/y, (iii) the fitted growth exponent of |Bbar| by log-log
    regression, (iv) whether the increasing class satisfies beta <= 1/2.
    A fitted-vs-declared exponent mismatch beyond 0.05 is a warning, not a
    failure: a finite grid only estimates the true asymptotics.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size < 100:
        raise DomainError("grid must contain at least 100 points")
    grid = np.sort(grid[grid >= spec.M])
    warnings: list[str] = []

    ratio = spec.drift(grid) / grid
    diffs = np.diff(ratio)
    observed = "increasing" if np.sum(diffs > 0) >= 0.5 * diffs.size else "decreasing"
    if observed != spec.monotone_class:
        warnings.append(
            f"declared monotone_class {spec.monotone_class!r} but grid shows {observed!r}")

    # r(y) = -b + c y^(beta-1): fit the two constants from the top of the grid
    top = grid[-max(5, grid.size // 10):]
    basis = np.vstack([np.ones_like(top), top ** (spec.beta - 1.0)]).T
    coef, *_ = np.linalg.lstsq(basis, spec.drift(top) / top, rcond=None)
    b_fitted = -coef[0]

    bbar = np.abs(spec.bbar(grid))
    mask = bbar > 0
    if np.count_nonzero(mask) >= 2:
        slope, intercept = np.polyfit(np.log(grid[mask]), np.log(bbar[mask]), 1)
        beta_fitted = float(slope)
        envelope_constant = float(np.max(bbar / grid ** beta_fitted))
    else:
        beta_fitted = 0.0
        envelope_constant = 0.0
    if abs(beta_fitted - spec.beta) > 0.05:
        warnings.append(
            f"fitted exponent {beta_fitted:.3f} deviates from declared {spec.beta:.3f}")

    condition_passed = not (spec.monotone_class == "increasing" and spec.beta > 0.5)
    return DriftValidation(observed, float(b_fitted), beta_fitted,
                           envelope_constant, condition_passed, warnings)


# ---------------------------------------------------------------------------
# Reduction of a general SDE to square-root form
# ---------------------------------------------------------------------------

@dataclass
class SigmaTransform:
    """State transform Y = Sigma(X) taking dX = B(X)dt + sigma(X)dW to
    dY = Bt(Y)dt + sqrt(Y)dW.

    ``Sigma(x) = (int_0^x du / (2 sigma(u)))^2``; the transformed drift is

        Bt(y) = (Sigma''(x)/Sigma'(x)^2) y + B(x) Sigma'(x),  x = Sigma_inv(y).
    """

    sigma_fn: Callable
    Sigma: Callable
    Sigma_inv: Callable
    Sigma_d1: Callable
    Sigma_d2: Callable
    transformed_drift: Callable


def sigma_transform(sigma_fn, drift_fn) -> SigmaTransform:
    """Build the square-root reduction for a diffusion coefficient sigma(x).

    Requires sigma(u) > 0 for u > 0 with 1/sigma integrable at 0.  A
    :class:`PowerFn` diffusion gets fully analytic Sigma, inverse and
    derivatives; other callables use adaptive quadrature, monotone root
    finding, and finite differences for sigma'.
    """
    if isinstance(sigma_fn, PowerFn):
        c, p = sigma_fn.coef, sigma_fn.expo
        if c <= 0.0:
            raise DomainError("diffusion scale must be positive")
        if p >= 1.0:
            raise DomainError("1/sigma is not integrable at 0 for exponent >= 1")
        lam = 2.0 * (1.0 - p)
        scale = (c * lam) ** 2

        Sigma = lambda x: np.asarray(x, dtype=float) ** lam / scale
        Sigma_inv = lambda y: (scale * np.asarray(y, dtype=float)) ** (1.0 / lam)
        Sigma_d1 = lambda x: lam * np.asarray(x, dtype=float) ** (lam - 1.0) / scale
        Sigma_d2 = lambda x: lam * (lam - 1.0) * np.asarray(x, dtype=float) ** (lam - 2.0) / scale

        def transformed_drift(y):
            y = np.asarray(y, dtype=float)
            x = Sigma_inv(y)
            return (lam - 1.0) / lam + drift_fn(x) * Sigma_d1(x)

        return SigmaTransform(sigma_fn, Sigma, Sigma_inv, Sigma_d1, Sigma_d2,
                              transformed_drift)

    # generic path
    def half_inv_sigma(u):
        s = sigma_fn(u)
        return 1.0 / (2.0 * s)

    probe, _ = integrate.quad(half_inv_sigma, 0.0, 1.0, limit=200)
    if not np.isfinite(probe):
        raise DomainError("integral of 1/sigma diverges at 0")

    def root_sigma(x):
        # int_0^x du/(2 sigma(u)); endpoint handled by quadpack adaptivity
        val, _ = integrate.quad(half_inv_sigma, 0.0, float(x), limit=200)
        return val

    def Sigma(x):
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        vals = np.array([root_sigma(v) ** 2 for v in xs])
        return vals if np.ndim(x) else float(vals[0])

    def Sigma_d1(x):
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        vals = np.array([root_sigma(v) / sigma_fn(v) for v in xs])
        return vals if np.ndim(x) else float(vals[0])

    def sigma_prime(x):
        h = 1e-4 * max(abs(x), 1e-3)
        xs = x + h * np.array([-2.0, -1.0, 1.0, 2.0])
        if xs[0] <= 0:
            h = 0.24 * x
            xs = x + h * np.array([-2.0, -1.0, 1.0, 2.0])
        f = np.array([sigma_fn(v) for v in xs])
        return (f[0] - 8 * f[1] + 8 * f[2] - f[3]) / (12 * h)

    def Sigma_d2(x):
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.empty_like(xs)
        for i, v in enumerate(xs):
            s = sigma_fn(v)
            out[i] = 1.0 / (2.0 * s ** 2) - root_sigma(v) * sigma_prime(v) / s ** 2
        return out if np.ndim(x) else float(out[0])

    def Sigma_inv(y):
        ys = np.atleast_1d(np.asarray(y, dtype=float))
        out = np.empty_like(ys)
        for i, v in enumerate(ys):
            if v == 0.0:
                out[i] = 0.0
                continue
            hi = 1.0
            while Sigma(hi) < v:
                hi *= 2.0
                if hi > 1e300:
                    raise NumericError("Sigma inverse bracket exploded")
            lo = hi / 2.0 if Sigma(hi / 2.0) < v else 0.0
            out[i] = optimize.brentq(lambda x: Sigma(x) - v, lo, hi, xtol=1e-300,
                                     rtol=1e-14)
        return out if np.ndim(y) else float(out[0])

    def transformed_drift(y):
        ys = np.atleast_1d(np.asarray(y, dtype=float))
        out = np.empty_like(ys)
        for i, v in enumerate(ys):
            x = Sigma_inv(v)
            d1 = Sigma_d1(x)
            out[i] = Sigma_d2(x) / d1 ** 2 * v + drift_fn(x) * d1
        return out if np.ndim(y) else float(out[0])

    return SigmaTransform(sigma_fn, Sigma, Sigma_inv, Sigma_d1, Sigma_d2,
                          transformed_drift)


# ---------------------------------------------------------------------------
# JSON model-spec intake (shared by the CLI and the service layer)
# ---------------------------------------------------------------------------

def load_model_spec(source):
    """Parse the JSON model-spec format into a params object.

    ``{"type": "cir"|"cev"|"custom", ...}`` -> CirParams | CevParams | SdeSpec.
    ``source`` may be a dict, a JSON string, or a path to a JSON file.
    """
    if isinstance(source, dict):
        data = source
    else:
        text = str(source)
        if text.lstrip().startswith("{"):
            data = json.loads(text)
        else:
            with open(text) as fh:
                data = json.load(fh)

    kind = data.get("type")
    if kind == "cir":
        return CirParams(a=float(data["a"]), b=float(data["b"]),
                         sigma=float(data["sigma"]), x0=float(data["x0"]),
                         t=float(data["t"]))
    if kind == "cev":
        from .cev import CevParams
        return CevParams(a=float(data["a"]), b=float(data["b"]),
                         sigma=float(data["sigma"]),
                         v0=float(data.get("v0", data.get("x0"))),
                         p=float(data["p"]))
    if kind == "custom":
        terms = [(float(c), float(e)) for c, e in data["bbar"]]
        return SdeSpec.from_power_perturbation(
            terms, b=float(data["b"]), x0=float(data["x0"]),
            M=float(data["M"]) if "M" in data else None,
            beta=float(data["beta"]) if "beta" in data else None,
            monotone_class=data.get("monotone_class"))
    raise DomainError(f"unknown model type {kind!r} in model spec")
