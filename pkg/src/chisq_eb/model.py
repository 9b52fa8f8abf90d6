"""Hierarchical model for chi-squared statistics.

    lambda ~ g,   J | lambda ~ Poisson(lambda / 2),   X | J ~ chi2(k + 2J)

The marginal of ``X`` is the series ``g_k(x) = sum_j p_j f_{k+2j}(x)`` with
``p_j = P(J = j)``.  Everything downstream (exact gradients, ratios of
marginals at shifted degrees of freedom) is built on the posterior law of
``J`` given ``x``, evaluated in log space.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize, special

from .exceptions import ConvergenceError, DomainError, PoleError
from .specfun import POISSON_TAIL, chisq_cdf, log_gamma, poisson_truncation

__all__ = [
    "PriorSpec",
    "Gamma",
    "Exponential",
    "Degenerate",
    "PointMassMixture",
    "Tabulated",
    "prior_from_dict",
    "MarginalModel",
    "HierDraw",
    "HierSample",
    "formal_chisq_density",
    "marginal_density",
    "marginal_cdf",
    "marginal_quantile",
    "exact_log_gradients",
    "sample",
    "oracle_posterior",
    "log_concavity_diagnostic",
]

_LOG2 = math.log(2.0)


# ---------------------------------------------------------------------------
# priors
# ---------------------------------------------------------------------------


class PriorSpec:
    """Base class for effect-size priors ``g(lambda)`` on ``[0, inf)``."""

    kind = "abstract"

    def log_weights(self, jmax):
        """``log p_j`` for ``j = 0..jmax``."""
        raise NotImplementedError

    def sample(self, rng, n):
        raise NotImplementedError

    def mean(self):
        raise NotImplementedError

    def variance(self):
        raise NotImplementedError

    def to_dict(self):
        raise NotImplementedError

    def weight_truncation(self, tail=POISSON_TAIL):
        """Smallest ``J`` with ``sum_{j > J} p_j < tail``."""
        jmax = 64
        while True:
            p = np.exp(self.log_weights(jmax))
            rest = np.cumsum(p[::-1])[::-1]  # rest[j] = sum_{i >= j} p_i
            # the tail beyond jmax must itself be negligible before trusting it
            if p[-1] < tail * 1e-3 and np.all(np.diff(p[-8:]) <= 0):
                below = np.nonzero(rest < tail)[0]
                if below.size:
                    return max(int(below[0]) - 1, 0)
            jmax *= 2
            if jmax > 1 << 22:
                raise ConvergenceError("prior weight series does not decay")


@dataclass(frozen=True)
class Gamma(PriorSpec):
    """Gamma prior with ``shape`` alpha and ``scale`` beta (mean alpha*beta)."""

    shape: float
    scale: float
    kind = "gamma"

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise DomainError("Gamma prior needs shape > 0 and scale > 0")

    def log_weights(self, jmax):
        # negative binomial: J ~ NB(shape, q) with q = (scale/2) / (1 + scale/2)
        a, b = self.shape, self.scale
        j = np.arange(jmax + 1, dtype=float)
        log_q = math.log(b / 2.0) - math.log1p(b / 2.0)
        log_1mq = -math.log1p(b / 2.0)
        return (
            special.gammaln(a + j) - special.gammaln(a) - special.gammaln(j + 1)
            + a * log_1mq + j * log_q
        )

    def pdf(self, lam):
        lam = np.asarray(lam, dtype=float)
        a, b = self.shape, self.scale
        with np.errstate(divide="ignore"):
            lp = (a - 1) * np.log(lam) - lam / b - special.gammaln(a) - a * math.log(b)
        return np.where(lam >= 0, np.exp(lp), 0.0)

    def upper(self, tail=1e-16):
        return float(special.gammainccinv(self.shape, tail) * self.scale)

    def sample(self, rng, n):
        return rng.gamma(self.shape, self.scale, size=n)

    def mean(self):
        return self.shape * self.scale

    def variance(self):
        return self.shape * self.scale**2

    def to_dict(self):
        return {"kind": "gamma", "parameters": {"shape": self.shape, "scale": self.scale}}


def Exponential(rate):
    """Exponential prior with the given rate, stored as ``Gamma(1, 1/rate)``."""
    if not rate > 0:
        raise DomainError("Exponential prior needs rate > 0")
    return Gamma(1.0, 1.0 / rate)


@dataclass(frozen=True)
class Degenerate(PriorSpec):
    """Point prior at ``value``; ``Degenerate(0)`` is the global null."""

    value: float
    kind = "degenerate"

    def __post_init__(self):
        if not self.value >= 0:
            raise DomainError("Degenerate prior needs value >= 0")

    def log_weights(self, jmax):
        j = np.arange(jmax + 1, dtype=float)
        mu = self.value / 2.0
        if mu == 0:
            return np.where(j == 0, 0.0, -np.inf)
        return -mu + j * math.log(mu) - special.gammaln(j + 1)

    def weight_truncation(self, tail=POISSON_TAIL):
        return poisson_truncation(self.value / 2.0, tail)

    def sample(self, rng, n):
        return np.full(n, float(self.value))

    def mean(self):
        return float(self.value)

    def variance(self):
        return 0.0

    def to_dict(self):
        return {"kind": "degenerate", "parameters": {"value": self.value}}


@dataclass(frozen=True)
class PointMassMixture(PriorSpec):
    """``pi0 * delta_0 + (1 - pi0) * base``; the base must have no atom at 0."""

    pi0: float
    base: PriorSpec
    kind = "point_mass_mixture"

    def __post_init__(self):
        if not 0.0 <= self.pi0 <= 1.0:
            raise DomainError("pi0 must lie in [0, 1]")
        if isinstance(self.base, PointMassMixture) or (
            isinstance(self.base, Degenerate) and self.base.value == 0
        ):
            raise DomainError("PointMassMixture base must place no mass at 0")

    def log_weights(self, jmax):
        lw = self.base.log_weights(jmax)
        p = (1.0 - self.pi0) * np.exp(lw)
        p[0] += self.pi0
        with np.errstate(divide="ignore"):
            return np.log(p)

    def weight_truncation(self, tail=POISSON_TAIL):
        return self.base.weight_truncation(tail)

    def sample(self, rng, n):
        lam = self.base.sample(rng, n)
        null = rng.random(n) < self.pi0
        return np.where(null, 0.0, lam)

    def mean(self):
        return (1.0 - self.pi0) * self.base.mean()

    def variance(self):
        m1 = self.base.mean()
        m2 = self.base.variance() + m1**2
        return (1.0 - self.pi0) * m2 - self.mean() ** 2

    def to_dict(self):
        return {
            "kind": "point_mass_mixture",
            "parameters": {"pi0": self.pi0, "base": self.base.to_dict()},
        }


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)


@dataclass(frozen=True)
class Tabulated(PriorSpec):
    """Piecewise-linear density through ``(grid[i], density[i])``, zero outside."""

    grid: tuple
    density: tuple
    kind = "tabulated"
    _mass: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        d = np.asarray(self.density, dtype=float)
        if g.ndim != 1 or g.shape != d.shape or g.size < 2:
            raise DomainError("tabulated prior needs matching 1-d grid and density")
        if np.any(np.diff(g) <= 0) or g[0] < 0:
            raise DomainError("tabulated grid must be non-negative and strictly increasing")
        if np.any(d < 0):
            raise DomainError("tabulated density must be non-negative")
        mass = float(np.trapezoid(d, g))
        if abs(mass - 1.0) > 1e-6:
            raise DomainError(f"tabulated density integrates to {mass}, not 1")
        object.__setattr__(self, "grid", tuple(g.tolist()))
        object.__setattr__(self, "density", tuple(d.tolist()))
        object.__setattr__(self, "_mass", mass)

    def pdf(self, lam):
        g = np.asarray(self.grid)
        return np.interp(lam, g, np.asarray(self.density), left=0.0, right=0.0) / self._mass

    def _nodes(self):
        g = np.asarray(self.grid)
        a, b = g[:-1, None], g[1:, None]
        lam = 0.5 * (b - a) * _GL_NODES + 0.5 * (a + b)
        w = 0.5 * (b - a) * _GL_WEIGHTS
        return lam.ravel(), (w * self.pdf(lam)).ravel()

    def log_weights(self, jmax):
        lam, w = self._nodes()
        mu = lam / 2.0
        j = np.arange(jmax + 1, dtype=float)[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            lp = -mu + j * np.log(mu) - special.gammaln(j + 1)
        lp = np.where(mu == 0, np.where(j == 0, 0.0, -np.inf), lp)
        with np.errstate(divide="ignore"):
            return np.log(np.exp(lp) @ w)

    def upper(self, tail=None):
        return self.grid[-1]

    def sample(self, rng, n):
        g = np.asarray(self.grid)
        d = np.asarray(self.density) / self._mass
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (d[1:] + d[:-1]) * np.diff(g))])
        u = rng.random(n) * cdf[-1]
        i = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, g.size - 2)
        b = d[i]
        a = (d[i + 1] - d[i]) / (g[i + 1] - g[i])
        r = u - cdf[i]
        # solve a t^2 / 2 + b t = r in the cancellation-free form
        t = 2.0 * r / (b + np.sqrt(np.maximum(b * b + 2.0 * a * r, 0.0)))
        return g[i] + np.minimum(t, g[i + 1] - g[i])

    def _moment(self, r):
        lam, w = self._nodes()
        return float(np.sum(w * lam**r))

    def mean(self):
        return self._moment(1)

    def variance(self):
        return self._moment(2) - self._moment(1) ** 2

    def to_dict(self):
        return {
            "kind": "tabulated",
            "parameters": {"grid": list(self.grid), "density": list(self.density)},
        }


def prior_from_dict(d):
    """Inverse of ``PriorSpec.to_dict``; also accepts ``exponential``."""
    try:
        kind = d["kind"]
        par = d.get("parameters", {})
        if kind == "gamma":
            return Gamma(float(par["shape"]), float(par["scale"]))
        if kind == "exponential":
            return Exponential(float(par["rate"]))
        if kind == "degenerate":
            return Degenerate(float(par["value"]))
        if kind == "point_mass_mixture":
            return PointMassMixture(float(par["pi0"]), prior_from_dict(par["base"]))
        if kind == "tabulated":
            return Tabulated(tuple(par["grid"]), tuple(par["density"]))
    except (KeyError, TypeError) as exc:
        raise DomainError(f"malformed prior specification: {d!r}") from exc
    raise DomainError(f"unknown prior kind {kind!r}")


# ---------------------------------------------------------------------------
# densities and the marginal
# ---------------------------------------------------------------------------


def _is_even_pole(m):
    return (m <= 0) & (np.mod(m, 2.0) == 0)


def formal_chisq_density(x, m):
    """``x^{m/2-1} e^{-x/2} / (2^{m/2} Gamma(m/2))`` for any non-even-pole ``m``.

    For negative ``m`` this is not a probability density and may be negative;
    it is still well defined through the reflection formula for Gamma.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise DomainError("formal density needs x > 0")
    if np.any(_is_even_pole(np.asarray(m, dtype=float))):
        raise PoleError(f"degrees of freedom {m!r} hit a pole of Gamma(m/2)")
    m = np.asarray(m, dtype=float)
    lg, sgn = log_gamma(m / 2.0)
    val = sgn * np.exp((m / 2.0 - 1.0) * np.log(x) - x / 2.0 - (m / 2.0) * _LOG2 - lg)
    return float(val) if val.ndim == 0 else val


def _log_central(x, m):
    """log f_m(x) for m > 0, broadcasting."""
    h = m / 2.0
    return (h - 1.0) * np.log(x) - x / 2.0 - h * _LOG2 - special.gammaln(h)


class MarginalModel:
    """Prior plus null degrees of freedom ``k``; evaluates ``g_k`` and friends.

    Mixture weights ``p_j`` are computed once at construction.  Instances are
    not mutated afterwards and may be shared between threads or processes.
    """

    _MIN_CACHE = 600

    def __init__(self, prior, k):
        k = float(k)
        if not k > 0:
            raise DomainError("null degrees of freedom must be > 0")
        self.prior = prior
        self.k = k
        self.jtrunc = prior.weight_truncation()
        self._log_p = prior.log_weights(max(self.jtrunc, self._MIN_CACHE))
        with np.errstate(over="ignore"):
            total = float(np.exp(self._log_p[: self.jtrunc + 1]).sum())
        if abs(total - 1.0) > 1e-10:
            raise ConvergenceError(f"mixture weights sum to {total}")

    def __repr__(self):
        return f"MarginalModel(prior={self.prior!r}, k={self.k:g})"

    @property
    def weights(self):
        return np.exp(self._log_p[: self.jtrunc + 1])

    def log_weights(self, jmax):
        if jmax < self._log_p.size:
            return self._log_p[: jmax + 1]
        return self.prior.log_weights(jmax)

    def _jmax_for(self, x):
        xm = float(np.max(x)) if np.size(x) else 0.0
        return max(self.jtrunc, int(math.ceil(xm / 2.0 + 10.0 * math.sqrt(xm) + 50.0)))

    def posterior_j_log_terms(self, x, df=None):
        """``log p_j + log f_{df+2j}(x)`` as an ``(n, J+1)`` array (``df`` > 0)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        df = self.k if df is None else float(df)
        jmax = self._jmax_for(x)
        j = np.arange(jmax + 1, dtype=float)
        return self.log_weights(jmax)[None, :] + _log_central(x[:, None], df + 2.0 * j[None, :])

    def posterior_j_weights(self, x, df=None):
        """Posterior law of ``J`` given ``x`` when the null df is ``df``."""
        lt = self.posterior_j_log_terms(x, df)
        lt = lt - lt.max(axis=1, keepdims=True)
        w = np.exp(lt)
        return w / w.sum(axis=1, keepdims=True)

    def density_ratios(self, x, imax=4):
        """``R_{2i}(x) = g_{k-2i}(x) / g_k(x)`` for ``i = 0..imax``.

        Uses ``f_{m-2}(x) = f_m(x) (m - 2) / x`` so each ratio is a posterior
        expectation of a polynomial in ``J``; this is valid for formal
        negative degrees of freedom and vanishes correctly at even poles.
        """
        x = np.atleast_1d(np.asarray(x, dtype=float))
        w = self.posterior_j_weights(x)
        m = self.k + 2.0 * np.arange(w.shape[1], dtype=float)
        out = np.empty((imax + 1, x.size))
        prod = np.ones_like(m)
        out[0] = 1.0
        for i in range(1, imax + 1):
            prod = prod * (m - 2.0 * i)
            out[i] = (w @ prod) / x**i
        return out

    def log_marginal(self, x, df_shift=0):
        """``(log|g_{k-2i}(x)|, sign)`` via a signed log-sum-exp of the series."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        m0 = self.k - 2.0 * df_shift
        jmax = self._jmax_for(x)
        j = np.arange(jmax + 1, dtype=float)
        m = m0 + 2.0 * j
        ok = ~_is_even_pole(m)
        m = m[ok]
        lg, sg = special.gammaln(m / 2.0), special.gammasgn(m / 2.0)
        lt = (
            self.log_weights(jmax)[ok][None, :]
            + (m / 2.0 - 1.0) * np.log(x[:, None]) - x[:, None] / 2.0
            - (m / 2.0) * _LOG2 - lg
        )
        mx = np.max(np.where(np.isfinite(lt), lt, -np.inf), axis=1, keepdims=True)
        s = np.sum(sg * np.exp(lt - mx), axis=1)
        with np.errstate(divide="ignore"):
            return np.log(np.abs(s)) + mx[:, 0], np.sign(s)


def _scalar_or_array(v, like):
    return float(v[0]) if np.ndim(like) == 0 else v


def marginal_density(model, x, df_shift=0, log=False):
    """Marginal ``g_{k - 2 df_shift}(x) = sum_j p_j f_{k - 2 df_shift + 2j}(x)``.

    With ``log=True`` the natural log is returned (guards against underflow
    for large ``x``); this requires the value to be positive.
    """
    xa = np.asarray(x, dtype=float)
    if np.any(xa <= 0):
        raise DomainError("marginal density needs x > 0")
    if df_shift < 0 or int(df_shift) != df_shift:
        raise DomainError("df_shift must be a non-negative integer")
    m0 = model.k - 2.0 * df_shift
    if _is_even_pole(np.float64(m0)):
        raise PoleError(f"shifted degrees of freedom {m0:g} is a pole")
    lv, sg = model.log_marginal(xa, df_shift)
    if log:
        if np.any(sg <= 0):
            raise DomainError("log requested for a non-positive formal marginal")
        return _scalar_or_array(lv, x)
    return _scalar_or_array(sg * np.exp(lv), x)


def marginal_cdf(model, x):
    """``int_0^x g_k = sum_j p_j P(chi2_{k+2j} <= x)``."""
    xa = np.atleast_1d(np.asarray(x, dtype=float))
    jmax = model._jmax_for(xa)
    p = np.exp(model.log_weights(jmax))
    m = model.k + 2.0 * np.arange(jmax + 1)
    return _scalar_or_array(chisq_cdf(xa[:, None], m[None, :]) @ p, x)


def marginal_quantile(model, p):
    """Quantile of the marginal law of ``X`` by root bracketing."""
    if not 0.0 < p < 1.0:
        raise DomainError("probability must lie in (0, 1)")
    hi = max(2.0 * (model.k + model.prior.mean()), 1.0)
    while marginal_cdf(model, hi) < p:
        hi *= 2.0
    return optimize.brentq(lambda v: marginal_cdf(model, v) - p, 0.0, hi, xtol=1e-12, rtol=1e-12)


# ---------------------------------------------------------------------------
# exact gradients
# ---------------------------------------------------------------------------


def ratios_to_log_derivatives(R):
    """Map ``R_{2i} = g_{k-2i}/g_k`` (i = 0..4) to ``l'_k .. l''''_k``.

    Repeated use of ``g'_m = (g_{m-2} - g_m) / 2`` gives
    ``g^{(r)}/g = 2^{-r} sum_i C(r, i) (-1)^{r-i} R_{2i}``; the log
    derivatives follow from the moment-to-cumulant relations.
    """
    G = [None] * 5
    for r in range(1, 5):
        G[r] = sum(math.comb(r, i) * (-1) ** (r - i) * R[i] for i in range(r + 1)) / 2.0**r
    g1, g2, g3, g4 = G[1], G[2], G[3], G[4]
    d1 = g1
    d2 = g2 - g1**2
    d3 = g3 - 3 * g2 * g1 + 2 * g1**3
    d4 = g4 - 4 * g3 * g1 - 3 * g2**2 + 12 * g2 * g1**2 - 6 * g1**4
    return np.stack([d1, d2, d3, d4])


def exact_log_gradients(model):
    """Gradient model whose derivatives come from the true marginal."""
    from .gradest import ExactGradientModel

    return ExactGradientModel(model)


def log_concavity_diagnostic(model, x_grid):
    """Check ``l'_k(x) > l'_{k-2}(x)``, which log-concavity of ``g_k`` implies.

    Returns the boolean mask of grid points where the inequality holds and
    warns (never raises) if it fails anywhere.
    """
    x = np.asarray(x_grid, dtype=float)
    R = model.density_ratios(x, imax=2)
    d1 = 0.5 * (R[1] - 1.0)
    d1_shift = 0.5 * (R[2] / R[1] - 1.0)
    ok = d1 > d1_shift
    if not np.all(ok):
        warnings.warn(
            f"l'_k <= l'_(k-2) at {int(np.sum(~ok))} of {x.size} grid points; "
            "marginal is not log-concave there",
            RuntimeWarning,
            stacklevel=2,
        )
    return ok


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HierDraw:
    lam: float
    j: int
    x: float


@dataclass(frozen=True)
class HierSample:
    """Column-oriented draws; indexing yields :class:`HierDraw` records."""

    lam: np.ndarray
    j: np.ndarray
    x: np.ndarray

    def __len__(self):
        return self.x.size

    def __getitem__(self, i):
        return HierDraw(float(self.lam[i]), int(self.j[i]), float(self.x[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def sample(model, n, seed):
    """Draw ``n`` triples ``(lambda, J, X)``; deterministic given ``seed``."""
    if n < 1:
        raise DomainError("sample size must be >= 1")
    rng = np.random.default_rng(seed)
    lam = model.prior.sample(rng, n)
    j = rng.poisson(lam / 2.0)
    x = rng.chisquare(model.k + 2.0 * j)
    return HierSample(lam, j, x)


# ---------------------------------------------------------------------------
# quadrature oracle
# ---------------------------------------------------------------------------


def _noncentral_logpdf_bessel(x, k, lam):
    """Bessel-function form of the noncentral density, independent of the series."""
    if lam <= 0:
        return float(_log_central(x, k))
    v = k / 2.0 - 1.0
    z = math.sqrt(lam * x)
    iv = special.ive(v, z)
    if iv <= 0 or not np.isfinite(iv):
        # deep tail of a tiny lam: fall back to the leading series term
        return float(_log_central(x, k)) - lam / 2.0
    return -_LOG2 - (x + lam) / 2.0 + (k / 4.0 - 0.5) * math.log(x / lam) + math.log(iv) + z


def _quad_moments(prior, x, k):
    """``int lam^r f_{k,lam}(x) g(lam) dlam`` for r = 0, 1, 2 (scaled)."""
    # common scale so the integrands are O(1)
    shift = float(_log_central(x, k))
    upper = max(prior.upper(), (math.sqrt(x) + 14.0) ** 2)
    if isinstance(prior, Tabulated):
        pts = [p for p in prior.grid if 0 < p < upper]
    else:
        guess = max(x - k, 1e-3)
        pts = sorted({min(guess, upper * 0.5), min(prior.mean(), upper * 0.5)})

    def integrand(lam):
        dens = prior.pdf(lam)
        if dens <= 0:
            return np.zeros(3)
        w = math.exp(_noncentral_logpdf_bessel(x, k, lam) - shift) * float(dens)
        return np.array([w, lam * w, lam * lam * w])

    out, err = integrate.quad_vec(
        integrand, 0.0, upper, points=pts or None, epsabs=0.0, epsrel=1e-12, limit=800,
    )
    if not np.all(np.isfinite(out)) or err > 1e-8 * np.max(np.abs(out)):
        raise ConvergenceError(f"posterior quadrature failed at x={x}")
    return out, shift


def oracle_posterior(model, x):
    """Posterior mean, second moment and variance of ``lambda`` by quadrature.

    Integrates the Bessel form of the noncentral density against the prior
    directly; point masses are summed exactly.  Serves as ground truth for
    the gradient-based formulas.
    """
    x = float(x)
    if not x > 0:
        raise DomainError("oracle posterior needs x > 0")
    prior, k = model.prior, model.k
    if isinstance(prior, Degenerate):
        v = prior.value
        return v, v * v, 0.0
    if isinstance(prior, PointMassMixture):
        if prior.pi0 == 1.0:
            return 0.0, 0.0, 0.0
        mom, shift = _quad_moments(prior.base, x, k)
        mom = (1.0 - prior.pi0) * mom
        mom[0] += prior.pi0  # f_{k,0}(x) / exp(shift) == 1
    else:
        mom, _ = _quad_moments(prior, x, k)
    m1 = mom[1] / mom[0]
    m2 = mom[2] / mom[0]
    return m1, m2, m2 - m1 * m1
