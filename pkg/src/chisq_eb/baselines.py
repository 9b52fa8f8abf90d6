"""Comparison methods: the normal-transformation (NT) empirical Bayes method and
FCR-adjusted frequentist intervals (Benjamini-Yekutieli style)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import optimize, special

from .exceptions import BracketingError, DomainError, TransformSaturationError
from .gradest import FitConfig, _fit_lindsey_raw
from .specfun import (
    chisq_cdf,
    chisq_pdf,
    chisq_sf,
    noncentral_chisq_cdf,
    noncentral_chisq_sf,
    norm_isf,
    norm_pdf,
    norm_quantile,
)

__all__ = [
    "NtModel",
    "NtResult",
    "nt_transform",
    "nt_lambda_table",
    "nt_posterior_interval",
    "by_interval",
]

X_MAX = 80.0
TABLE_POINTS = 2000
TABLE_LAMBDA_MAX = 400.0


def nt_transform(x, k):
    """``z = Phi^{-1}(F_k(x))``, evaluated through the survival function.

    Raises
    ------
    TransformSaturationError
        Where ``F_k(x)`` rounds to one in double precision.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise DomainError("x must be > 0")
    if np.any(np.asarray(chisq_cdf(x, k)) >= 1.0):
        raise TransformSaturationError(
            "F_k(x) rounds to 1; the normal transform saturates (use extrapolation)"
        )
    z = norm_isf(np.asarray(chisq_sf(x, k)))
    return float(z) if np.ndim(z) == 0 else z


def _ncx2_logpdf(x, k, lam):
    # Bessel form, vectorized; lam == 0 falls back to the central density
    x, lam = np.broadcast_arrays(np.asarray(x, float), np.asarray(lam, float))
    v = k / 2.0 - 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        central = (v * np.log(x) - x / 2.0 - (k / 2.0) * math.log(2.0) - special.gammaln(k / 2.0))
        s = np.sqrt(lam * x)
        nc = (
            -math.log(2.0) - (x + lam) / 2.0 + (k / 4.0 - 0.5) * np.log(x / lam)
            + np.log(special.ive(v, s)) + s
        )
    return np.where(lam > 0, nc, central)


@lru_cache(maxsize=16)
def _table(k, points, lam_max):
    lam = np.linspace(0.0, lam_max, points)
    # integrate in s = sqrt(x) so both the origin and the far tail are resolved
    s_hi = math.sqrt(lam_max) + 8.0 * math.sqrt(2.0) + math.sqrt(k) + 10.0
    s = np.linspace(1e-6, s_hi, 6001)
    x = s * s
    z = norm_isf(np.clip(chisq_sf(x, k), 1e-300, 1.0 - 1e-16))
    out = np.empty(points)
    for lo in range(0, points, 250):
        sl = slice(lo, min(lo + 250, points))
        w = np.exp(_ncx2_logpdf(x[None, :], k, lam[sl, None])) * 2.0 * s[None, :]
        w = np.nan_to_num(w)
        out[sl] = np.trapezoid(w * z[None, :], s, axis=1) / np.trapezoid(w, s, axis=1)
    # enforce monotonicity against quadrature noise
    return lam, np.maximum.accumulate(out)


def nt_lambda_table(k, points=TABLE_POINTS, lam_max=TABLE_LAMBDA_MAX):
    """``(lambda_grid, E[Phi^{-1}(F_k(X))])`` for ``X ~ chi2_k(lambda)``.

    Built once per ``k`` and cached; the second column is non-decreasing.
    """
    lam, ez = _table(float(k), int(points), float(lam_max))
    return lam.copy(), ez.copy()


class NtModel:
    """Normal-transformation empirical Bayes on ``z = Phi^{-1}(F_k(x))``.

    Parameters
    ----------
    k : float
        Null degrees of freedom.
    marginal : MarginalModel, optional
        Known model; the log-density of ``z`` is then exact.
    lindsey : LindseyModel, optional
        Fitted log-density of ``z`` (see :meth:`fit`).
    x_max : float
        Statistics above ``x_max`` are handled by linear extrapolation in x.
    """

    def __init__(self, k, marginal=None, lindsey=None, x_max=X_MAX):
        if (marginal is None) == (lindsey is None):
            raise DomainError("give exactly one of marginal or lindsey")
        self.k = float(k)
        self.marginal = marginal
        self.lindsey = lindsey
        self.x_max = x_max
        self._grads = None
        if marginal is not None:
            from .model import exact_log_gradients

            self._grads = exact_log_gradients(marginal)
        self.table = nt_lambda_table(self.k)

    @classmethod
    def fit(cls, data, k, degree=7, x_max=X_MAX):
        """Fit the log-density of the transformed data by Lindsey's method."""
        x = np.asarray(data, dtype=float).ravel()
        z = norm_isf(np.clip(chisq_sf(x, k), 1e-300, 1.0 - 1e-16))
        cfg = FitConfig(basis_size=max(degree, 4), method="lindsey", quantiles=(0.0, 1.0))
        return cls(k, lindsey=_fit_lindsey_raw(z, cfg, real_line=True), x_max=x_max)

    def z_derivatives(self, x):
        """``(z, l'(z), l''(z))`` of the log-density of the transformed statistic."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        z = np.atleast_1d(nt_transform(x, self.k))
        if self.lindsey is not None:
            d = self.lindsey.evaluate(z)
            return z, d.d1, d.d2
        k = self.k
        g = self._grads.evaluate(x)
        lf1 = (k / 2.0 - 1.0) / x - 0.5
        lf2 = -(k / 2.0 - 1.0) / x**2
        # r = dx/dz
        r = norm_pdf(z) / np.asarray(chisq_pdf(x, k))
        D = g.d1 - lf1
        dD = g.d2 - lf2
        d1 = D * r - z
        d2 = dD * r * r + D * r * (-z - lf1 * r) - 1.0
        return z, d1, d2

    def lambda_of(self, mu):
        """Map a mean on the z scale to ``lambda`` through the table (monotone)."""
        lam, ez = self.table
        mu = np.asarray(mu, dtype=float)
        out = np.interp(mu, ez, lam, left=0.0)
        slope = (lam[-1] - lam[-2]) / max(ez[-1] - ez[-2], 1e-12)
        out = np.where(mu > ez[-1], lam[-1] + slope * (mu - ez[-1]), out)
        return out


@dataclass(frozen=True)
class NtResult:
    mean: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    extrapolated: np.ndarray


def _nt_direct(m, x, level):
    z, d1, d2 = m.z_derivatives(x)
    mu = z + d1
    sd = np.sqrt(np.maximum(1.0 + d2, 0.0))
    h = norm_quantile(0.5 * (1.0 + level)) * sd
    return m.lambda_of(mu), m.lambda_of(mu - h), m.lambda_of(mu + h)


def nt_posterior_interval(m, x, k=None, level=0.9):
    """NT posterior mean of ``lambda`` and interval endpoints.

    Tweedie's normal formula gives ``mu = z + l'(z)`` and posterior sd
    ``sqrt(1 + l''(z))``; the interval ``mu -/+ z_q sd`` is mapped back to
    the ``lambda`` scale through the monotone table ``lambda -> E[z]``.
    Statistics above ``m.x_max`` are extrapolated linearly in ``x`` from the
    last unit step below ``x_max``.

    Returns
    -------
    NtResult
        Scalars become length-1 arrays.
    """
    if k is not None and float(k) != m.k:
        raise DomainError("k does not match the NT model")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(x <= 0):
        raise DomainError("x must be > 0")
    ext = np.zeros(x.size, dtype=bool) if m.x_max is None else x > m.x_max
    mean, lo, hi = (np.empty(x.size) for _ in range(3))
    if np.any(~ext):
        r = _nt_direct(m, x[~ext], level)
        mean[~ext], lo[~ext], hi[~ext] = r
    if np.any(ext):
        a = np.array(_nt_direct(m, np.array([m.x_max - 1.0, m.x_max]), level))
        slope = a[:, 1] - a[:, 0]
        dx = x[ext] - m.x_max
        mean[ext] = a[0, 1] + slope[0] * dx
        lo[ext] = np.maximum(a[1, 1] + slope[1] * dx, 0.0)
        hi[ext] = a[2, 1] + slope[2] * dx
    return NtResult(mean, lo, hi, ext)


def _solve_lambda(fun, target, tol=1e-10):
    """Root of a monotone ``fun(lam) - target`` on ``[0, lam_max]``, growing the bracket."""
    f0 = fun(0.0) - target
    hi = 16.0
    for _ in range(60):
        if np.sign(fun(hi) - target) != np.sign(f0):
            return optimize.brentq(lambda l: fun(l) - target, 0.0, hi, xtol=tol, rtol=1e-12)
        hi *= 2.0
    raise BracketingError("could not bracket the non-centrality parameter")


def by_interval(x, k, q=0.1, selected=1, total=1):
    """Equal-tailed interval for ``lambda`` at level ``1 - q R / m``.

    ``lo`` solves ``P(X >= x | lambda) = a`` and ``hi`` solves
    ``P(X <= x | lambda) = a`` with ``a = q R / (2 m)``; ``lo = 0`` when the
    null tail already exceeds ``a``.
    """
    x = float(x)
    if not x > 0:
        raise DomainError("x must be > 0")
    if not 1 <= selected <= total:
        raise DomainError("need 1 <= selected <= total")
    if not 0 < q < 1:
        raise DomainError("q must lie in (0, 1)")
    a = q * selected / (2.0 * total)
    sf = lambda lam: noncentral_chisq_sf(x, k, lam)
    cdf = lambda lam: noncentral_chisq_cdf(x, k, lam)
    lo = 0.0 if sf(0.0) >= a else _solve_lambda(sf, a)
    if cdf(0.0) <= a:
        hi = 0.0
    else:
        hi = _solve_lambda(cdf, a)
    return lo, hi
