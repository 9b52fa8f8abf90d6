"""Special functions: log-gamma, incomplete gamma, chi-squared and normal laws.

All functions accept scalars or array-likes and broadcast; 0-d results are
returned as Python floats.
"""

import math

import numpy as np
from scipy import special

from .exceptions import ConvergenceError, DomainError, PoleError

__all__ = [
    "log_gamma",
    "regularized_gamma_p",
    "regularized_gamma_q",
    "chisq_logpdf",
    "chisq_pdf",
    "chisq_cdf",
    "chisq_sf",
    "chisq_quantile",
    "chisq_isf",
    "poisson_truncation",
    "noncentral_chisq_pdf",
    "noncentral_chisq_cdf",
    "noncentral_chisq_sf",
    "norm_pdf",
    "norm_cdf",
    "norm_sf",
    "norm_quantile",
    "norm_isf",
]

POISSON_TAIL = 1e-12
QUANTILE_MAXITER = 200


def _out(a):
    a = np.asarray(a, dtype=float)
    return float(a) if a.ndim == 0 else a


def _is_pole(a):
    return (a <= 0) & (a == np.floor(a))


def log_gamma(a):
    """Log of ``|Gamma(a)|`` together with the sign of ``Gamma(a)``.

    Negative non-integer arguments are handled by the reflection formula,
    which is what makes formal chi-squared densities with negative degrees
    of freedom computable.

    Returns
    -------
    (logabs, sign) : tuple
        ``sign`` is +1.0 or -1.0.

    Raises
    ------
    PoleError
        If any ``a`` is a non-positive integer.
    """
    arr = np.asarray(a, dtype=float)
    if np.any(_is_pole(arr)):
        raise PoleError(f"Gamma has a pole at non-positive integer {a!r}")
    if arr.ndim == 0:
        v = float(arr)
        # math.lgamma is a Lanczos approximation with reflection for v < 0.5
        sign = 1.0 if v > 0 or math.floor(v) % 2 == 0 else -1.0
        return math.lgamma(v), sign
    return special.gammaln(arr), special.gammasgn(arr)


def regularized_gamma_p(a, x):
    """Regularized lower incomplete gamma ``P(a, x)``."""
    return _out(special.gammainc(a, x))


def regularized_gamma_q(a, x):
    """Regularized upper incomplete gamma ``Q(a, x) = 1 - P(a, x)``."""
    return _out(special.gammaincc(a, x))


def _check_x(x):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or np.any(np.isnan(x)):
        raise DomainError("chi-squared argument must be >= 0")
    return x


def _check_df(k):
    k = np.asarray(k, dtype=float)
    if np.any(k <= 0) or np.any(np.isnan(k)):
        raise DomainError("degrees of freedom must be > 0")
    return k


def chisq_logpdf(x, k):
    x, k = _check_x(x), _check_df(k)
    h = k / 2.0
    with np.errstate(divide="ignore"):
        out = special.xlogy(h - 1.0, x) - x / 2.0 - h * math.log(2.0) - special.gammaln(h)
    return _out(out)


def chisq_pdf(x, k):
    return _out(np.exp(chisq_logpdf(x, k)))


def chisq_cdf(x, k):
    """Central chi-squared CDF, ``P(k/2, x/2)``."""
    x, k = _check_x(x), _check_df(k)
    return _out(special.gammainc(k / 2.0, x / 2.0))


def chisq_sf(x, k):
    """Central chi-squared survival function, ``Q(k/2, x/2)``.

    Computed directly from the upper incomplete gamma so it stays accurate
    far into the right tail.
    """
    x, k = _check_x(x), _check_df(k)
    return _out(special.gammaincc(k / 2.0, x / 2.0))


def _invert_monotone(f, fprime, target, lo, hi, tol, increasing=True):
    """Bracketed Newton iteration on a monotone function of ``x >= 0``.

    Falls back to bisection whenever a Newton step leaves the bracket.
    """
    sgn = 1.0 if increasing else -1.0
    x = 0.5 * (lo + hi)
    for _ in range(QUANTILE_MAXITER):
        r = f(x) - target
        if abs(r) <= tol:
            return x
        if sgn * r < 0:
            lo = x
        else:
            hi = x
        d = fprime(x)
        step_ok = False
        if d != 0 and np.isfinite(d):
            xn = x - r / d
            if lo < xn < hi:
                x, step_ok = xn, True
        if not step_ok:
            x = 0.5 * (lo + hi)
        if hi - lo <= 1e-15 * hi:
            return x
    raise ConvergenceError(
        f"quantile search did not converge in {QUANTILE_MAXITER} iterations"
    )


def _chisq_bracket(k, inside):
    hi = max(2.0 * k, 1.0)
    for _ in range(QUANTILE_MAXITER):
        if inside(hi):
            return hi
        hi *= 2.0
    raise ConvergenceError("could not bracket chi-squared quantile")


def chisq_quantile(p, k, tol=1e-12):
    """Inverse of :func:`chisq_cdf` by safeguarded Newton/bisection.

    Raises
    ------
    DomainError
        Unless ``0 < p < 1``.
    ConvergenceError
        After 200 iterations without meeting the tolerance.
    """
    if np.ndim(p) or np.ndim(k):
        p, k = np.broadcast_arrays(np.asarray(p, float), np.asarray(k, float))
        return np.array([chisq_quantile(pi, ki, tol) for pi, ki in zip(p.ravel(), k.ravel())]).reshape(p.shape)
    p, k = float(p), float(_check_df(k))
    if not 0.0 < p < 1.0:
        raise DomainError(f"probability must lie in (0, 1), got {p}")
    if p > 0.5:
        return chisq_isf(1.0 - p, k, tol)
    hi = _chisq_bracket(k, lambda v: chisq_cdf(v, k) >= p)
    return _invert_monotone(
        lambda v: chisq_cdf(v, k), lambda v: chisq_pdf(v, k), p, 0.0, hi, min(tol, p * 1e-10)
    )


def chisq_isf(q, k, tol=1e-12):
    """Upper-tail quantile: the ``x`` with ``chisq_sf(x, k) == q``."""
    if np.ndim(q) or np.ndim(k):
        q, k = np.broadcast_arrays(np.asarray(q, float), np.asarray(k, float))
        return np.array([chisq_isf(qi, ki, tol) for qi, ki in zip(q.ravel(), k.ravel())]).reshape(q.shape)
    q, k = float(q), float(_check_df(k))
    if not 0.0 < q < 1.0:
        raise DomainError(f"probability must lie in (0, 1), got {q}")
    hi = _chisq_bracket(k, lambda v: chisq_sf(v, k) <= q)
    # relative tolerance keeps tiny tail probabilities meaningful
    return _invert_monotone(
        lambda v: chisq_sf(v, k),
        lambda v: -chisq_pdf(v, k),
        q,
        0.0,
        hi,
        min(tol, q * 1e-10),
        increasing=False,
    )


def poisson_truncation(mean, tail=POISSON_TAIL):
    """Smallest ``J`` with ``P(N > J) < tail`` for ``N ~ Poisson(mean)``."""
    mean = float(mean)
    if mean <= 0:
        return 0
    j = int(mean + 10.0 * math.sqrt(mean) + 20)
    while special.gammainc(j + 1, mean) >= tail:
        j = int(j * 1.5) + 1
    # walk back to the tightest index
    while j > 0 and special.gammainc(j, mean) < tail:
        j -= 1
    return j


def _poisson_mixture(x, k, lam, terms):
    """Sum_j Poi(j; lam/2) * terms(x, k + 2j), Poisson tail mass below 1e-12.

    The index range is widened for large ``x`` so tail densities keep their
    relative accuracy.
    """
    x = _check_x(x)
    k = _check_df(k)
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0) or np.any(np.isnan(lam)):
        raise DomainError("non-centrality must be >= 0")
    x, k, lam = np.broadcast_arrays(x, k, lam)
    mu = lam / 2.0
    mu_max = float(mu.max()) if mu.size else 0.0
    jmax = poisson_truncation(mu_max)
    if mu_max > 0:
        # far in the right tail the terms peak near j = sqrt(mu x / 2), beyond
        # the Poisson bulk; extend so the sum keeps its relative accuracy
        peak = math.sqrt(mu_max * float(x.max()) / 2.0)
        jmax = max(jmax, int(peak + 10.0 * math.sqrt(peak + 1.0) + 30))
    j = np.arange(jmax + 1, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        logw = -mu[..., None] + j * np.log(mu[..., None]) - special.gammaln(j + 1)
    # lam == 0 rows: the j = 0 weight is exactly one, everything else zero
    logw = np.where(mu[..., None] == 0, np.where(j == 0, 0.0, -np.inf), logw)
    vals = terms(x[..., None], k[..., None] + 2.0 * j)
    return _out(np.sum(np.exp(logw) * vals, axis=-1))


def noncentral_chisq_pdf(x, k, lam):
    """Noncentral chi-squared density as a Poisson mixture of central ones."""

    def dens(xx, kk):
        h = kk / 2.0
        with np.errstate(divide="ignore", invalid="ignore"):
            lp = (h - 1.0) * np.log(xx) - xx / 2.0 - h * math.log(2.0) - special.gammaln(h)
        return np.exp(lp)

    return _poisson_mixture(x, k, lam, dens)


def noncentral_chisq_cdf(x, k, lam):
    """Noncentral chi-squared CDF ``sum_j Poi(j; lam/2) P((k+2j)/2, x/2)``.

    Reduces exactly to :func:`chisq_cdf` when ``lam == 0``.
    """
    return _poisson_mixture(x, k, lam, lambda xx, kk: special.gammainc(kk / 2.0, xx / 2.0))


def noncentral_chisq_sf(x, k, lam):
    return _poisson_mixture(x, k, lam, lambda xx, kk: special.gammaincc(kk / 2.0, xx / 2.0))


def norm_pdf(z):
    z = np.asarray(z, dtype=float)
    return _out(np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi))


def norm_cdf(z):
    return _out(special.ndtr(np.asarray(z, dtype=float)))


def norm_sf(z):
    return _out(special.ndtr(-np.asarray(z, dtype=float)))


def _check_prob(p):
    p = np.asarray(p, dtype=float)
    if np.any(~((p > 0) & (p < 1))):
        raise DomainError("probability must lie strictly inside (0, 1)")
    return p


def norm_quantile(p):
    """Standard normal quantile ``Phi^{-1}(p)`` for ``0 < p < 1``."""
    return _out(special.ndtri(_check_prob(p)))


def norm_isf(q):
    """``Phi^{-1}(1 - q)`` without forming ``1 - q`` (tail-accurate)."""
    return _out(-special.ndtri(_check_prob(q)))
