"""Tweedie-type formulas for the non-centrality parameter of chi-squared data.

Every posterior quantity is a function of ``x``, ``k`` and the derivatives of
the marginal log-density ``l_k``; the derivatives come from a
:class:`~chisq_eb.gradest.GradientModel`.  The ratios

    R2 = g_{k-2}/g_k,  R4 = g_{k-4}/g_k,  R6 = g_{k-6}/g_k,  R8 = g_{k-8}/g_k

are rebuilt from the derivatives, so degrees of freedom ``k <= 8`` never
touch a formal density at non-positive df.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import AllNullError, DomainError
from .gradest import POSITIVITY_FLOOR
from .specfun import chisq_pdf, norm_quantile

__all__ = [
    "EffectDofEstimates",
    "PosteriorMoments",
    "PosteriorSummary",
    "naive_effect_dof",
    "density_ratios",
    "posterior_moments",
    "posterior_effect_dof",
    "posterior_mean",
    "posterior_mean_two_layer",
    "second_factorial_moment",
    "posterior_variance",
    "local_fdr",
    "adjust_for_null",
    "posterior_interval",
    "estimate_pi0",
    "summarize",
]

R4_FLOOR = 1e-6


@dataclass(frozen=True)
class EffectDofEstimates:
    ml_style: float
    moment_style: float
    tweedie: float | None = None


def naive_effect_dof(x, k):
    """Soft-thresholded estimates ``(x - k + 4)_+`` and ``(x - k + 2)_+``."""
    if np.any(np.asarray(x) <= 0):
        raise DomainError("x must be > 0")
    ml = np.maximum(np.asarray(x, dtype=float) - k + 4.0, 0.0)
    mom = np.maximum(np.asarray(x, dtype=float) - k + 2.0, 0.0)
    if np.ndim(x) == 0:
        return EffectDofEstimates(float(ml), float(mom))
    return EffectDofEstimates(ml, mom)


def density_ratios(grads, floor=POSITIVITY_FLOOR):
    """``(R2, R4, R6, R8, floored_mask)`` from log-density derivatives.

    ``R2 = 1 + 2 l'`` is a ratio of proper densities and is floored at
    ``floor``; the mask marks floored points.  ``R4 .. R8`` are left alone
    because for ``k < 8`` they involve formal marginals and may be negative.
    """
    d1, d2, d3, d4 = grads.d1, grads.d2, grads.d3, grads.d4
    R2 = 1.0 + 2.0 * d1
    floored = R2 < floor
    R2 = np.where(floored, floor, R2)
    R4 = 4.0 * d2 + R2**2
    R6 = 8.0 * d3 + 12.0 * d2 * R2 + R2**3
    R8 = 16.0 * d4 + 32.0 * d3 * R2 + 24.0 * d2 * R2**2 + 48.0 * d2**2 + R2**4
    return R2, R4, R6, R8, floored


@dataclass(frozen=True)
class PosteriorMoments:
    """Vectorized posterior summaries before interval construction."""

    x: np.ndarray
    k: float
    effect_dof: np.ndarray  # E_{k-2}(2J | x)
    mean: np.ndarray
    mean_two_layer: np.ndarray
    factorial2: np.ndarray  # E_{k-4}[4J(J-1) | x]
    variance: np.ndarray
    clamped_mean: np.ndarray
    clamped_variance: np.ndarray
    clamped_factorial: np.ndarray
    floored: np.ndarray
    extrapolated: np.ndarray


def posterior_moments(g, x, k, floor=POSITIVITY_FLOOR):
    """Posterior mean and variance of ``lambda`` for each ``x``.

    Mean: ``[(x - k + 4) + 2x (2 l''/(1 + 2l') + l')] (1 + 2l')``.
    Variance: ``4 M2 l'' + (M2 - M1^2)(1 + 2l')^2`` where ``M1`` is the
    posterior mean of ``2J`` at null df ``k - 2`` and ``M2`` the second
    factorial moment ``E[4J(J-1)]`` at null df ``k - 4``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(x <= 0):
        raise DomainError("x must be > 0")
    k = float(k)
    grads = g.evaluate(x)
    R2, R4, R6, R8, floored = density_ratios(grads, floor)
    d1 = (R2 - 1.0) / 2.0
    d2 = grads.d2
    m1 = 2.0 * x * (2.0 * d2 / R2 + d1) + (x - k + 4.0)
    mean_raw = m1 * R2
    two_layer = x * (R4 / R2) * R2 - (k - 4.0) * R2
    # E(lambda^2 | x) = E_{k-4}[4J(J-1) | x] * R4; no division by R4 needed
    second = x**2 * R8 - 2.0 * (k - 6.0) * x * R6 + (k - 4.0) * (k - 6.0) * R4
    tiny4 = np.abs(R4) < R4_FLOOR
    m2_raw = second / np.where(tiny4, np.where(R4 < 0, -R4_FLOOR, R4_FLOOR), R4)
    clamped_f = (m2_raw < 0) | tiny4
    # 4 M2 l'' + (M2 - M1^2) R2^2 == M2 R4 - (M1 R2)^2
    var_raw = second - mean_raw**2
    clamped_m = mean_raw < 0
    clamped_v = var_raw < 0
    return PosteriorMoments(
        x=x,
        k=k,
        effect_dof=m1,
        mean=np.maximum(mean_raw, 0.0),
        mean_two_layer=two_layer,
        factorial2=np.maximum(m2_raw, 0.0),
        variance=np.maximum(var_raw, 0.0),
        clamped_mean=clamped_m,
        clamped_variance=clamped_v,
        clamped_factorial=clamped_f,
        floored=floored,
        extrapolated=np.asarray(grads.extrapolated, dtype=bool),
    )


def _pick(v, x):
    return float(v[0]) if np.ndim(x) == 0 else v


def posterior_effect_dof(g, x, k):
    """``E_{k-2}(2J | x) = 2x [2 l''/(1 + 2 l') + l'] + (x - k + 4)``."""
    return _pick(posterior_moments(g, x, k).effect_dof, x)


def posterior_mean(g, x, k):
    """Selection-bias-corrected posterior mean ``E_k(lambda | x)``, clamped at 0."""
    return _pick(posterior_moments(g, x, k).mean, x)


def posterior_mean_two_layer(g, x, k):
    """Two-layer form ``x (1 + 2l'_{k-2})(1 + 2l'_k) - (k - 4)(1 + 2l'_k)`` (unclamped)."""
    return _pick(posterior_moments(g, x, k).mean_two_layer, x)


def second_factorial_moment(g, x, k):
    """``E_{k-4}[4J(J-1) | x] = x^2 R8/R4 - 2(k-6) x R6/R4 + (k-4)(k-6)``, clamped at 0."""
    return _pick(posterior_moments(g, x, k).factorial2, x)


def posterior_variance(g, x, k):
    return _pick(posterior_moments(g, x, k).variance, x)


def local_fdr(x, k, pi0, g_k_at_x):
    """``pi0 f_k(x) / g_k(x)`` clipped to ``[0, 1]``."""
    g_k_at_x = np.asarray(g_k_at_x, dtype=float)
    if np.any(g_k_at_x <= 0):
        raise DomainError("marginal density must be > 0")
    if not 0.0 <= pi0 <= 1.0:
        raise DomainError("pi0 must lie in [0, 1]")
    if np.any(np.asarray(x) <= 0):
        raise DomainError("x must be > 0")
    if pi0 == 0:
        out = np.zeros(np.broadcast(np.asarray(x), g_k_at_x).shape)
    else:
        out = np.clip(pi0 * chisq_pdf(x, k) / g_k_at_x, 0.0, 1.0)
    return float(out) if np.ndim(out) == 0 else out


def adjust_for_null(mean, variance, fdr):
    """Condition the posterior moments on the case being non-null.

    ``E1 = E / (1 - fdr)`` and ``var1 = var / (1 - fdr) - fdr * E1^2``
    (variance clamped at 0).

    Raises
    ------
    AllNullError
        If any ``fdr >= 1 - 1e-12``.
    """
    fdr = np.asarray(fdr, dtype=float)
    if np.any(fdr >= 1.0 - 1e-12):
        raise AllNullError("local fdr is one; the non-null posterior is undefined")
    e1 = np.asarray(mean, dtype=float) / (1.0 - fdr)
    v1 = np.maximum(np.asarray(variance, dtype=float) / (1.0 - fdr) - fdr * e1**2, 0.0)
    if np.ndim(e1) == 0:
        return float(e1), float(v1)
    return e1, v1


def posterior_interval(mean, variance, level=0.9):
    """``mean -/+ z_{(1+level)/2} sqrt(variance)`` with the lower end clamped at 0.

    The default ``level=0.9`` gives the ``+/- 1.645 sd`` band.
    """
    variance = np.asarray(variance, dtype=float)
    if np.any(variance < 0):
        raise DomainError("variance must be >= 0")
    z = norm_quantile(0.5 * (1.0 + level))
    half = z * np.sqrt(variance)
    lo = np.maximum(np.asarray(mean, dtype=float) - half, 0.0)
    hi = np.asarray(mean, dtype=float) + half
    if np.ndim(lo) == 0:
        return float(lo), float(hi)
    return lo, hi


def estimate_pi0(p_values):
    """Plug-in null proportion: twice the fraction of p-values above 1/2, capped at 1."""
    p = np.asarray(p_values, dtype=float)
    if p.size == 0:
        return 1.0
    return float(min(1.0, 2.0 * np.mean(p > 0.5)))


@dataclass(frozen=True)
class PosteriorSummary:
    x: float
    k: float
    mean: float
    variance: float
    interval_lo: float
    interval_hi: float
    fdr: float | None = None
    fdr_source: str | None = None
    flags: frozenset = field(default_factory=frozenset)

    @property
    def sd(self):
        return float(np.sqrt(self.variance))


def summarize(g, x, k, level=0.9, pi0=None, density=None, fdr_source=None):
    """Full per-case posterior summaries, in input order.

    With ``pi0`` the moments are conditioned on the case being non-null using
    the local fdr; ``density`` (callable) supplies ``g_k`` and defaults to
    ``g.density`` when the gradient model carries one.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mom = posterior_moments(g, x, k)
    mean, var = mom.mean, mom.variance
    fdr = None
    fdr_one = np.zeros(x.size, dtype=bool)
    if pi0 is not None and pi0 > 0:
        if density is None:
            density = getattr(g, "density", None)
            fdr_source = fdr_source or g.method
        if density is None:
            raise DomainError("local fdr needs a marginal density (exact model or Lindsey fit)")
        gk = np.maximum(np.asarray(density(x), dtype=float), np.finfo(float).tiny)
        fdr = np.atleast_1d(local_fdr(x, k, pi0, gk))
        fdr_one = fdr >= 1.0 - 1e-12
        safe = np.where(fdr_one, 0.0, fdr)
        e1, v1 = adjust_for_null(mean, var, safe)
        mean = np.where(fdr_one, mean, e1)
        var = np.where(fdr_one, var, v1)
    elif pi0 is not None:
        fdr = np.zeros(x.size)
        fdr_source = fdr_source or "pi0=0"
    lo, hi = posterior_interval(mean, var, level)
    lo, hi = np.atleast_1d(lo), np.atleast_1d(hi)
    out = []
    for i in range(x.size):
        flags = set()
        if mom.clamped_mean[i]:
            flags.add("clamped_mean")
        if mom.clamped_variance[i] or mom.clamped_factorial[i]:
            flags.add("clamped_variance")
        if mom.extrapolated[i]:
            flags.add("extrapolated_gradient")
        if mom.floored[i]:
            flags.add("floored_ratio")
        if fdr_one[i]:
            flags.add("fdr_one")
        out.append(
            PosteriorSummary(
                x=float(x[i]),
                k=float(k),
                mean=float(mean[i]),
                variance=float(var[i]),
                interval_lo=float(lo[i]),
                interval_hi=float(hi[i]),
                fdr=None if fdr is None else float(fdr[i]),
                fdr_source=fdr_source if fdr is not None else None,
                flags=frozenset(flags),
            )
        )
    return out
