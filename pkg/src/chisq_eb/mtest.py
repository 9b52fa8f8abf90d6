"""Multiple testing: p-values, Benjamini-Hochberg selection, FDR bookkeeping,
posterior significance and posterior dominance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DataError, DomainError, MissingTruthError
from .specfun import chisq_sf, norm_quantile

__all__ = [
    "Battery",
    "BhResult",
    "p_values",
    "bh_select",
    "empirical_fdr",
    "posterior_significance",
    "dominates",
    "interval_dominates",
    "dominance_sweep",
]


@dataclass(frozen=True)
class Battery:
    """A collection of chi-squared statistics with optional simulation truth.

    Attributes
    ----------
    ids : tuple of str
        Unique case identifiers.
    x : ndarray
        Statistics, all ``> 0``.
    k : ndarray
        Null degrees of freedom per case.
    is_null, lam : ndarray or None
        Truth labels, available for simulated batteries.
    """

    ids: tuple
    x: np.ndarray
    k: np.ndarray
    is_null: np.ndarray | None = None
    lam: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.ids)
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        x = np.asarray(self.x, dtype=float).ravel()
        k = np.broadcast_to(np.asarray(self.k, dtype=float), x.shape).copy()
        if x.size != n:
            raise DataError("ids and x must have the same length")
        if len(set(self.ids)) != n:
            raise DataError("case ids must be unique")
        if np.any(~np.isfinite(x)) or np.any(x <= 0):
            raise DomainError("statistics must be finite and > 0")
        if np.any(k <= 0):
            raise DomainError("degrees of freedom must be > 0")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "k", k)
        if self.is_null is not None:
            object.__setattr__(self, "is_null", np.asarray(self.is_null, dtype=bool).ravel())
        if self.lam is not None:
            object.__setattr__(self, "lam", np.asarray(self.lam, dtype=float).ravel())

    def __len__(self):
        return len(self.ids)

    @property
    def has_truth(self):
        return self.is_null is not None

    @classmethod
    def from_arrays(cls, x, k, is_null=None, lam=None, prefix="case"):
        x = np.asarray(x, dtype=float).ravel()
        ids = tuple(f"{prefix}{i}" for i in range(x.size))
        return cls(ids, x, k, is_null, lam)


@dataclass(frozen=True)
class BhResult:
    """Outcome of the BH step-up rule.

    ``rejected`` holds the indices of the rejected cases in input order;
    ``cutoff_x`` is the smallest rejected statistic (``nan`` if none or no
    statistics were given).
    """

    alpha: float
    rejected: np.ndarray
    threshold: float
    cutoff_x: float
    m: int

    @property
    def count(self):
        return int(self.rejected.size)

    def mask(self):
        out = np.zeros(self.m, dtype=bool)
        out[self.rejected] = True
        return out


def p_values(b):
    """Upper-tail central chi-squared p-values ``1 - F_k(x)``."""
    x = b.x if isinstance(b, Battery) else np.asarray(b[0], dtype=float)
    k = b.k if isinstance(b, Battery) else b[1]
    return np.atleast_1d(chisq_sf(x, k))


def bh_select(p, alpha=0.1, x=None):
    """Benjamini-Hochberg step-up selection.

    Rejects every ``p_i <= p_(i*)`` where ``i*`` is the largest rank with
    ``p_(i) <= i alpha / m``; ties at the threshold are all rejected.

    Parameters
    ----------
    p : array_like
        p-values.
    alpha : float
        Target FDR level in ``(0, 1)``.
    x : array_like, optional
        Statistics aligned with ``p``, used to report ``cutoff_x``.
    """
    if not 0.0 < alpha < 1.0:
        raise DomainError("alpha must lie in (0, 1)")
    p = np.asarray(p, dtype=float).ravel()
    m = p.size
    if m == 0:
        return BhResult(alpha, np.array([], dtype=int), 0.0, float("nan"), 0)
    ps = np.sort(p)
    ok = np.nonzero(ps <= alpha * np.arange(1, m + 1) / m)[0]
    if ok.size == 0:
        return BhResult(alpha, np.array([], dtype=int), 0.0, float("nan"), m)
    thr = ps[ok[-1]]
    rej = np.nonzero(p <= thr)[0]
    cutoff = float(np.min(np.asarray(x, dtype=float)[rej])) if x is not None else float("nan")
    return BhResult(alpha, rej, float(thr), cutoff, m)


def empirical_fdr(result, truth):
    """``(false rejections / max(1, rejections), non-null rejections)``.

    ``truth`` is a boolean array marking null cases, or a :class:`Battery`
    carrying ``is_null``.
    """
    if isinstance(truth, Battery):
        truth = truth.is_null
    if truth is None:
        raise MissingTruthError("empirical FDR needs null/non-null labels")
    is_null = np.asarray(truth, dtype=bool).ravel()
    if is_null.size != result.m:
        raise DataError("truth labels do not match the number of tests")
    false = int(np.sum(is_null[result.rejected]))
    return false / max(1, result.count), result.count - false


def _z(alpha):
    return norm_quantile(1.0 - alpha / 2.0)


def posterior_significance(mean, k, alpha=0.1):
    """True iff ``mean / k >= z_{1 - alpha/2}^2`` (vectorized)."""
    out = np.asarray(mean, dtype=float) / np.asarray(k, dtype=float) >= _z(alpha) ** 2
    return bool(out) if out.ndim == 0 else out


def dominates(mean_a, mean_b, var_b, alpha=0.1):
    """True iff ``mean_a >= mean_b + z sqrt(var_b)``."""
    if np.any(np.asarray(var_b) < 0):
        raise DomainError("variance must be >= 0")
    out = np.asarray(mean_a, dtype=float) >= mean_b + _z(alpha) * np.sqrt(var_b)
    return bool(out) if out.ndim == 0 else out


def interval_dominates(mean_a, var_a, mean_b, var_b, alpha=0.1):
    """True iff the lower end of interval a is at or above the upper end of b."""
    if np.any(np.asarray(var_a) < 0) or np.any(np.asarray(var_b) < 0):
        raise DomainError("variance must be >= 0")
    z = _z(alpha)
    out = np.asarray(mean_a, dtype=float) - z * np.sqrt(var_a) >= mean_b + z * np.sqrt(var_b)
    return bool(out) if out.ndim == 0 else out


def dominance_sweep(means, variances, alpha=0.1, reference=None):
    """Pairwise dominance of every case against a reference set.

    Returns
    -------
    (dom, idom) : tuple of ndarray
        Boolean ``(n, r)`` matrices; ``dom[i, j]`` says case ``i`` dominates
        reference case ``j`` and ``idom`` is the interval version.  Self
        comparisons are ``False``.  ``reference`` defaults to all cases.
    """
    m = np.asarray(means, dtype=float).ravel()
    v = np.asarray(variances, dtype=float).ravel()
    ref = np.arange(m.size) if reference is None else np.asarray(reference, dtype=int)
    dom = dominates(m[:, None], m[None, ref], v[None, ref], alpha)
    idom = interval_dominates(m[:, None], v[:, None], m[None, ref], v[None, ref], alpha)
    dom = np.atleast_2d(dom)
    idom = np.atleast_2d(idom)
    same = np.arange(m.size)[:, None] == ref[None, :]
    dom[same] = False
    idom[same] = False
    return dom, idom
