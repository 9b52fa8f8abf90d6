"""Estimate derivatives of the marginal log-density from observed statistics.

Two estimators are provided:

* :func:`fit_score_matching` -- penalized least squares on a smooth B-spline
  basis, fitting the log-density gradient directly without ever estimating
  the density;
* :func:`fit_lindsey` -- Poisson regression of histogram counts on a
  polynomial (Lindsey's method), which yields the log density itself.

Both return a :class:`GradientModel`; the exact model of a known prior is
wrapped by :class:`ExactGradientModel` so every consumer sees one interface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.interpolate import BSpline

from .exceptions import (
    ConfigError,
    ConvergenceError,
    DomainError,
    InsufficientDataError,
    SingularSystemError,
)

__all__ = [
    "FitConfig",
    "LogGradients",
    "GradientModel",
    "ExactGradientModel",
    "SplineScoreModel",
    "LindseyModel",
    "fit_score_matching",
    "fit_lindsey",
    "fit_gradients",
    "gradients_at",
    "gradient_model_from_dict",
]

SPLINE_DEGREE = 5
POSITIVITY_FLOOR = 1e-3


@dataclass(frozen=True)
class FitConfig:
    """Settings shared by the gradient estimators.

    ``basis_size`` is the number of B-spline functions for score matching and
    the polynomial degree for Lindsey's method.  ``penalty=None`` selects the
    ridge weight by cross-validation over ``penalty_grid``; ``cv_rule="one-se"``
    treats scores within one standard error of the best as ties, which go to
    the larger penalty.
    """

    basis_size: int = 12
    penalty: float | None = None
    folds: int = 5
    quantiles: tuple = (0.005, 0.995)
    method: str = "score-matching"
    seed: int = 0
    penalty_grid: tuple = tuple(np.logspace(-6, 1, 10).tolist())
    bins: int = 120
    floor: float = POSITIVITY_FLOOR
    cv_rule: str = "min"

    def __post_init__(self):
        if self.basis_size < 4:
            raise ConfigError("basis_size must be >= 4 to carry four derivatives")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.penalty is not None and self.penalty < 0:
            raise ConfigError("penalty must be >= 0")
        lo, hi = self.quantiles
        if not 0.0 <= lo < hi <= 1.0:
            raise ConfigError("quantiles must satisfy 0 <= lo < hi <= 1")
        if self.cv_rule not in ("one-se", "min"):
            raise ConfigError(f"unknown cv_rule {self.cv_rule!r}")
        if self.method not in ("score-matching", "lindsey"):
            raise ConfigError(f"unknown gradient method {self.method!r}")


@dataclass(frozen=True)
class LogGradients:
    """``l'``, ``l''``, ``l'''``, ``l''''`` at a batch of points."""

    d1: np.ndarray
    d2: np.ndarray
    d3: np.ndarray
    d4: np.ndarray
    extrapolated: np.ndarray

    def order(self, r):
        return (self.d1, self.d2, self.d3, self.d4)[r - 1]


class GradientModel:
    """Evaluator of the first four derivatives of a marginal log-density.

    Inside ``interval`` the fitted (or exact) derivatives are returned.  Outside
    it ``l'`` is continued linearly from the nearest endpoint, ``l''`` is held
    constant and the higher derivatives are zero; such points are flagged.
    """

    method = "abstract"

    def __init__(self, interval):
        a, b = float(interval[0]), float(interval[1])
        if not a < b:
            raise DomainError("gradient interval must have a < b")
        self.interval = (a, b)

    def _derivs(self, x):
        raise NotImplementedError

    def extrapolated(self, x):
        x = np.asarray(x, dtype=float)
        a, b = self.interval
        return (x < a) | (x > b)

    def evaluate(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if np.any(x <= 0) and self.method != "lindsey-real":
            raise DomainError("gradients are defined for x > 0")
        a, b = self.interval
        out = np.empty((4, x.size))
        ext = self.extrapolated(x)
        inside = ~ext
        if np.any(inside):
            out[:, inside] = self._derivs(x[inside])
        for edge, mask in ((a, x < a), (b, x > b)):
            if np.any(mask):
                e = self._derivs(np.array([edge]))[:, 0]
                out[0, mask] = e[0] + e[1] * (x[mask] - edge)
                out[1, mask] = e[1]
                out[2, mask] = 0.0
                out[3, mask] = 0.0
        return LogGradients(out[0], out[1], out[2], out[3], ext)

    def to_dict(self):
        raise NotImplementedError


def gradients_at(model, x, order):
    """``l^{(order)}(x)`` for ``order`` in 1..4 (scalar or array ``x``).

    Use ``model.extrapolated(x)`` to see which values came from the
    extrapolation rule.
    """
    if order not in (1, 2, 3, 4):
        raise DomainError("order must be 1, 2, 3 or 4")
    v = model.evaluate(x).order(order)
    return float(v[0]) if np.ndim(x) == 0 else v


class ExactGradientModel(GradientModel):
    """Exact derivatives of ``log g_k`` for a known prior (oracle mode)."""

    method = "exact"

    def __init__(self, marginal):
        super().__init__((0.0, math.inf))
        self.marginal = marginal
        self.k = marginal.k

    def extrapolated(self, x):
        return np.zeros(np.shape(x), dtype=bool)

    def _derivs(self, x):
        from .model import ratios_to_log_derivatives

        return ratios_to_log_derivatives(self.marginal.density_ratios(x))

    def density(self, x):
        from .model import marginal_density

        return marginal_density(self.marginal, x)

    def to_dict(self):
        return {"method": "exact", "k": self.k, "prior": self.marginal.prior.to_dict()}


# ---------------------------------------------------------------------------
# score matching
# ---------------------------------------------------------------------------


def _leibniz_over_x(s_derivs, x, r):
    """r-th derivative of ``s(x) / x`` given ``s, s', ..., s^{(r)}``."""
    total = 0.0
    for i in range(r + 1):
        m = r - i
        inv = (-1) ** m * math.factorial(m) / x ** (m + 1)
        total = total + math.comb(r, i) * s_derivs[i] * inv
    return total


class SplineScoreModel(GradientModel):
    """``l'(x) = s(x) / x`` with ``s = c0 + c1 x + sum_b theta_b B_b(x)``.

    The B-splines have degree five with clamped knots spanning the data and
    interior knots uniform in ``log x``, so ``l'`` has four continuous
    derivatives.  Only the spline coefficients are penalized: the linear part
    gives the ``c0 / x + c1`` score of a central chi-squared log-density.
    """

    method = "score-matching"

    def __init__(self, interval, knots, coef, penalty=None, cv_scores=None):
        super().__init__(interval)
        self.knots = np.asarray(knots, dtype=float)
        self.coef = np.asarray(coef, dtype=float)
        self.penalty = penalty
        self.cv_scores = cv_scores
        nb = self.knots.size - SPLINE_DEGREE - 1
        if self.coef.size != nb + 2:
            raise DomainError("coefficient count does not match the knot vector")
        self._spline = BSpline(self.knots, self.coef[2:], SPLINE_DEGREE, extrapolate=False)
        self._spline_d = [self._spline.derivative(nu) for nu in (1, 2, 3)]

    def s_derivs(self, x, upto=3):
        x = np.asarray(x, dtype=float)
        c0, c1 = self.coef[0], self.coef[1]
        out = [np.nan_to_num(self._spline(x)) + c0 + c1 * x]
        for nu in range(1, upto + 1):
            v = np.nan_to_num(self._spline_d[nu - 1](x))
            out.append(v + (c1 if nu == 1 else 0.0))
        return out

    def _derivs(self, x):
        s = self.s_derivs(x)
        return np.stack([_leibniz_over_x(s, x, r) for r in range(4)])

    def to_dict(self):
        return {
            "method": self.method,
            "interval": list(self.interval),
            "degree": SPLINE_DEGREE,
            "knots": self.knots.tolist(),
            "coefficients": self.coef.tolist(),
            "penalty": self.penalty,
        }


def _knot_vector(lo, hi, nbasis):
    """Clamped degree-5 knots with interior knots uniform in ``log x``."""
    nint = nbasis - SPLINE_DEGREE - 1
    inner = np.exp(np.linspace(math.log(lo), math.log(hi), nint + 2))[1:-1]
    return np.concatenate([np.full(SPLINE_DEGREE + 1, lo), inner, np.full(SPLINE_DEGREE + 1, hi)])


def _design(x, knots):
    """Basis values and x-derivatives: columns ``[1, x, B_1..B_nb]``."""
    nb = knots.size - SPLINE_DEGREE - 1
    spl = BSpline(knots, np.eye(nb), SPLINE_DEGREE, extrapolate=False)
    phi = np.nan_to_num(spl(x))
    dphi = np.nan_to_num(spl.derivative(1)(x))
    n = x.size
    P = np.column_stack([np.ones(n), x, phi])
    dP = np.column_stack([np.zeros(n), np.ones(n), dphi])
    return P, dP


def _sm_stats(x, knots):
    """Per-observation pieces of the weighted score-matching objective.

    For ``s = x l'`` the x^2-weighted objective is
    ``E[s^2 / 2 + s + x s']``; with ``s = P theta`` this is
    ``theta' G theta / 2 + h' theta`` with ``G = E[P P']`` and
    ``h = E[P + x P']``.
    """
    P, dP = _design(x, knots)
    return P, P + x[:, None] * dP


def _penalized_system(G, rho):
    # the linear part of s (the central chi-squared family) is not penalized
    pen = np.ones(G.shape[0])
    pen[:2] = 0.0
    return G + 2.0 * rho * np.diag(pen)


def _solve_ridge(G, h, rho):
    A = _penalized_system(G, rho)
    try:
        theta = -np.linalg.solve(A, h)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError("score-matching system is singular") from exc
    if not np.all(np.isfinite(theta)) or np.linalg.cond(A) > 1e15:
        raise SingularSystemError("score-matching system is numerically singular")
    return theta


def _objective(theta, P, H):
    s = P @ theta
    return float(np.mean(0.5 * s * s + H @ theta))


def _cross_validate(P, H, cfg):
    n = P.shape[0]
    rng = np.random.default_rng(cfg.seed)
    fold = rng.permutation(n) % cfg.folds
    stats = []
    for f in range(cfg.folds):
        m = fold == f
        stats.append((P[m].T @ P[m], H[m].sum(axis=0), int(m.sum())))
    GT = sum(s[0] for s in stats)
    hT = sum(s[1] for s in stats)
    scores, spread = [], []
    for rho in cfg.penalty_grid:
        per_fold, ok = [], True
        for f in range(cfg.folds):
            G_f, h_f, n_f = stats[f]
            n_tr = n - n_f
            try:
                theta = _solve_ridge((GT - G_f) / n_tr, (hT - h_f) / n_tr, rho)
            except SingularSystemError:
                ok = False
                break
            m = fold == f
            per_fold.append(_objective(theta, P[m], H[m]))
        if ok:
            w = np.array([s[2] for s in stats]) / n
            scores.append(float(np.dot(w, per_fold)))
            spread.append(float(np.std(per_fold, ddof=1) / math.sqrt(cfg.folds)))
        else:
            scores.append(math.inf)
            spread.append(0.0)
    scores = np.array(scores)
    if not np.any(np.isfinite(scores)):
        raise SingularSystemError("score-matching system singular at every penalty")
    i_best = int(np.argmin(scores))
    # scores within one standard error of the best count as ties; ties go
    # to the larger (smoother) penalty
    tol = scores[i_best] + (spread[i_best] if cfg.cv_rule == "one-se" else 0.0)
    idx = max(i for i, s in enumerate(scores) if s <= tol)
    return cfg.penalty_grid[idx], scores


def _enforce_floor(model, G, h, cfg, grid):
    """Project the fit so that ``1 + 2 l' >= floor`` on ``grid``.

    The penalized objective is minimized again subject to the linear
    constraints ``l'(x_g) >= (floor - 1) / 2``; the result is the feasible
    fit closest to the unconstrained one in the objective's own metric.
    """
    lower = (cfg.floor - 1.0) / 2.0
    psi = model.s_derivs(grid, 0)[0] / grid
    if np.all(psi >= lower):
        return model
    A = _penalized_system(G, model.penalty)
    C = _design(grid, model.knots)[0] / grid[:, None]
    # a small cushion keeps the constraint satisfied after rounding
    d = np.full(grid.size, lower + 1e-6)
    res = optimize.minimize(
        lambda t: 0.5 * t @ A @ t + h @ t,
        model.coef,
        jac=lambda t: A @ t + h,
        constraints=[{"type": "ineq", "fun": lambda t: C @ t - d, "jac": lambda t: C}],
        method="SLSQP",
        options={"maxiter": 500, "ftol": 1e-12},
    )
    coef = res.x
    if not np.all(np.isfinite(coef)) or np.min(C @ coef) < lower:
        raise ConvergenceError(f"could not enforce the 1 + 2 l' floor: {res.message}")
    return SplineScoreModel(model.interval, model.knots, coef, model.penalty, model.cv_scores)


def fit_score_matching(data, cfg=None):
    """Fit ``l'_k`` by penalized least-squares score matching.

    Parameters
    ----------
    data : array_like
        Observed statistics, all ``> 0``.
    cfg : FitConfig, optional
        ``basis_size`` B-splines (degree 5, so at least 6) spanning all the
        data.  The model is evaluated on the interval between the
        ``quantiles`` of the data and extrapolated outside it.

    Returns
    -------
    SplineScoreModel
        With ``1 + 2 l'(x) >= cfg.floor`` on a dense grid of the interval.

    Raises
    ------
    InsufficientDataError
        With fewer than ``10 * basis_size`` observations.
    SingularSystemError
        If the ridge system is singular for every penalty candidate.
    """
    cfg = cfg or FitConfig()
    x = np.asarray(data, dtype=float).ravel()
    if np.any(~np.isfinite(x)) or np.any(x <= 0):
        raise DomainError("score matching needs finite data > 0")
    if cfg.basis_size <= SPLINE_DEGREE:
        raise ConfigError(f"score matching needs basis_size >= {SPLINE_DEGREE + 1}")
    if x.size < 10 * cfg.basis_size:
        raise InsufficientDataError(
            f"need at least {10 * cfg.basis_size} observations, got {x.size}"
        )
    a, b = np.quantile(x, cfg.quantiles)
    if not b > a:
        raise SingularSystemError("data have no spread between the fitting quantiles")
    # the basis spans every observation so no basis function is data-free
    knots = _knot_vector(x.min() * (1 - 1e-9), x.max() * (1 + 1e-9), cfg.basis_size)
    P, H = _sm_stats(x, knots)
    if cfg.penalty is None:
        rho, scores = _cross_validate(P, H, cfg)
    else:
        rho, scores = cfg.penalty, None
    G, h = P.T @ P / x.size, H.mean(axis=0)
    theta = _solve_ridge(G, h, rho)
    model = SplineScoreModel((a, b), knots, theta, rho, scores)
    grid = np.exp(np.linspace(math.log(a), math.log(b), 400))
    return _enforce_floor(model, G, h, cfg, grid)


# ---------------------------------------------------------------------------
# Lindsey's method
# ---------------------------------------------------------------------------


class LindseyModel(GradientModel):
    """Polynomial log-density from Poisson regression on histogram counts.

    The derivatives of a fitted polynomial are analytic but noisy; this model
    is mainly useful for the density itself (e.g. local fdr denominators).
    """

    method = "lindsey"

    def __init__(self, interval, center, scale, coef, log_norm, real_line=False):
        super().__init__(interval)
        self.center, self.scale = float(center), float(scale)
        self.coef = np.asarray(coef, dtype=float)
        self.log_norm = float(log_norm)
        self.real_line = real_line
        if real_line:
            self.method = "lindsey-real"
        poly = np.polynomial.Legendre(self.coef)
        self._polys = [poly] + [poly.deriv(m) for m in range(1, 5)]

    def log_density(self, x):
        u = (np.asarray(x, dtype=float) - self.center) / self.scale
        return self._polys[0](u) - self.log_norm

    def density(self, x):
        return np.exp(self.log_density(x))

    def _derivs(self, x):
        u = (x - self.center) / self.scale
        return np.stack([self._polys[r](u) / self.scale**r for r in range(1, 5)])

    def to_dict(self):
        return {
            "method": "lindsey",
            "interval": list(self.interval),
            "center": self.center,
            "scale": self.scale,
            "coefficients": self.coef.tolist(),
            "log_norm": self.log_norm,
            "real_line": self.real_line,
        }


def _poisson_irls(D, y, maxiter=100, tol=1e-10):
    """Newton iterations for a log-link Poisson GLM."""
    beta = np.zeros(D.shape[1])
    beta[0] = math.log(max(y.mean(), 1e-300))
    for _ in range(maxiter):
        eta = np.clip(D @ beta, -700, 700)
        mu = np.exp(eta)
        grad = D.T @ (y - mu)
        hess = D.T @ (D * mu[:, None])
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError("Poisson regression information matrix is singular") from exc
        if not np.all(np.isfinite(step)):
            raise SingularSystemError("Poisson regression diverged")
        # damp huge steps; the log-likelihood is concave so this only slows things
        big = np.max(np.abs(step))
        if big > 10:
            step *= 10 / big
        beta = beta + step
        if big < tol * (1 + np.max(np.abs(beta))):
            return beta
    raise ConvergenceError(f"Poisson regression did not converge in {maxiter} iterations")


def _fit_lindsey_raw(x, cfg, real_line=False):
    lo, hi = float(x.min()), float(x.max())
    if not hi > lo:
        raise SingularSystemError("all observations are equal; histogram design is degenerate")
    edges = np.linspace(lo, hi, cfg.bins + 1)
    counts, _ = np.histogram(x, edges)
    mids = 0.5 * (edges[1:] + edges[:-1])
    center, scale = 0.5 * (lo + hi), 0.5 * (hi - lo)
    D = np.polynomial.legendre.legvander((mids - center) / scale, cfg.basis_size)
    beta = _poisson_irls(D, counts.astype(float))
    width = edges[1] - edges[0]
    log_norm = math.log(x.size * width)
    a, b = np.quantile(x, cfg.quantiles)
    if not b > a:
        raise SingularSystemError("data have no spread between the fitting quantiles")
    return LindseyModel((a, b), center, scale, beta, log_norm, real_line)


def fit_lindsey(data, cfg=None):
    """Lindsey's method: Poisson regression of bin counts on a degree-B polynomial.

    Raises
    ------
    InsufficientDataError
        With fewer than 200 observations.
    SingularSystemError, ConvergenceError
        For degenerate designs (e.g. all values equal) or failed Newton runs.
    """
    cfg = cfg or FitConfig(method="lindsey")
    x = np.asarray(data, dtype=float).ravel()
    if np.any(~np.isfinite(x)) or np.any(x <= 0):
        raise DomainError("Lindsey fit needs finite data > 0")
    if x.size < 200:
        raise InsufficientDataError(f"need at least 200 observations, got {x.size}")
    return _fit_lindsey_raw(x, cfg)


def fit_gradients(data, cfg=None):
    cfg = cfg or FitConfig()
    if cfg.method == "lindsey":
        return fit_lindsey(data, cfg)
    return fit_score_matching(data, cfg)


def gradient_model_from_dict(d):
    """Rebuild a model serialized with ``to_dict``."""
    try:
        method = d["method"]
        if method == "score-matching":
            return SplineScoreModel(d["interval"], d["knots"], d["coefficients"], d.get("penalty"))
        if method == "lindsey":
            return LindseyModel(
                d["interval"], d["center"], d["scale"], d["coefficients"],
                d["log_norm"], d.get("real_line", False),
            )
        if method == "exact":
            from .model import MarginalModel, prior_from_dict

            return ExactGradientModel(MarginalModel(prior_from_dict(d["prior"]), d["k"]))
    except (KeyError, TypeError) as exc:
        raise DomainError(f"malformed gradient model: {exc}") from exc
    raise DomainError(f"unknown gradient method {method!r}")
