"""Simulation harness: adjustment curves, coverage experiments under a known
model, and the XOR triplet-interaction variable-selection study."""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tweedie
from .baselines import NtModel, by_interval, nt_posterior_interval
from .exceptions import ConfigError, DomainError
from .gradest import FitConfig, fit_lindsey, fit_score_matching
from .model import (
    Gamma,
    MarginalModel,
    PointMassMixture,
    exact_log_gradients,
    log_concavity_diagnostic,
    marginal_density,
    sample,
)
from .mtest import bh_select, empirical_fdr, posterior_significance
from .specfun import chisq_sf

__all__ = [
    "XorConfig",
    "TripletResult",
    "ScanResult",
    "gen_xor",
    "q_statistic",
    "triplet_scan",
    "signal_triplets",
    "xor_study",
    "MethodCoverage",
    "CoverageReport",
    "coverage_experiment",
    "CurveTable",
    "curve_emit",
]

FIG_K = 7
FIG_PRIOR = Gamma(2.0, 10.0)
FIG5_CASES = 5000
FIG5_PI0 = 0.9


def _workers(threads):
    if threads is None:
        threads = os.cpu_count() or 1
    if threads < 1:
        raise ConfigError("threads must be >= 1")
    return threads


# ---------------------------------------------------------------------------
# XOR study
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class XorConfig:
    n: int = 300
    p: int = 100
    noise: float = 0.5
    seed: int = 0
    alpha: float = 0.1
    threads: int | None = None

    def __post_init__(self):
        if self.n < 8:
            raise ConfigError("n must be >= 8 so all eight cells can be reached")
        if self.p < 5:
            raise ConfigError("p must be >= 5 (five causal variables)")
        if self.noise < 0:
            raise ConfigError("noise sd must be >= 0")


def gen_xor(cfg):
    """Simulate ``(X_1..X_p, Y)`` as an ``n x (p + 1)`` array, response last.

    Columns ``0, 1`` form the XOR module and ``2, 3, 4`` the triplet XOR
    module; each row follows one of the two with probability 1/2.
    """
    rng = np.random.default_rng(cfg.seed)
    X = rng.integers(0, 2, size=(cfg.n, cfg.p))
    x1, x2, x3, x4, x5 = (X[:, i] for i in range(5))
    pair = x1 + x2 - 2 * x1 * x2
    trip = x3 + x4 + x5 - 2 * (x3 * x4 + x3 * x5 + x4 * x5) + 4 * x3 * x4 * x5
    coin = rng.random(cfg.n) < 0.5
    y = np.where(coin, pair, trip) + rng.normal(0.0, cfg.noise, cfg.n)
    return np.column_stack([X.astype(float), y])


def q_statistic(y, group_of):
    """``Q = sum_j n_j (ybar - ybar_j)^2 / s^2`` over the occupied cells.

    ``s^2`` is the sample variance of ``y`` (``ddof=1``).  Empty cells are
    dropped, so ``df`` is the number of occupied cells minus one.

    Raises
    ------
    DomainError
        With fewer than two occupied cells or zero sample variance.
    """
    y = np.asarray(y, dtype=float)
    g = np.asarray(group_of, dtype=int)
    if y.shape != g.shape:
        raise DomainError("y and group_of must have the same length")
    s2 = y.var(ddof=1) if y.size > 1 else 0.0
    if not s2 > 0:
        raise DomainError("response has zero sample variance")
    labels, inv = np.unique(g, return_inverse=True)
    if labels.size < 2:
        raise DomainError("need at least two occupied cells")
    cnt = np.bincount(inv)
    means = np.bincount(inv, weights=y) / cnt
    q = float(np.sum(cnt * (y.mean() - means) ** 2) / s2)
    return q, labels.size - 1


def _scan_rows(X, yc, s2, firsts):
    """Q and df for all triplets whose first index is in ``firsts``."""
    n, p = X.shape
    qs, dfs, trips = [], [], []
    for a in firsts:
        for b in range(a + 1, p - 1):
            cs = np.arange(b + 1, p)
            cell = (4 * X[:, a] + 2 * X[:, b])[:, None] + X[:, cs]
            off = (cell + 8 * np.arange(cs.size)[None, :]).ravel()
            cnt = np.bincount(off, minlength=8 * cs.size).reshape(cs.size, 8)
            sm = np.bincount(off, weights=np.repeat(yc, cs.size), minlength=8 * cs.size)
            sm = sm.reshape(cs.size, 8)
            # yc is centred, so sum_j n_j (ybar_j - ybar)^2 = sum_j S_j^2 / n_j
            q = np.sum(np.where(cnt > 0, sm**2 / np.maximum(cnt, 1), 0.0), axis=1) / s2
            qs.append(q)
            dfs.append(np.sum(cnt > 0, axis=1) - 1)
            trips.append(np.column_stack([np.full(cs.size, a), np.full(cs.size, b), cs]))
    if not qs:
        return np.empty(0), np.empty(0, dtype=int), np.empty((0, 3), dtype=int)
    return np.concatenate(qs), np.concatenate(dfs), np.concatenate(trips)


def _scan_task(args):
    return _scan_rows(*args)


def _all_q(X, y, threads):
    X = np.asarray(X, dtype=np.int64)
    y = np.asarray(y, dtype=float)
    s2 = y.var(ddof=1)
    if not s2 > 0:
        raise DomainError("response has zero sample variance")
    yc = y - y.mean()
    p = X.shape[1]
    firsts = list(range(p - 2))
    workers = min(_workers(threads), max(1, len(firsts)))
    if workers == 1:
        return _scan_rows(X, yc, s2, firsts)
    # interleave first indices so the chunks carry similar work
    chunks = [firsts[i::workers] for i in range(workers)]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        parts = list(ex.map(_scan_task, [(X, yc, s2, c) for c in chunks]))
    q = np.concatenate([r[0] for r in parts])
    df = np.concatenate([r[1] for r in parts])
    trips = np.concatenate([r[2] for r in parts])
    order = np.lexsort((trips[:, 2], trips[:, 1], trips[:, 0]))
    return q[order], df[order], trips[order]


@dataclass(frozen=True)
class TripletResult:
    triplet: tuple
    q: float
    df: int
    p_value: float
    selected: bool
    summary: tweedie.PosteriorSummary | None = None


@dataclass
class ScanResult:
    """All triplets of a scan, ordered by ``q`` descending then lexicographically."""

    triplets: np.ndarray
    q: np.ndarray
    df: np.ndarray
    p_values: np.ndarray
    selected: np.ndarray
    summaries: dict
    gradients: object = None
    bh_cutoff_q: float = float("nan")

    def __len__(self):
        return self.q.size

    def __getitem__(self, i):
        t = tuple(int(v) for v in self.triplets[i])
        return TripletResult(
            t, float(self.q[i]), int(self.df[i]), float(self.p_values[i]),
            bool(self.selected[i]), self.summaries.get(t),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def n_selected(self):
        return int(self.selected.sum())

    def rank_of(self, triplets):
        """0-based ranks of the given triplets."""
        pos = {tuple(int(v) for v in t): i for i, t in enumerate(self.triplets)}
        return np.array([pos[tuple(t)] for t in triplets])


def signal_triplets(p):
    """The 0-based triplets containing a complete causal module."""
    out = [(2, 3, 4)] + [(0, 1, l) for l in range(2, p)]
    return sorted(out)


def triplet_scan(data, cfg=None, fit=True, k=FIG_K, level=0.9):
    """Score every triplet of the ``p`` predictors by its ``Q`` statistic.

    Parameters
    ----------
    data : ndarray
        ``n x (p + 1)`` matrix from :func:`gen_xor` (response last).
    cfg : XorConfig, optional
        ``alpha`` for BH and ``threads`` for the scan.  ``threads=1`` runs
        the serial reference path; any other value gives identical output.
    fit : bool
        Fit score-matching gradients on all ``Q`` values and attach posterior
        summaries to the selected triplets.
    k : float
        Null degrees of freedom used for the posterior summaries.
    """
    cfg = cfg or XorConfig()
    data = np.asarray(data, dtype=float)
    X, y = data[:, :-1], data[:, -1]
    q, df, trips = _all_q(X, y, cfg.threads)
    pv = np.asarray(chisq_sf(q, np.maximum(df, 1)))
    pv = np.where(df < 1, 1.0, pv)
    order = np.lexsort((trips[:, 2], trips[:, 1], trips[:, 0], -q))
    q, df, trips, pv = q[order], df[order], trips[order], pv[order]
    bh = bh_select(pv, cfg.alpha, x=q)
    sel = bh.mask()
    summaries, grads = {}, None
    if fit and q.size >= 120:
        # the fit interval spans all data so the sparse signal tail is covered
        grads = fit_score_matching(q, FitConfig(quantiles=(0.0, 1.0), seed=cfg.seed))
        idx = np.nonzero(sel)[0]
        if idx.size:
            summ = tweedie.summarize(grads, q[idx], k, level)
            for i, s in zip(idx, summ):
                summaries[tuple(int(v) for v in trips[i])] = s
    return ScanResult(trips, q, df, pv, sel, summaries, grads, bh.cutoff_x)


def xor_study(cfg, alpha_sig=0.1):
    """One seed of the XOR study, reduced to the quantities tracked across seeds."""
    res = triplet_scan(gen_xor(cfg), cfg)
    sig = signal_triplets(cfg.p)
    ranks = res.rank_of(sig)
    top = bool(np.all(ranks < len(sig)))
    means = np.array([res.summaries[t].mean if t in res.summaries else np.nan for t in sig])
    n_sig = int(np.sum(posterior_significance(np.nan_to_num(means), FIG_K, alpha_sig)))
    return {
        "seed": cfg.seed,
        "n_triplets": len(res),
        "n_selected": res.n_selected,
        "bh_cutoff_q": res.bh_cutoff_q,
        "signal_in_top": top,
        "worst_signal_rank": int(ranks.max()),
        "signal_selected": int(np.sum(res.selected[ranks])),
        "signal_posterior_significant": n_sig,
    }


# ---------------------------------------------------------------------------
# coverage experiments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MethodCoverage:
    """Coverage of the true ``lambda`` by one method's intervals.

    ``covered / evaluated`` is the coverage among the cases the method is
    scored on (all cases for fig4; selected non-nulls for fig5).  ``fcr`` is
    ``1 - covered / selected``, counting selected nulls as misses;
    ``fcr_strict`` also credits nulls whose interval reaches zero.
    """

    method: str
    evaluated: int
    covered: int
    fcr: float | None = None
    fcr_strict: float | None = None
    flagged: int = 0

    @property
    def coverage(self):
        return self.covered / self.evaluated if self.evaluated else float("nan")


@dataclass
class CoverageReport:
    scenario: str
    seed: int
    reps: int
    methods: dict = field(default_factory=dict)
    selected: int | None = None
    non_null_selected: int | None = None
    cutoff: float | None = None
    empirical_fdr: float | None = None
    cases: dict = field(default_factory=dict)

    def to_dict(self):
        out = {k: v for k, v in asdict(self).items() if k not in ("methods", "cases")}
        out["methods"] = {
            name: {**asdict(m), "coverage": m.coverage} for name, m in self.methods.items()
        }
        return out


def _covers(lo, hi, lam):
    return (lo <= lam) & (lam <= hi)


def _proposed(g, x, k, pi0=None, density=None):
    summ = tweedie.summarize(g, x, k, 0.9, pi0=pi0, density=density)
    lo = np.array([s.interval_lo for s in summ])
    hi = np.array([s.interval_hi for s in summ])
    flagged = sum(1 for s in summ if s.flags)
    return lo, hi, flagged


def _fig4(reps, seed):
    rep = CoverageReport("fig4", seed, reps)
    if reps == 0:
        return rep
    M = MarginalModel(FIG_PRIOR, FIG_K)
    draws = sample(M, reps, seed)
    x, lam = draws.x, draws.lam
    lo, hi, fl = _proposed(exact_log_gradients(M), x, FIG_K)
    c = _covers(lo, hi, lam)
    rep.methods["proposed_exact"] = MethodCoverage("proposed_exact", reps, int(c.sum()), flagged=fl)
    rep.cases = {"x": x, "lambda": lam, "exact_lo": lo, "exact_hi": hi}
    if reps >= 120:
        lo_f, hi_f, fl = _proposed(fit_score_matching(x), x, FIG_K)
        c = _covers(lo_f, hi_f, lam)
        rep.methods["proposed_fitted"] = MethodCoverage(
            "proposed_fitted", reps, int(c.sum()), flagged=fl
        )
        rep.cases.update(fitted_lo=lo_f, fitted_hi=hi_f)
    nt = nt_posterior_interval(NtModel(FIG_K, marginal=M), x)
    c = _covers(nt.lo, nt.hi, lam)
    rep.methods["nt"] = MethodCoverage("nt", reps, int(c.sum()), flagged=int(nt.extrapolated.sum()))
    rep.cases.update(nt_lo=nt.lo, nt_hi=nt.hi)
    return rep


def _score(name, lo, hi, lam, is_null, flagged=0):
    c = _covers(lo, hi, lam)
    nn = ~is_null
    R = lam.size
    covered_nn = int(np.sum(c & nn))
    covered_all = int(np.sum(c))
    return MethodCoverage(
        name, int(nn.sum()), covered_nn,
        fcr=1.0 - covered_nn / R if R else None,
        fcr_strict=1.0 - covered_all / R if R else None,
        flagged=flagged,
    )


def _fig5(reps, seed, cases=FIG5_CASES, pi0=FIG5_PI0):
    rep = CoverageReport("fig5", seed, reps)
    if reps == 0:
        return rep
    prior = PointMassMixture(pi0, FIG_PRIOR)
    M = MarginalModel(prior, FIG_K)
    draws = sample(M, cases, seed)
    x, lam = draws.x, draws.lam
    is_null = lam == 0
    pv = np.asarray(chisq_sf(x, FIG_K))
    bh = bh_select(pv, 0.1, x=x)
    sel = bh.rejected
    rep.selected = bh.count
    rep.cutoff = bh.cutoff_x
    fdr, tp = empirical_fdr(bh, is_null)
    rep.empirical_fdr, rep.non_null_selected = fdr, tp
    if bh.count == 0:
        return rep
    xs, ls, ns = x[sel], lam[sel], is_null[sel]
    rep.cases = {"x": xs, "lambda": ls, "is_null": ns}

    dens = lambda v: marginal_density(M, v)
    lo, hi, fl = _proposed(exact_log_gradients(M), xs, FIG_K, pi0=pi0, density=dens)
    rep.methods["proposed_exact"] = _score("proposed_exact", lo, hi, ls, ns, fl)
    rep.cases.update(exact_lo=lo, exact_hi=hi)

    g_fit = fit_score_matching(x)
    lind = fit_lindsey(x, FitConfig(method="lindsey", basis_size=8))
    pi0_hat = tweedie.estimate_pi0(pv)
    lo, hi, fl = _proposed(g_fit, xs, FIG_K, pi0=pi0_hat, density=lind.density)
    rep.methods["proposed_fitted"] = _score("proposed_fitted", lo, hi, ls, ns, fl)
    rep.cases.update(fitted_lo=lo, fitted_hi=hi)

    nt = nt_posterior_interval(NtModel(FIG_K, marginal=M), xs)
    rep.methods["nt"] = _score("nt", nt.lo, nt.hi, ls, ns, int(nt.extrapolated.sum()))
    rep.cases.update(nt_lo=nt.lo, nt_hi=nt.hi)

    by = np.array([by_interval(v, FIG_K, 0.1, bh.count, cases) for v in xs])
    rep.methods["by"] = _score("by", by[:, 0], by[:, 1], ls, ns)
    rep.cases.update(by_lo=by[:, 0], by_hi=by[:, 1])
    return rep


def coverage_experiment(scenario, reps=None, seed=0):
    """Coverage of 90% intervals for the true ``lambda`` under a known model.

    ``fig4``: ``reps`` draws from ``k = 7`` with a Gamma(2, 10) prior; every
    case is scored.  ``fig5``: ``reps`` cases (default 5000) of which 90% are
    null, BH at 0.1, and the selected non-null cases are scored; FCR is also
    reported.  ``reps=0`` gives an empty report.
    """
    if scenario == "fig4":
        return _fig4(1000 if reps is None else int(reps), seed)
    if scenario == "fig5":
        n = FIG5_CASES if reps is None else int(reps)
        return _fig5(n, seed, cases=n)
    raise ConfigError(f"unknown scenario {scenario!r}")


# ---------------------------------------------------------------------------
# adjustment curves
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CurveTable:
    """Columns ``x, one_layer (1 + 2l'_k), two_layer, u, v, w``."""

    x: np.ndarray
    one_layer: np.ndarray
    two_layer: np.ndarray
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    log_concave: bool

    columns = ("x", "one_layer", "two_layer", "u", "v", "w")

    def rows(self):
        return np.column_stack([getattr(self, c) for c in self.columns])


def curve_emit(prior, k, x_grid):
    """Multiplicative adjustment curves from exact gradients.

    ``u = x (1 + 2l'_k)``, ``v = u (1 + 2l'_{k-2})`` and
    ``w = v - (k - 4) u / x``, which is the posterior mean.
    """
    x = np.asarray(x_grid, dtype=float)
    if np.any(x <= 0):
        raise DomainError("x grid must be > 0")
    M = MarginalModel(prior, k)
    R2, R4, _, _, _ = tweedie.density_ratios(exact_log_gradients(M).evaluate(x), floor=0.0)
    one = R2
    two = R4  # (1 + 2l'_{k-2})(1 + 2l'_k) = g_{k-4} / g_k
    u = x * one
    v = x * two
    w = v - (k - 4.0) * u / x
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        concave = bool(np.all(log_concavity_diagnostic(M, x)))
    return CurveTable(x, one, two, u, v, w, concave)
