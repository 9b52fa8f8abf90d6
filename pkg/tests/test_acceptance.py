"""Acceptance suite: one test group per criterion, each reporting a verdict line.

Tolerances are the stated ones; nothing here is relaxed to make a run pass.
Seeds are fixed up front: fig4/fig5 use 0-4, the XOR study 0-9 and the
gradient-consistency study ``1000 n + rep``.
"""

import itertools
import time

import numpy as np
import pytest

from chisq_eb import tweedie
from chisq_eb.experiments import (
    XorConfig,
    coverage_experiment,
    gen_xor,
    triplet_scan,
    xor_study,
)
from chisq_eb.gradest import ExactGradientModel, fit_score_matching
from chisq_eb.model import (
    Degenerate,
    Exponential,
    Gamma,
    MarginalModel,
    PointMassMixture,
    exact_log_gradients,
    marginal_density,
    marginal_quantile,
    oracle_posterior,
    sample,
)
from chisq_eb.mtest import bh_select, posterior_significance
from chisq_eb.specfun import chisq_sf, norm_quantile

PRIORS = {
    "Degenerate(0)": Degenerate(0.0),
    "Degenerate(6)": Degenerate(6.0),
    "Exponential(1/4)": Exponential(0.25),
    "Gamma(2,10)": Gamma(2.0, 10.0),
}
KS = (3, 5, 7, 9, 11)
GOLDEN_P_CUTOFF = 0.006189830023803803  # P(chi2_7 >= 19.7273), mpmath at 30 digits


def bulk_grid(model, points=200):
    lo, hi = marginal_quantile(model, 0.001), marginal_quantile(model, 0.999)
    return np.linspace(lo, hi, points)


_ORACLE = {}


def oracle_table():
    """Quadrature posterior moments on every bulk grid, computed once."""
    if not _ORACLE:
        t0 = time.perf_counter()
        for name, prior in PRIORS.items():
            for k in KS:
                m = MarginalModel(prior, k)
                x = bulk_grid(m)
                o = np.array([oracle_posterior(m, v) for v in x])
                _ORACLE[name, k] = (m, x, o)
        _ORACLE["seconds"] = time.perf_counter() - t0
    return _ORACLE


class TestCriterion1ShiftIdentity:
    def test_identity_on_bulk_grid(self, criterion):
        t0 = time.perf_counter()
        worst = 0.0
        for prior in PRIORS.values():
            for k in KS:
                m = MarginalModel(prior, k)
                x = bulk_grid(m)
                h = 1e-5 * x
                g = marginal_density(m, x)
                dg = (marginal_density(m, x + h) - marginal_density(m, x - h)) / (2 * h)
                g2 = marginal_density(m, x, df_shift=1)
                worst = max(worst, float(np.max(np.abs(g2 - (2 * dg + g)) / g)))
        secs = time.perf_counter() - t0
        criterion.check(
            1, "df-shift identity", worst <= 1e-6 and secs < 10,
            f"max rel err {worst:.2e} (tol 1e-6), {secs:.1f}s (limit 10s)",
        )


class TestCriterion2OracleMean:
    def test_mean_matches_quadrature(self, criterion):
        t0 = time.perf_counter()
        table = oracle_table()
        worst_rel, worst_forms = 0.0, 0.0
        for name in PRIORS:
            for k in KS:
                m, x, o = table[name, k]
                pm = tweedie.posterior_moments(exact_log_gradients(m), x, k)
                truth = o[:, 0]
                err = np.abs(pm.mean - truth)
                # Degenerate(0) has a zero posterior mean; compare absolutely there
                rel = np.where(truth > 0, err / np.where(truth > 0, truth, 1.0), err)
                worst_rel = max(worst_rel, float(rel.max()))
                worst_forms = max(worst_forms, float(np.max(np.abs(pm.mean - pm.mean_two_layer))))
        secs = time.perf_counter() - t0
        criterion.check(
            2, "posterior mean vs oracle",
            worst_rel <= 1e-6 and worst_forms <= 1e-10 and secs < 30,
            f"max rel err {worst_rel:.2e} (tol 1e-6), forms differ by {worst_forms:.2e} "
            f"(tol 1e-10), {secs:.1f}s (limit 30s)",
        )


class TestCriterion3OracleVariance:
    def test_variance_matches_quadrature(self, criterion):
        table = oracle_table()
        worst_rel, worst_abs_degenerate = 0.0, 0.0
        for name in PRIORS:
            for k in KS:
                m, x, o = table[name, k]
                var = tweedie.posterior_moments(exact_log_gradients(m), x, k).variance
                if name.startswith("Degenerate"):
                    worst_abs_degenerate = max(worst_abs_degenerate, float(np.max(np.abs(var))))
                else:
                    worst_rel = max(worst_rel, float(np.max(np.abs(var - o[:, 2]) / o[:, 2])))
        criterion.check(
            3, "posterior variance vs oracle",
            worst_rel <= 1e-5 and worst_abs_degenerate <= 1e-6,
            f"max rel err {worst_rel:.2e} (tol 1e-5), degenerate |var| "
            f"{worst_abs_degenerate:.2e} (tol 1e-6)",
        )


class TestCriterion4NullCollapse:
    def test_central_null(self, criterion):
        x = np.linspace(0.01, 100.0, 2000)
        worst = 0.0
        for k in (3, 5, 7, 9):
            g = ExactGradientModel(MarginalModel(Degenerate(0.0), k))
            pm = tweedie.posterior_moments(g, x, k)
            worst = max(worst, float(np.max(np.abs(pm.effect_dof))), float(np.max(np.abs(pm.mean))))
        criterion.check(4, "central null collapse", worst <= 1e-10, f"max |value| {worst:.2e} (tol 1e-10)")


class TestCriterion5Fig4:
    def test_coverage(self, criterion):
        t0 = time.perf_counter()
        reps = [coverage_experiment("fig4", reps=1000, seed=s) for s in range(5)]
        secs = time.perf_counter() - t0
        prop = float(np.mean([r.methods["proposed_exact"].coverage for r in reps]))
        nt = float(np.mean([r.methods["nt"].coverage for r in reps]))
        ok = 0.88 <= prop <= 0.925 and 0.84 <= nt <= 0.91 and secs < 300
        criterion.check(
            5, "fig4 coverage", ok,
            f"proposed {100 * prop:.2f}% in [88, 92.5], NT {100 * nt:.2f}% in [84, 91], "
            f"{secs:.0f}s (limit 300s)",
        )


@pytest.fixture(scope="module")
def fig5_runs():
    t0 = time.perf_counter()
    runs = [coverage_experiment("fig5", seed=s) for s in range(5)]
    return runs, time.perf_counter() - t0


class TestCriterion6Fig5:
    def test_selection(self, criterion, fig5_runs):
        runs, _ = fig5_runs
        counts = [r.selected for r in runs]
        fdrs = [r.empirical_fdr for r in runs]
        ok = all(270 <= c <= 360 for c in counts) and all(0.05 <= f <= 0.15 for f in fdrs)
        criterion.check(
            6, "fig5 replication", ok,
            f"selected {counts} in [270, 360], FDR {np.round(fdrs, 4).tolist()} in [0.05, 0.15]",
        )

    def test_coverage(self, criterion, fig5_runs):
        runs, secs = fig5_runs
        prop = float(np.mean([r.methods["proposed_exact"].coverage for r in runs]))
        by = float(np.mean([r.methods["by"].coverage for r in runs]))
        fcr = float(np.mean([r.methods["by"].fcr for r in runs]))
        ok = 0.87 <= prop <= 0.95 and by >= 0.94 and 0.07 <= fcr <= 0.17 and secs < 600
        criterion.check(
            6, "fig5 replication", ok,
            f"proposed {100 * prop:.2f}% in [87, 95], BY {100 * by:.2f}% >= 94, "
            f"BY FCR {fcr:.4f} in [0.07, 0.17], {secs:.0f}s (limit 600s)",
        )

    def test_cutoff_p_value(self, criterion):
        p = chisq_sf(19.7273, 7)
        criterion.check(
            6, "fig5 replication", abs(p - GOLDEN_P_CUTOFF) <= 1e-6,
            f"p(19.7273; 7) = {p:.10f} vs golden {GOLDEN_P_CUTOFF:.10f}",
        )


class TestCriterion7Significance:
    def test_thresholds(self, criterion):
        z2 = norm_quantile(0.95) ** 2
        boundary = 7 * z2
        ok = (
            abs(boundary - 18.94) <= 0.01
            and posterior_significance(18.95, 7, 0.1)
            and not posterior_significance(18.90, 7, 0.1)
        )
        t3 = chisq_sf(3 * z2, 3)
        t7 = chisq_sf(7 * z2, 7)
        ok = ok and abs(t3 - 0.04) <= 0.005 and abs(t7 - 0.008) <= 0.002
        criterion.check(
            7, "posterior significance thresholds", ok,
            f"boundary {boundary:.4f}, P(chi3 >= 3z^2) = {t3:.4f}, P(chi7 >= 7z^2) = {t7:.4f}",
        )


@pytest.fixture(scope="module")
def xor_runs():
    out = []
    for seed in range(10):
        t0 = time.perf_counter()
        r = xor_study(XorConfig(seed=seed))
        r["seconds"] = time.perf_counter() - t0
        out.append(r)
    return out


class TestCriterion8Xor:
    def test_signal_ranks(self, criterion, xor_runs):
        top = [r["signal_in_top"] for r in xor_runs]
        criterion.check(
            8, "XOR study", sum(top) >= 9,
            f"signal in top 99 on {sum(top)}/10 seeds (need 9); "
            f"worst ranks {[r['worst_signal_rank'] for r in xor_runs]}",
        )

    def test_bh_count(self, criterion, xor_runs):
        counts = [r["n_selected"] for r in xor_runs]
        criterion.check(
            8, "XOR study", all(60 <= c <= 180 for c in counts),
            f"BH counts {counts} (each in [60, 180])",
        )

    def test_posterior_significance(self, criterion, xor_runs):
        sig = [r["signal_posterior_significant"] for r in xor_runs]
        criterion.check(
            8, "XOR study", all(s >= 90 for s in sig),
            f"signal posterior significant at 10%: {sig} (each >= 90)",
        )

    def test_scan_runtime(self, criterion):
        data = gen_xor(XorConfig(seed=0))
        t0 = time.perf_counter()
        res = triplet_scan(data, XorConfig(seed=0), fit=False)
        secs = time.perf_counter() - t0
        criterion.check(
            8, "XOR study", len(res) == 161700 and secs < 120,
            f"full scan {len(res)} triplets in {secs:.1f}s (limit 120s)",
        )

    def test_serial_parallel_miniature(self, criterion):
        data = gen_xor(XorConfig(n=60, p=6, seed=3))
        a = triplet_scan(data, XorConfig(n=60, p=6, seed=3, threads=1), fit=False)
        b = triplet_scan(data, XorConfig(n=60, p=6, seed=3, threads=3), fit=False)
        same = (
            np.array_equal(a.triplets, b.triplets)
            and np.array_equal(a.q, b.q)
            and np.array_equal(a.df, b.df)
            and np.array_equal(a.selected, b.selected)
        )
        criterion.check(8, "XOR study", same, f"p=6 serial/parallel identical: {same}")


class TestCriterion9GradientConsistency:
    def test_error_shrinks(self, criterion):
        lines, ok = [], True
        for name, prior in (("null", Degenerate(0.0)), ("Gamma(2,10)", Gamma(2.0, 10.0))):
            m = MarginalModel(prior, 7)
            exact = exact_log_gradients(m)
            means = []
            for n in (2000, 20000, 200000):
                errs = []
                for rep in range(5):
                    x = sample(m, n, 1000 * n + rep).x
                    g = fit_score_matching(x)
                    grid = np.linspace(*g.interval, 200)
                    errs.append(np.median(np.abs(g.evaluate(grid).d1 - exact.evaluate(grid).d1)))
                means.append(float(np.mean(errs)))
            ok = ok and means[1] <= 0.05 and means[0] >= means[1] >= means[2]
            lines.append(f"{name} " + "/".join(f"{e:.4f}" for e in means))
        criterion.check(
            9, "gradient-estimation consistency", ok,
            "median |psi err| at n=2k/20k/200k: " + ", ".join(lines),
        )


def _bh_brute(p, alpha):
    m = len(p)
    best = 0
    for i in range(1, m + 1):
        if sum(v <= i * alpha / m for v in p) >= i:
            best = i
    if best == 0:
        return set()
    return {j for j, v in enumerate(p) if v <= best * alpha / m}


class TestCriterion10Properties:
    def test_sampler_moments(self, criterion):
        n, k = 50000, 7.0
        worst = 0.0
        priors = list(PRIORS.values()) + [PointMassMixture(0.9, Gamma(2.0, 10.0))]
        for i, prior in enumerate(priors):
            x = sample(MarginalModel(prior, k), n, 77 + i).x
            ex = k + prior.mean()
            vx = 2 * k + 4 * prior.mean() + prior.variance()
            se_mean = np.sqrt(vx / n)
            mu4 = np.mean((x - x.mean()) ** 4)
            se_var = np.sqrt((mu4 - x.var() ** 2) / n)
            worst = max(worst, abs(x.mean() - ex) / se_mean, abs(x.var(ddof=1) - vx) / se_var)
        criterion.check(10, "property suites", worst <= 4, f"sampler moments within {worst:.2f} SE (limit 4)")

    def test_bh_brute_force(self, criterion):
        grid = (0.001, 0.02, 0.05, 0.3)
        mismatches, total = 0, 0
        for m in range(1, 9):
            for p in itertools.product(grid, repeat=m):
                total += 1
                if set(bh_select(p, 0.1).rejected.tolist()) != _bh_brute(p, 0.1):
                    mismatches += 1
        criterion.check(
            10, "property suites", mismatches == 0,
            f"BH brute force: {mismatches} mismatches over {total} batteries",
        )

    def test_interval_and_flag_invariants(self, criterion):
        rng = np.random.default_rng(2024)
        bad = 0
        for trial in range(40):
            k = float(rng.choice([3, 5, 7, 9]))
            prior = Gamma(float(rng.uniform(0.5, 4)), float(rng.uniform(1, 20)))
            m = MarginalModel(prior, k)
            data = sample(m, 1500, trial).x
            g = fit_score_matching(data)
            x = np.concatenate([rng.uniform(0.05, 1.5 * data.max(), 60), [data.max() * 3]])
            pi0 = float(rng.choice([0.0, 0.5, 0.9]))
            summ = tweedie.summarize(g, x, k, 0.9, pi0=pi0 or None,
                                     density=lambda v: marginal_density(m, v))
            ext = g.extrapolated(x)
            for s, e in zip(summ, ext):
                bad += not (0 <= s.interval_lo <= s.mean <= s.interval_hi)
                bad += s.variance < 0
                bad += ("extrapolated_gradient" in s.flags) != bool(e)
                bad += not s.flags <= {
                    "clamped_mean", "clamped_variance", "extrapolated_gradient",
                    "floored_ratio", "fdr_one",
                }
        criterion.check(10, "property suites", bad == 0, f"interval/flag invariant violations: {bad}")
