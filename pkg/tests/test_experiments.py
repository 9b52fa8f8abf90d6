import itertools

import numpy as np
import pytest

from chisq_eb.exceptions import ConfigError, DomainError
from chisq_eb.experiments import (
    XorConfig,
    coverage_experiment,
    curve_emit,
    gen_xor,
    q_statistic,
    signal_triplets,
    triplet_scan,
)
from chisq_eb.gradest import ExactGradientModel
from chisq_eb.model import Exponential, Gamma, MarginalModel, exact_log_gradients
from chisq_eb.tweedie import posterior_mean_two_layer


def _brute_q(data):
    X, y = data[:, :-1].astype(int), data[:, -1]
    out = {}
    for t in itertools.combinations(range(X.shape[1]), 3):
        cell = X[:, t[0]] * 4 + X[:, t[1]] * 2 + X[:, t[2]]
        out[t] = q_statistic(y, cell)
    return out


class TestGenXor:
    def test_shape_and_determinism(self):
        cfg = XorConfig(n=50, p=8, seed=3)
        a, b = gen_xor(cfg), gen_xor(cfg)
        assert a.shape == (50, 9)
        np.testing.assert_array_equal(a, b)
        assert set(np.unique(a[:, :-1])) <= {0.0, 1.0}

    def test_seed_changes_data(self):
        assert not np.array_equal(gen_xor(XorConfig(n=50, p=8, seed=1)), gen_xor(XorConfig(n=50, p=8, seed=2)))

    def test_noise_free_response(self):
        d = gen_xor(XorConfig(n=400, p=6, noise=0.0, seed=0))
        X, y = d[:, :5].astype(int), d[:, -1]
        pair = X[:, 0] ^ X[:, 1]
        trip = X[:, 2] ^ X[:, 3] ^ X[:, 4]
        assert np.all((y == pair) | (y == trip))

    @pytest.mark.parametrize("kw", [{"n": 7}, {"p": 4}, {"noise": -1.0}])
    def test_config_errors(self, kw):
        with pytest.raises(ConfigError):
            XorConfig(**kw)


class TestQStatistic:
    def test_example(self):
        y = np.array([1.0, 2.0, 3.0, 4.0])
        q, df = q_statistic(y, [0, 0, 1, 1])
        # between-group sum of squares 4, sample variance 5/3
        np.testing.assert_allclose(q, 4 / (5 / 3))
        assert df == 1

    def test_empty_cells_dropped(self):
        q, df = q_statistic([1.0, 2.0, 5.0], [0, 3, 7])
        assert df == 2

    def test_errors(self):
        with pytest.raises(DomainError):
            q_statistic([1.0, 1.0], [0, 1])
        with pytest.raises(DomainError):
            q_statistic([1.0, 2.0], [0, 0])
        with pytest.raises(DomainError):
            q_statistic([1.0, 2.0], [0, 1, 1])

    def test_null_calibration(self):
        # with pure noise Q is roughly chi-squared with 7 df
        rng = np.random.default_rng(0)
        qs = [q_statistic(rng.normal(size=400), rng.integers(0, 8, 400))[0] for _ in range(2000)]
        assert abs(np.mean(qs) - 7.0) <= 0.3


class TestScan:
    def test_matches_brute_force(self):
        cfg = XorConfig(n=60, p=6, seed=3, threads=1)
        data = gen_xor(cfg)
        res = triplet_scan(data, cfg, fit=False)
        ref = _brute_q(data)
        assert len(res) == len(ref) == 20
        for r in res:
            np.testing.assert_allclose(r.q, ref[r.triplet][0], rtol=1e-12)
            assert r.df == ref[r.triplet][1]
        assert np.all(np.diff(res.q) <= 0)

    def test_parallel_equals_serial(self):
        data = gen_xor(XorConfig(n=60, p=10, seed=3))
        a = triplet_scan(data, XorConfig(n=60, p=10, threads=1), fit=False)
        b = triplet_scan(data, XorConfig(n=60, p=10, threads=3), fit=False)
        np.testing.assert_array_equal(a.triplets, b.triplets)
        np.testing.assert_array_equal(a.q, b.q)

    def test_bad_threads(self):
        with pytest.raises(ConfigError):
            triplet_scan(gen_xor(XorConfig(n=60, p=6)), XorConfig(n=60, p=6, threads=0), fit=False)

    def test_signal_triplets(self):
        sig = signal_triplets(100)
        assert len(sig) == 99 and (2, 3, 4) in sig and (0, 1, 99) in sig
        assert (0, 1, 2) in sig and sig == sorted(sig)

    def test_fitted_summaries_attached(self):
        cfg = XorConfig(n=300, p=12, seed=0, threads=1)
        res = triplet_scan(gen_xor(cfg), cfg)
        assert res.gradients is not None and res.n_selected > 0
        for r in res:
            assert (r.summary is not None) == r.selected
        sig = signal_triplets(12)
        assert np.all(res.rank_of(sig) < len(sig))


class TestCoverage:
    def test_empty(self):
        rep = coverage_experiment("fig4", reps=0)
        assert rep.reps == 0 and rep.methods == {}
        assert coverage_experiment("fig5", reps=0).methods == {}

    def test_fig4_small(self):
        rep = coverage_experiment("fig4", reps=200, seed=1)
        assert set(rep.methods) == {"proposed_exact", "proposed_fitted", "nt"}
        for m in rep.methods.values():
            assert m.evaluated == 200 and 0.75 <= m.coverage <= 1.0
        d = rep.to_dict()
        assert d["methods"]["nt"]["coverage"] == rep.methods["nt"].coverage

    def test_deterministic(self):
        a = coverage_experiment("fig4", reps=150, seed=2).to_dict()
        b = coverage_experiment("fig4", reps=150, seed=2).to_dict()
        assert a == b

    def test_unknown(self):
        with pytest.raises(ConfigError):
            coverage_experiment("fig9")


class TestCurves:
    def test_w_is_posterior_mean(self):
        prior, k = Gamma(2.0, 10.0), 7
        x = np.linspace(1, 80, 60)
        t = curve_emit(prior, k, x)
        g = exact_log_gradients(MarginalModel(prior, k))
        np.testing.assert_allclose(t.w, posterior_mean_two_layer(g, x, k), rtol=1e-10, atol=1e-10)
        assert t.rows().shape == (60, 6)

    def test_one_layer_crossing(self):
        t = curve_emit(Exponential(0.25), 7, np.linspace(1, 30, 3000))
        i = np.nonzero(np.diff(np.sign(t.one_layer - 1.0)))[0]
        assert i.size == 1 and abs(t.x[i[0]] - 6.8513) <= 0.02

    def test_u_above_v_where_lower_gradient_nonpositive(self):
        prior, k = Gamma(2.0, 10.0), 7
        x = np.linspace(0.5, 80, 400)
        t = curve_emit(prior, k, x)
        d1 = ExactGradientModel(MarginalModel(prior, k - 2)).evaluate(x).d1
        mask = d1 <= 0
        assert mask.any()
        assert np.all(t.u[mask] >= t.v[mask] - 1e-9)

    def test_log_concave(self):
        assert curve_emit(Gamma(2.0, 10.0), 7, np.linspace(1, 60, 50)).log_concave

    def test_domain(self):
        with pytest.raises(DomainError):
            curve_emit(Gamma(2.0, 10.0), 7, [0.0, 1.0])
