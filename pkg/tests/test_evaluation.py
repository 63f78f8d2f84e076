import math

import numpy as np
import pytest

from afin import factors as F
from afin.evaluation import (
    DegenerateProposalError,
    WeightedSampleSet,
    evaluate_task,
    mcmc_reference,
    metric_m1,
    metric_m2,
    normalize_log_weights,
    pareto_k,
    random_directions,
    reference_for,
    run_evaluation,
    sample_moments,
    sliced_w2,
    snis,
    w2_squared_1d,
    weight_diagnostics,
    weighted_moments,
    weighted_sample_set,
)
from afin.simulator import SimulatorConfig, rng_stream, simulate_task

CONJ = SimulatorConfig(d_min=2, d_max=3, N_max=8, prior_types=("diag_gaussian",), likelihood_types=("lin_gaussian",))


def conj_task(i=0, seed=0):
    return simulate_task(CONJ, rng_stream(seed, i))


def one_hot(S, k=0):
    w = np.zeros(S)
    w[k] = 1.0
    return w


class TestSNIS:
    def test_proposal_equal_to_target(self, rng):
        g = F.GaussianDistribution([0.2, -0.3], [[1.5, 0.2], [0.2, 0.7]])
        ws = snis(g, g.log_prob, 500, rng)
        assert np.all(ws.weights == 1.0 / 500)

    def test_wider_proposal_recovers_mean(self, rng):
        task = conj_task(1)
        post = F.conjugate_posterior_oracle(task)
        q = F.GaussianDistribution(post.mean, post.precision / 2.0)
        ws = snis(q, lambda z: F.log_unnormalized_posterior(task, z), 100_000, rng)
        mean, _ = weighted_moments(ws)
        band = 3 * math.sqrt(np.trace(post.covariance) / ws.ess)
        assert np.linalg.norm(mean - post.mean) < band

    def test_degenerate_proposal(self, rng):
        g = F.GaussianDistribution([0.0], [[1.0]])
        with pytest.raises(DegenerateProposalError):
            snis(g, lambda z: np.full(z.shape[0], -np.inf), 10, rng)

    def test_needs_two_draws(self, rng):
        g = F.GaussianDistribution([0.0], [[1.0]])
        with pytest.raises(ValueError):
            snis(g, g.log_prob, 1, rng)

    def test_shift_invariance(self, rng):
        lw = rng.normal(size=50) * 3
        assert np.allclose(normalize_log_weights(lw), normalize_log_weights(lw + 1000.0), rtol=1e-11, atol=0)

    def test_weights_on_simplex(self, rng):
        w = normalize_log_weights(rng.normal(size=100) * 50)
        assert np.all(w >= 0) and w.sum() == pytest.approx(1.0, abs=1e-15)

    def test_nan_log_target_gets_zero_weight(self):
        ws = weighted_sample_set(np.zeros((3, 1)), np.array([0.0, np.nan, 0.0]), np.zeros(3))
        assert ws.weights[1] == 0.0 and ws.weights[0] == 0.5

    def test_rejects_positive_infinity(self):
        with pytest.raises(ValueError):
            normalize_log_weights([0.0, np.inf])


class TestMoments:
    def test_uniform_weights_convention(self, rng):
        z = rng.normal(size=(40, 3))
        mean_w, cov_w = weighted_moments((z, np.full(40, 1 / 40)))
        mean_u, cov_u = sample_moments(z)
        assert np.allclose(mean_w, mean_u, atol=1e-15)
        assert np.allclose(cov_w * 40 / 39, cov_u, atol=1e-14)

    def test_one_hot_weight(self, rng):
        z = rng.normal(size=(10, 2))
        mean, cov = weighted_moments((z, one_hot(10, 3)))
        assert np.array_equal(mean, z[3]) and np.all(cov == 0)

    def test_translation(self, rng):
        z = rng.normal(size=(30, 2))
        w = normalize_log_weights(rng.normal(size=30))
        c = np.array([5.0, -2.0])
        m0, c0 = weighted_moments((z, w))
        m1, c1 = weighted_moments((z + c, w))
        assert np.allclose(m1, m0 + c, atol=1e-13) and np.allclose(c1, c0, atol=1e-13)


class TestMetrics:
    def test_identical(self, rng):
        z = rng.normal(size=(20, 2))
        m, c = sample_moments(z)
        assert metric_m1(m, m) == 0.0 and metric_m2(c, c) == 0.0

    def test_unit_shift(self, rng):
        z = rng.normal(size=(20, 2))
        m0, c0 = sample_moments(z)
        m1, c1 = sample_moments(z + np.array([1.0, 0.0]))
        assert metric_m1(m0, m1) == pytest.approx(1.0, abs=1e-14)
        assert metric_m2(c0, c1) == pytest.approx(0.0, abs=1e-14)

    def test_oracle_samples_clt_band(self, rng):
        post = F.conjugate_posterior_oracle(conj_task(2))
        m, _ = sample_moments(post.sample(1_000_000, rng))
        assert metric_m1(m, post.mean) < 4 * math.sqrt(np.linalg.eigvalsh(post.covariance).max() / 1e6)


class TestSlicedW2:
    def test_zero_on_identical(self, rng):
        a = rng.normal(size=(100, 3))
        assert sliced_w2(a, a, R=16, rng=rng) == 0.0

    @pytest.mark.parametrize("m", [0.0, 0.5, 2.0])
    def test_shifted_gaussian(self, rng, m):
        a = rng.normal(size=(100_000, 1))
        b = rng.normal(m, 1.0, size=(100_000, 1))
        assert abs(sliced_w2(a, b, R=4, rng=rng) - abs(m)) <= 5e-2 * (1 + abs(m))

    def test_fixed_axis_is_quantile_distance(self, rng):
        a = rng.normal(size=(50, 2))
        b = rng.normal(size=(50, 2))
        direction = np.array([[1.0, 0.0]])
        expected = math.sqrt(np.mean((np.sort(a[:, 0]) - np.sort(b[:, 0])) ** 2))
        assert sliced_w2(a, b, directions=direction) == pytest.approx(expected, rel=1e-13)

    def test_symmetric_and_nonnegative(self, rng):
        a, b = rng.normal(size=(64, 3)), rng.normal(1.0, 2.0, size=(64, 3))
        dirs = random_directions(32, 3, rng)
        ab, ba = sliced_w2(a, b, directions=dirs), sliced_w2(b, a, directions=dirs)
        assert ab >= 0 and ab == pytest.approx(ba, rel=1e-14)

    def test_unequal_sizes_subsampled(self, rng):
        a, b = rng.normal(size=(80, 2)), rng.normal(size=(50, 2))
        assert sliced_w2(a, b, R=8, rng=rng) > 0

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            sliced_w2(np.zeros((4, 2)), np.zeros((4, 3)), R=2, rng=rng)

    def test_weighted_matches_duplication(self, rng):
        x = rng.normal(size=6)
        y = rng.normal(size=12)
        wx = np.array([2, 1, 3, 1, 2, 3], dtype=float)
        dup = np.repeat(x, wx.astype(int))
        assert w2_squared_1d(x, y, wx / wx.sum(), None) == pytest.approx(w2_squared_1d(dup, y), rel=1e-12)

    def test_uniform_weights_match_sorted_formula(self, rng):
        x, y = rng.normal(size=30), rng.normal(size=30)
        u = np.full(30, 1 / 30)
        expected = np.mean((np.sort(x) - np.sort(y)) ** 2)
        assert w2_squared_1d(x, y, u, u) == pytest.approx(expected, rel=1e-12)

    def test_directions_on_sphere(self, rng):
        dirs = random_directions(100, 4, rng)
        assert np.allclose(np.linalg.norm(dirs, axis=1), 1.0)


class TestParetoK:
    def test_constant_weights(self):
        assert pareto_k(np.zeros(100)) == -np.inf

    def test_too_few_tail_points(self):
        assert math.isnan(pareto_k(np.arange(10.0)))

    def test_finite_variance_case(self):
        ok = 0
        for seed in range(100):
            z = np.random.default_rng(seed).normal(0.0, 2.0, 10_000)
            lw = -0.5 * z ** 2 + 0.5 * z ** 2 / 4 + math.log(2.0)
            ok += pareto_k(lw) < 0.5
        assert ok >= 95

    def test_heavy_tail_detected(self):
        # unit proposal against a sd-5 target: tail index 0.96
        ks = []
        for seed in range(20):
            z = np.random.default_rng(seed).normal(0.0, 1.0, 10_000)
            ks.append(pareto_k(0.5 * z ** 2 * (1 - 1 / 25)))
        assert min(ks) > 0.5 and np.mean(ks) > 0.7

    def test_shift_invariance(self, rng):
        lw = rng.normal(size=1000)
        assert pareto_k(lw) == pytest.approx(pareto_k(lw + 50.0), rel=1e-9)


class TestDiagnostics:
    def _ws(self, w, d=1):
        S = w.size
        return WeightedSampleSet(np.zeros((S, d)), np.log(np.maximum(w, 1e-300)), w)

    @pytest.mark.parametrize("S", [8, 100, 9999])
    def test_uniform(self, S):
        w_max, h, _ = weight_diagnostics(self._ws(np.full(S, 1 / S)), lambda z: np.zeros(len(z)), np.zeros((3, 1)))
        assert w_max == 1 / S and h == 1.0

    def test_one_hot(self):
        w_max, h, _ = weight_diagnostics(self._ws(one_hot(8)), lambda z: np.zeros(len(z)), np.zeros((3, 1)))
        assert w_max == 1.0 and h == 0.0

    def test_single_sample(self):
        _, h, _ = weight_diagnostics(self._ws(np.ones(1)), lambda z: np.zeros(len(z)), np.zeros((3, 1)))
        assert math.isnan(h)

    def test_entropy_ratio_bounds(self, rng):
        for _ in range(50):
            w = normalize_log_weights(rng.normal(size=20) * rng.uniform(0, 20))
            _, h, _ = weight_diagnostics(self._ws(w), lambda z: np.zeros(len(z)), np.zeros((1, 1)))
            assert 0.0 <= h <= 1.0

    def test_energy_gap_vanishes_for_exact_proposal(self, rng):
        task = conj_task(3)
        post = F.conjugate_posterior_oracle(task)

        def log_target(z):
            return F.log_unnormalized_posterior(task, z)

        ws = snis(post, log_target, 50_000, rng)
        ref = post.sample(50_000, rng)
        _, _, gap = weight_diagnostics(ws, log_target, ref)
        # energy is (d/2 + const) with variance d/2 per draw
        assert abs(gap) < 4 * math.sqrt(2 * (task.d / 2) / 50_000)


class TestMCMC:
    def test_conjugate_accuracy(self):
        task = simulate_task(SimulatorConfig(d_min=2, d_max=2, N_max=8, prior_types=("diag_gaussian",),
                                             likelihood_types=("lin_gaussian",)), rng_stream(0, 0))
        post = F.conjugate_posterior_oracle(task)
        run = mcmc_reference(task, 200_000, 20_000, np.random.default_rng(0))
        m, c = sample_moments(run.samples)
        assert metric_m1(m, post.mean) < 0.02 and metric_m2(c, post.covariance) < 0.05
        assert not run.warning and 0.1 < run.acceptance_rate < 0.5

    def test_prior_only_target(self):
        prior = F.diag_gaussian([0.5, -1.0], [0.7, 1.3])
        task = F.TaskInstance(2, prior, [F.lin_gaussian([0.0, 0.0], 0.0, 1.0)])
        run = mcmc_reference(task, 100_000, 10_000, np.random.default_rng(1))
        m, c = sample_moments(run.samples)
        # autocorrelated draws: allow a generous effective sample size of 5000
        assert np.all(np.abs(m - [0.5, -1.0]) < 4 * np.array([0.7, 1.3]) / math.sqrt(5000))
        assert np.allclose(np.diag(c), [0.49, 1.69], rtol=0.1)

    def test_reproducible(self):
        task = conj_task(4)
        a = mcmc_reference(task, 2000, 500, np.random.default_rng(7))
        b = mcmc_reference(task, 2000, 500, np.random.default_rng(7))
        assert np.array_equal(a.samples, b.samples)

    def test_warning_flag(self):
        # a tiny warmup leaves the unadapted step far too large for a very peaked target
        task = F.TaskInstance(1, F.diag_gaussian([0.0], [1e-4]), [F.lin_gaussian([0.0], 0.0, 1.0)])
        with pytest.warns(RuntimeWarning):
            run = mcmc_reference(task, 500, 0, np.random.default_rng(0))
        assert run.warning

    def test_non_conjugate_target(self):
        cfg = SimulatorConfig(d_min=2, d_max=2, N_max=10, prior_types=("diag_laplace",),
                              likelihood_types=("bernoulli_logit",))
        task = simulate_task(cfg, rng_stream(0, 1))
        run = mcmc_reference(task, 5000, 1000, np.random.default_rng(2))
        assert run.samples.shape == (5000, 2) and np.all(np.isfinite(run.samples))


class TestDriver:
    def test_reference_kinds(self, rng):
        assert reference_for(conj_task(5), 100, rng, 2000).kind == "oracle"
        task = simulate_task(SimulatorConfig(d_max=2, N_max=4, prior_types=("diag_laplace",)), rng_stream(0, 2))
        ref = reference_for(task, 100, rng, 4000)
        assert ref.kind == "mcmc" and ref.samples.shape == (100, task.d)

    def test_rows(self):
        tasks = [conj_task(i) for i in range(2)]
        tasks.append(simulate_task(SimulatorConfig(d_max=2, N_max=4, prior_types=("diag_laplace",)), rng_stream(1, 0)))
        proposals = [F.GaussianDistribution(np.zeros(t.d), np.eye(t.d)) for t in tasks]
        notes = []
        rows = run_evaluation(tasks, ["afin", "afin+snis", "mcmc", "oracle"], [50, 100], proposals, seed=0,
                              R=8, ref_samples=500, ref_mcmc_iters=4000, notice=notes.append)
        assert len(rows) == 2 * 4 * 2 + 3 * 2
        assert len(notes) == 1
        keys = {"task_id", "method", "budget", "m1", "m2", "sw2", "pareto_k", "max_weight", "entropy_ratio",
                "energy_gap", "wallclock_s", "reference"}
        assert all(set(r) == keys for r in rows)
        single = [r for r in rows if r["method"] == "afin"]
        assert all(r["max_weight"] == 1 / r["budget"] for r in single)

    def test_deterministic(self):
        tasks = [conj_task(7)]
        props = [F.conjugate_posterior_oracle(tasks[0])]
        a = run_evaluation(tasks, ["afin+snis"], [64], props, seed=3, R=4, ref_samples=200)
        b = run_evaluation(tasks, ["afin+snis"], [64], props, seed=3, R=4, ref_samples=200)
        strip = [{k: v for k, v in r.items() if k != "wallclock_s"} for r in a]
        assert strip == [{k: v for k, v in r.items() if k != "wallclock_s"} for r in b]

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            run_evaluation([conj_task(0)], ["nuts"], [10], None, seed=0)

    def test_oracle_method_needs_conjugacy(self, rng):
        task = simulate_task(SimulatorConfig(d_max=2, N_max=3, prior_types=("diag_laplace",)), rng_stream(2, 0))
        ref = reference_for(task, 50, rng, 2000)
        with pytest.raises(ValueError):
            evaluate_task(task, "oracle", 10, ref, rng, random_directions(4, task.d, rng))
