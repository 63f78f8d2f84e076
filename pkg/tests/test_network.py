import math

import numpy as np
import pytest
import torch
from helpers import TOY, equivariance_errors, numeric_jacobian_log_density, toy_model

from afin import factors as F
from afin.descriptors import NODE_WIDTHS, PAIR_WIDTHS, build_descriptors, build_descriptors_batch
from afin.factors import FactorType
from afin.network import (
    AFIN,
    ModelConfig,
    count_parameters,
    featurize,
    gaussian_log_prob,
    group_by_shape,
    parameter_registry,
)
from afin.simulator import SimulatorConfig, rng_stream, simulate_task

SMALL = SimulatorConfig(d_max=5, N_max=4)


def coordmlp_count(c_in, c_out, hidden, layers):
    widths = [c_in] + [hidden] * (layers - 1) + [c_out]
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


def hand_count(cfg: ModelConfig) -> dict:
    C, H, L = cfg.channels, cfg.hidden, cfg.n_layers
    boxmlp = 2 * coordmlp_count(6 * C, C, H, L)
    adapters = sum(
        coordmlp_count(NODE_WIDTHS[t], C, cfg.adapter_hidden, cfg.adapter_layers)
        + coordmlp_count(PAIR_WIDTHS[t], C, cfg.adapter_hidden, cfg.adapter_layers)
        for t in FactorType
    )
    block = 5 * boxmlp + 2 * 2 * 2 * C + 2
    gaussian = coordmlp_count(6 * C, 2, H, L) + coordmlp_count(6 * C, 1, H, L)
    out = {"adapters": adapters, "encoder": boxmlp, "blocks": cfg.n_blocks * block, "gaussian": gaussian}
    if cfg.decoder == "flow":
        G, Hf = cfg.flow_context, cfg.flow_hidden
        coupling = (G + 2) * Hf + Hf + (G + 1) * Hf + Hf + 2 * coordmlp_count(6 * Hf, Hf, Hf, 2) \
            + coordmlp_count(6 * Hf, 2, Hf, 2)
        out["flow"] = 2 * coordmlp_count(6 * C, G, H, L) + coordmlp_count(6 * C, 2, H, L) + cfg.flow_layers * coupling
    out["total"] = sum(out.values())
    return out


class TestDescriptors:
    def test_standard_normal_prior(self):
        node, pair = build_descriptors(F.diag_gaussian(np.zeros(3), np.ones(3)), 3)
        assert node.shape == (3, 3) and np.all(node == 0)
        assert pair.shape == (3, 3, 7)

    @pytest.mark.parametrize("ft", list(FactorType), ids=lambda t: t.value)
    def test_widths_and_indicator(self, ft):
        task = simulate_task(
            SimulatorConfig(d_min=4, d_max=4, N_max=3,
                            prior_types=(ft.value,) if ft.is_prior else ("diag_gaussian",),
                            likelihood_types=(ft.value,) if ft.is_likelihood else ("lin_gaussian",)),
            rng_stream(0, 0),
        )
        factor = task.prior if ft.is_prior else task.likelihoods[0]
        node, pair = build_descriptors(factor, 4)
        assert node.shape == (4, NODE_WIDTHS[ft]) and pair.shape == (4, 4, PAIR_WIDTHS[ft])
        assert np.array_equal(pair[..., -1], np.eye(4))
        assert np.all(np.isfinite(node)) and np.all(np.isfinite(pair))

    def test_permutation(self, rng):
        task = simulate_task(SimulatorConfig(d_min=4, d_max=4, N_max=12), rng_stream(1, 0))
        perm = np.array([3, 1, 0, 2])
        moved = task.permuted_coordinates(perm)
        for a, b in zip(task.factors, moved.factors):
            na, pa = build_descriptors(a, 4)
            nb, pb = build_descriptors(b, 4)
            assert np.allclose(nb, na[perm], rtol=1e-14, atol=1e-15)
            assert np.allclose(pb, pa[perm][:, perm], rtol=1e-14, atol=1e-15)

    def test_mixed_types_rejected(self):
        with pytest.raises(ValueError):
            build_descriptors_batch([F.diag_gaussian([0.0], [1.0]), F.diag_laplace([0.0], [1.0])], 1)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            build_descriptors(F.diag_gaussian([0.0, 1.0], [1.0, 1.0]), 3)


class TestBatching:
    def test_featurize_requires_shared_shape(self):
        a = simulate_task(SMALL, rng_stream(0, 0), d=2, n=3)
        b = simulate_task(SMALL, rng_stream(0, 1), d=3, n=3)
        with pytest.raises(ValueError):
            featurize([a, b])

    def test_group_by_shape(self):
        tasks = [simulate_task(SMALL, rng_stream(0, i), d=1 + i % 2, n=2) for i in range(5)]
        assert group_by_shape(tasks) == {(1, 2): [0, 2, 4], (2, 2): [1, 3]}

    def test_batched_forward_matches_single(self):
        model = toy_model()
        tasks = [simulate_task(SMALL, rng_stream(2, i), d=3, n=4) for i in range(4)]
        with torch.no_grad():
            joint = model.forward(tasks)
            for i, t in enumerate(tasks):
                one = model.forward([t])
                assert torch.allclose(one.mean[0], joint.mean[i], rtol=1e-12, atol=1e-13)
                assert torch.allclose(one.precision[0], joint.precision[i], rtol=1e-12, atol=1e-13)

    def test_identical_factors_encode_identically(self):
        model = toy_model()
        lik = F.lin_gaussian([0.5, -1.0], 0.3, 0.8)
        task = F.TaskInstance(2, F.diag_gaussian([0.0, 0.0], [1.0, 1.0]), [lik, lik])
        with torch.no_grad():
            node, pair = model.encode(model.featurize([task]))
        assert torch.equal(node[0, 1], node[0, 2]) and torch.equal(pair[0, 1], pair[0, 2])


class TestDimensionIndependence:
    def test_registry_unchanged_by_forward(self, toy_cfg):
        model = AFIN(toy_cfg)
        before = parameter_registry(model)
        for d, n in [(1, 1), (4, 16), (7, 3)]:
            with torch.no_grad():
                model.forward([simulate_task(SimulatorConfig(d_max=8, N_max=16), rng_stream(3, d), d=d, n=n)])
        assert parameter_registry(model) == before

    @pytest.mark.parametrize("d", [1, 2, 16])
    def test_output_shapes(self, d):
        model = toy_model()
        task = simulate_task(SimulatorConfig(d_max=16, N_max=4), rng_stream(4, d), d=d, n=3)
        with torch.no_grad():
            node, pair = model.encode(model.featurize([task]))
            out = model.forward([task])
        assert node.shape == (1, 4, d, 8) and pair.shape == (1, 4, d, d, 8)
        assert out.mean.shape == (1, d) and out.precision.shape == (1, d, d)


class TestParameterCounts:
    def test_toy_gaussian_hand_count(self, toy_cfg):
        counts = count_parameters(AFIN(toy_cfg))
        assert counts == hand_count(toy_cfg)
        assert counts["total"] == 48_583

    def test_toy_flow_hand_count(self, toy_flow_cfg):
        assert count_parameters(AFIN(toy_flow_cfg)) == hand_count(toy_flow_cfg)

    def test_full_profile_counts(self):
        gauss = count_parameters(AFIN(ModelConfig()))
        flow = count_parameters(AFIN(ModelConfig(decoder="flow")))
        assert gauss == hand_count(ModelConfig())
        assert gauss["total"] == 5_679_659
        assert flow["total"] == 6_150_341


class TestGaussianDecoder:
    def test_zero_init_output(self, toy_cfg):
        model = AFIN(toy_cfg)
        task = simulate_task(SMALL, rng_stream(5, 0), d=4, n=2)
        with torch.no_grad():
            out = model.forward([task])
        assert torch.count_nonzero(out.mean) == 0
        expected = (math.log(2.0) + toy_cfg.eps_lambda) * torch.eye(4, dtype=torch.float64)
        assert torch.allclose(out.precision[0], expected, rtol=0, atol=1e-15)

    def test_precision_symmetric_and_pd(self):
        model = toy_model(jitter=0.3)
        cfg = SimulatorConfig(d_max=8, N_max=12)
        tasks = [simulate_task(cfg, rng_stream(6, i)) for i in range(1000)]
        with torch.no_grad():
            for _, idx in group_by_shape(tasks).items():
                prec = model.forward([tasks[i] for i in idx]).precision
                assert torch.equal(prec, prec.transpose(-1, -2))
                assert bool((torch.linalg.cholesky_ex(prec).info == 0).all())

    def test_gaussian_log_prob_matches_numpy(self, rng):
        prec = np.array([[2.0, 0.4], [0.4, 1.0]])
        g = F.GaussianDistribution([0.3, -0.2], prec)
        z = rng.normal(size=(5, 2))
        chol = torch.linalg.cholesky(torch.as_tensor(prec))[None]
        got = gaussian_log_prob(torch.as_tensor(z)[None], torch.tensor([[0.3, -0.2]], dtype=torch.float64), chol)
        assert np.allclose(got[0].numpy(), g.log_prob(z), atol=1e-13)

    def test_gaussian_posterior_wrapper(self):
        model = toy_model()
        task = simulate_task(SMALL, rng_stream(7, 0))
        g = model.gaussian_posterior(task)
        with torch.no_grad():
            out = model.forward([task])
        assert np.array_equal(g.mean, out.mean[0].numpy())


class TestEquivariance:
    @pytest.mark.parametrize("decoder", ["gaussian", "flow"])
    def test_random_tasks(self, decoder):
        model = toy_model(decoder, seed=1)
        rng = np.random.default_rng(0)
        for i in range(20):
            task = simulate_task(SMALL, rng_stream(8, i))
            errs = equivariance_errors(model, task, rng.permutation(task.d), rng.permutation(task.N))
            assert max(errs.values()) < 1e-10, errs


class TestFlow:
    def test_identity_init_whitened_equals_gaussian(self, toy_flow_cfg, rng):
        model = AFIN(toy_flow_cfg)
        model.gaussian = toy_model().gaussian  # nontrivial Gaussian, untouched flow heads
        task = simulate_task(SMALL, rng_stream(9, 0), d=3, n=2)
        z = torch.as_tensor(rng.normal(size=(1, 6, 3)))
        with torch.no_grad():
            out = model.forward([task])
            flow_lp = out.flow.log_prob(z)
            gauss_lp = gaussian_log_prob(z, out.mean, out.chol)
        assert torch.allclose(flow_lp, gauss_lp, rtol=0, atol=1e-12)

    def test_identity_init_unwhitened_is_standard_normal(self, rng):
        model = AFIN(ModelConfig(**TOY, decoder="flow", whiten=False))
        task = simulate_task(SMALL, rng_stream(9, 1), d=2, n=2)
        z = rng.normal(size=(4, 2))
        with torch.no_grad():
            lp = model.forward([task]).flow.log_prob(torch.as_tensor(z)[None])[0].numpy()
        expected = -np.log(2 * np.pi) - 0.5 * np.sum(z * z, axis=1)
        assert np.allclose(lp, expected, rtol=0, atol=1e-12)

    def test_sample_and_log_prob_agree(self):
        model = toy_model("flow", seed=2, jitter=0.2)
        task = simulate_task(SMALL, rng_stream(9, 2), d=4, n=3)
        with torch.no_grad():
            flow = model.forward([task]).flow
            z, log_q = flow.sample(64, torch.Generator().manual_seed(0))
            assert torch.allclose(flow.log_prob(z), log_q, rtol=0, atol=1e-10)

    def test_numeric_jacobian(self, rng):
        model = toy_model("flow", seed=3, jitter=0.2)
        for i in range(5):
            task = simulate_task(SMALL, rng_stream(9, 3, i), d=3, n=2)
            with torch.no_grad():
                flow = model.forward([task]).flow
            exact, numeric = numeric_jacobian_log_density(flow, rng.normal(size=3))
            assert abs(exact - numeric) < 1e-5

    def test_one_dimensional_normalization(self):
        # jitter only the flow so the whitening Gaussian stays at its unit-scale initialization
        model = toy_model("flow", seed=4, jitter=0)
        gen = torch.Generator().manual_seed(4)
        with torch.no_grad():
            for p in model.flow.parameters():
                p.add_(0.1 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
        task = simulate_task(SMALL, rng_stream(9, 4), d=1, n=3)
        grid = np.linspace(-10, 10, 20001)
        with torch.no_grad():
            flow = model.forward([task]).flow
            dens = torch.exp(flow.log_prob(torch.as_tensor(grid)[None, :, None]))[0].numpy()
        assert abs(np.trapezoid(dens, grid) - 1.0) < 1e-4

    def test_coupling_invertible(self, rng):
        model = toy_model("flow", seed=5, jitter=0.3)
        task = simulate_task(SMALL, rng_stream(9, 5), d=5, n=2)
        with torch.no_grad():
            flow = model.forward([task]).flow
            v = torch.as_tensor(rng.normal(size=(1, 7, 5)))
            for layer in flow.decoder.couplings:
                y, ld = layer(v, flow.c_node, flow.c_pair)
                back, ld_inv = layer.inverse(y, flow.c_node, flow.c_pair)
                assert torch.allclose(back, v, atol=1e-12)
                assert torch.allclose(ld, ld_inv, atol=1e-12)

    def test_log_scale_bounded(self):
        model = toy_model("flow", seed=6, jitter=3.0)
        task = simulate_task(SMALL, rng_stream(9, 6), d=3, n=2)
        with torch.no_grad():
            flow = model.forward([task]).flow
            layer = flow.decoder.couplings[0]
            v = torch.randn(1, 10, 3, dtype=torch.float64)
            m = layer.mask(3, v.dtype)
            s, _ = layer.conditioner(v * m, m, flow.c_node, flow.c_pair)
        assert float(s.abs().max()) <= model.cfg.flow_scale_bound


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs", [dict(channels=10, heads=4), dict(decoder="mixture"), dict(hidden=0), dict(eps_lambda=0.0)]
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ModelConfig(**kwargs)

    def test_flow_context_defaults_to_channels(self):
        assert ModelConfig(channels=16, heads=4).flow_context == 16

    def test_round_trip(self):
        cfg = ModelConfig(**TOY, decoder="flow")
        assert ModelConfig.from_json(cfg.to_json()) == cfg
