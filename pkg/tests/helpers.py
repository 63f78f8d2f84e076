"""Shared checks for the unit tests and the acceptance suite."""
import math

import numpy as np
import torch

from afin import simulator as sim
from afin.factors import FactorType
from afin.network import AFIN, ModelConfig
from afin.simulator import SimulatorConfig
from afin.training import build_model, perturbed_copy

ACCEPTANCE_LINES: list[str] = []

TOY = dict(channels=8, hidden=32, n_layers=2, n_blocks=2, heads=2, adapter_hidden=16, adapter_layers=2, flow_hidden=16)


def toy_model(decoder="gaussian", seed=0, jitter=0.1) -> AFIN:
    """Toy-width network with every parameter jittered away from its initialization."""
    model = build_model(ModelConfig(**TOY, decoder=decoder), seed)
    return perturbed_copy(model, jitter, seed) if jitter else model


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = a.detach(), b.detach()
    scale = float(b.abs().max()) if b.numel() else 0.0
    return float((a - b).abs().max()) / max(scale, 1e-300) if b.numel() else 0.0


def permute_coords(node, pair, perm):
    """Permute node rows and pair rows and columns (coordinate axes are -2 / -3,-2)."""
    perm = torch.as_tensor(perm)
    return node[..., perm, :], pair[..., perm, :, :][..., perm, :]


@torch.no_grad()
def equivariance_errors(model: AFIN, task, perm, order) -> dict:
    """Relative errors of every equivariance / invariance identity for one task.

    ``perm`` permutes latent coordinates; ``order`` reorders the likelihood list.
    """
    perm_t = torch.as_tensor(perm)
    errs = {}
    base = model.encode(model.featurize([task]))
    moved = model.encode(model.featurize([task.permuted_coordinates(perm)]))
    expect = permute_coords(*base, perm)
    errs["encode"] = max(rel_err(moved.node, expect[0]), rel_err(moved.pair, expect[1]))

    merged = model.merge(*base)
    merged_moved = model.merge(*permute_coords(*base, perm))
    expect = permute_coords(*merged, perm)
    errs["merge"] = max(rel_err(merged_moved.node, expect[0]), rel_err(merged_moved.pair, expect[1]))

    out = model.forward([task])
    out_p = model.forward([task.permuted_coordinates(perm)])
    errs["decode"] = max(
        rel_err(out_p.mean, out.mean[:, perm_t]),
        rel_err(out_p.precision, out.precision[:, perm_t][:, :, perm_t]),
    )
    if out.flow is not None:
        errs["flow_context"] = max(
            rel_err(out_p.flow.c_node, out.flow.c_node[:, perm_t]),
            rel_err(out_p.flow.c_pair, out.flow.c_pair[:, perm_t][:, :, perm_t]),
            rel_err(out_p.flow.tau, out.flow.tau[:, perm_t]),
            rel_err(out_p.flow.log_scale, out.flow.log_scale[:, perm_t]),
        )

    out_o = model.forward([task.reordered_likelihoods(order)])
    errs["factor_order"] = max(rel_err(out_o.mean, out.mean), rel_err(out_o.precision, out.precision))
    if out.flow is not None:
        errs["factor_order"] = max(
            errs["factor_order"],
            rel_err(out_o.flow.c_node, out.flow.c_node),
            rel_err(out_o.flow.c_pair, out.flow.c_pair),
        )
    return errs


@torch.no_grad()
def numeric_jacobian_log_density(flow, eps: np.ndarray, h: float = 1e-4) -> tuple[float, float]:
    """``(log_prob(z), log N(eps) - log|det dz/deps|)`` using five-point differences on one task.

    The fourth-order stencil allows a step large enough that roundoff stays
    small even when the whitening scale makes ``z`` large.
    """
    d = eps.size
    x = torch.as_tensor(eps, dtype=torch.float64)[None, None]
    z, _ = flow.transform(x)
    J = np.empty((d, d))
    for j in range(d):
        e = torch.zeros_like(x)
        e[..., j] = h
        f = [flow.transform(x + k * e)[0][0, 0].numpy() for k in (-2, -1, 1, 2)]
        J[:, j] = (f[0] - 8 * f[1] + 8 * f[2] - f[3]) / (12 * h)
    base = -0.5 * d * np.log(2 * np.pi) - 0.5 * float(eps @ eps)
    return float(flow.log_prob(z)[0, 0]), base - float(np.linalg.slogdet(J)[1])


LOG_EPS = 1e-12


def assert_in_ranges(task, cfg: SimulatorConfig):
    """Hard check that every sampled parameter lies in its documented range."""
    d, n = task.d, task.N
    assert cfg.d_min <= d <= cfg.d_max and cfg.N_min <= n <= cfg.N_max
    p = task.prior
    th = p.theta
    assert p.factor_type.value in cfg.prior_types
    if p.factor_type is FactorType.DIAG_GAUSSIAN:
        lo, hi = sim.DIAG_GAUSSIAN_LOG_SCALE
        assert np.all((np.log(th["scale"]) >= lo - LOG_EPS) & (np.log(th["scale"]) <= hi + LOG_EPS))
    elif p.factor_type is FactorType.DIAG_STUDENT_T:
        lo, hi = sim.STUDENT_T_LOG_SCALE
        assert np.all((np.log(th["scale"]) >= lo - LOG_EPS) & (np.log(th["scale"]) <= hi + LOG_EPS))
        assert sim.STUDENT_T_DF[0] <= th["df"] <= sim.STUDENT_T_DF[1]
    elif p.factor_type is FactorType.DIAG_LAPLACE:
        lo, hi = sim.LAPLACE_LOG_SCALE
        assert np.all((np.log(th["scale"]) >= lo - LOG_EPS) & (np.log(th["scale"]) <= hi + LOG_EPS))
    else:
        assert np.linalg.eigvalsh(th["precision"]).min() >= sim.FULLRANK_RIDGE - 1e-12
    for f in task.likelihoods:
        assert f.factor_type.value in cfg.likelihood_types
        th = f.theta
        if "scale" in th:
            assert sim.NOISE_LOG_SCALE[0] - LOG_EPS <= math.log(th["scale"]) <= sim.NOISE_LOG_SCALE[1] + LOG_EPS
        if "df" in th:
            assert sim.NOISE_DF[0] <= th["df"] <= sim.NOISE_DF[1]
        if f.factor_type is FactorType.BINOMIAL_LOGIT:
            assert sim.TRIALS_RANGE[0] <= th["trials"] <= sim.TRIALS_RANGE[1]
            assert 0 <= f.observation <= th["trials"]
        if f.factor_type is FactorType.BERNOULLI_LOGIT:
            assert f.observation in (0, 1)
        if f.covariate is not None:
            assert f.covariate.shape == (d,) and np.all(np.isfinite(f.covariate))


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    """Store one PASS/FAIL line for the terminal summary and print it."""
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
