"""Importance-sampling refinement, posterior-accuracy metrics and MCMC references."""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .factors import (
    GaussianDistribution,
    TaskInstance,
    conjugate_posterior_oracle,
    is_conjugate,
    log_unnormalized_posterior,
)


class DegenerateProposalError(ValueError):
    """Every importance weight is zero."""


# --- SNIS ------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightedSampleSet:
    samples: np.ndarray  # (S, d)
    log_raw_weights: np.ndarray  # (S,)
    weights: np.ndarray  # (S,), normalized

    @property
    def size(self) -> int:
        return self.weights.size

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights ** 2))


def normalize_log_weights(log_w) -> np.ndarray:
    """Normalized weights ``exp(log_w - logsumexp(log_w))``."""
    log_w = np.asarray(log_w, dtype=np.float64)
    if np.any(np.isnan(log_w)) or np.any(log_w == np.inf):
        raise ValueError("log weights must be finite or -inf")
    if not np.any(np.isfinite(log_w)):
        raise DegenerateProposalError("all importance weights are zero")
    w = np.exp(log_w - np.max(log_w))
    return w / w.sum()


def weighted_sample_set(samples, log_target, log_proposal) -> WeightedSampleSet:
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    log_w = np.asarray(log_target, dtype=np.float64) - np.asarray(log_proposal, dtype=np.float64)
    log_w = np.where(np.isnan(log_w), -np.inf, log_w)
    return WeightedSampleSet(samples, log_w, normalize_log_weights(log_w))


def snis(
    proposal,
    log_target: Callable[[np.ndarray], np.ndarray],
    S: int,
    rng: np.random.Generator,
) -> WeightedSampleSet:
    """Self-normalized importance sampling.

    Parameters
    ----------
    proposal
        Object with ``sample(n, rng) -> (n, d)`` and ``log_prob(z) -> (n,)``,
        for example :class:`~afin.factors.GaussianDistribution`.
    log_target : callable
        Unnormalized log target on a ``(S, d)`` batch.
    S : int
        Number of proposal draws, at least 2.
    rng : numpy Generator
    """
    if S < 2:
        raise ValueError("SNIS needs S >= 2")
    z = proposal.sample(S, rng)
    with np.errstate(invalid="ignore", over="ignore"):
        return weighted_sample_set(z, log_target(z), proposal.log_prob(z))


# --- moments and distances -------------------------------------------------------


def weighted_moments(ws: WeightedSampleSet | tuple) -> tuple[np.ndarray, np.ndarray]:
    """Weighted mean and covariance ``sum_s w_s (z_s - mu)(z_s - mu)^T`` (no bias correction)."""
    if isinstance(ws, WeightedSampleSet):
        z, w = ws.samples, ws.weights
    else:
        z, w = ws
    z = np.atleast_2d(z)
    mean = w @ z
    c = z - mean
    return mean, (c * w[:, None]).T @ c


def sample_moments(samples) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and unbiased ``1/(S-1)`` covariance."""
    z = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    mean = z.mean(axis=0)
    c = z - mean
    return mean, c.T @ c / (z.shape[0] - 1)


def metric_m1(mean_a, mean_b) -> float:
    return float(np.linalg.norm(np.asarray(mean_a) - np.asarray(mean_b)))


def metric_m2(cov_a, cov_b) -> float:
    return float(np.linalg.norm(np.asarray(cov_a) - np.asarray(cov_b), ord="fro"))


def random_directions(R: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """``R`` directions uniform on the unit sphere in ``R^d``."""
    g = rng.standard_normal((R, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def w2_squared_1d(x, y, wx=None, wy=None) -> float:
    """Squared 2-Wasserstein distance between weighted 1-D empirical measures.

    Both quantile functions are step functions; the integral of their squared
    difference is summed over the merged breakpoints of the two CDFs.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if wx is None and wy is None and x.size == y.size:
        diff = np.sort(x) - np.sort(y)
        return float(np.mean(diff * diff))
    wx = np.full(x.size, 1.0 / x.size) if wx is None else np.asarray(wx, dtype=np.float64)
    wy = np.full(y.size, 1.0 / y.size) if wy is None else np.asarray(wy, dtype=np.float64)
    ix, iy = np.argsort(x, kind="stable"), np.argsort(y, kind="stable")
    xs, ys = x[ix], y[iy]
    cx = np.cumsum(wx[ix])
    cy = np.cumsum(wy[iy])
    cx /= cx[-1]
    cy /= cy[-1]
    t = np.union1d(cx, cy)
    dt = np.diff(np.concatenate([[0.0], t]))
    mid = t - 0.5 * dt
    qx = xs[np.minimum(np.searchsorted(cx, mid, side="left"), xs.size - 1)]
    qy = ys[np.minimum(np.searchsorted(cy, mid, side="left"), ys.size - 1)]
    return float(np.sum(dt * (qx - qy) ** 2))


def sliced_w2(
    a,
    b,
    R: int = 128,
    rng: np.random.Generator | None = None,
    directions: np.ndarray | None = None,
    weights_a=None,
    weights_b=None,
) -> float:
    """Sliced 2-Wasserstein distance via random 1-D projections.

    Unweighted sets of unequal size are matched by subsampling the larger one
    without replacement. Weighted sets use weighted 1-D quantile matching.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets have different dimensions")
    if directions is None:
        if rng is None:
            raise ValueError("need rng or directions")
        directions = random_directions(R, a.shape[1], rng)
    if weights_a is None and weights_b is None and a.shape[0] != b.shape[0]:
        if rng is None:
            rng = np.random.default_rng(0)
        n = min(a.shape[0], b.shape[0])
        if a.shape[0] > n:
            a = a[rng.choice(a.shape[0], n, replace=False)]
        else:
            b = b[rng.choice(b.shape[0], n, replace=False)]
        if a.shape[0] != b.shape[0]:
            raise ValueError("sample counts differ after subsampling")
    pa = a @ directions.T
    pb = b @ directions.T
    total = sum(w2_squared_1d(pa[:, r], pb[:, r], weights_a, weights_b) for r in range(directions.shape[0]))
    return math.sqrt(total / directions.shape[0])


# --- diagnostics -----------------------------------------------------------------

PARETO_UNDEFINED = float("nan")


def _gpd_fit(x: np.ndarray) -> float:
    """Zhang-Stephens profile estimate of the GPD shape for sorted exceedances ``x``,
    shrunk toward 0.5 by a weakly informative prior."""
    n = x.size
    m = 30 + int(math.sqrt(n))
    b = 1.0 - np.sqrt(m / (np.arange(1, m + 1) - 0.5))
    b /= 3.0 * x[int(n / 4 + 0.5) - 1]
    b += 1.0 / x[-1]
    k = np.log1p(-b[:, None] * x).mean(axis=1)
    prof = n * (np.log(-b / k) - k - 1.0)
    w = 1.0 / np.exp(prof - prof[:, None]).sum(axis=1)
    keep = w >= 10 * np.finfo(float).eps
    w, b = w[keep], b[keep]
    w /= w.sum()
    b_post = np.sum(b * w)
    k_post = np.log1p(-b_post * x).mean()
    return float((n * k_post + 10 * 0.5) / (n + 10))


def pareto_k(log_raw_weights) -> float:
    """Generalized-Pareto shape of the upper tail of the importance ratios.

    The tail holds the ``ceil(min(0.2 S, 3 sqrt(S)))`` largest ratios, taken
    as exceedances over the next-largest ratio. A tail without variation
    returns ``-inf``; fewer than five tail points return ``nan``.
    """
    lw = np.asarray(log_raw_weights, dtype=np.float64)
    lw = lw[np.isfinite(lw)]
    S = lw.size
    M = int(math.ceil(min(0.2 * S, 3.0 * math.sqrt(S))))
    if M < 5 or S <= M:
        return PARETO_UNDEFINED
    lw = np.sort(lw - lw.max())
    tail = lw[-M:]
    cutoff = lw[-M - 1]
    if tail[-1] == cutoff or np.ptp(tail) == 0.0:
        return float("-inf")
    x = np.exp(tail) - np.exp(cutoff)
    if x[-1] <= 0.0:
        return float("-inf")
    x = np.maximum(x, np.finfo(float).tiny)
    return _gpd_fit(x)


def weight_diagnostics(
    ws: WeightedSampleSet,
    log_target: Callable[[np.ndarray], np.ndarray],
    ref_samples,
) -> tuple[float, float, float]:
    """``(max_weight, entropy_ratio, energy_gap)`` for a weighted sample set.

    ``entropy_ratio`` is ``nan`` when ``S = 1``.
    """
    w = ws.weights
    S = w.size
    w_max = float(w.max())
    if S == 1:
        h_ratio = float("nan")
    elif np.all(w == w[0]):
        # summing S rounded terms drifts a few ulps off the exact value
        h_ratio = 1.0
    else:
        nz = w[w > 0]
        h_ratio = float(min(1.0, max(0.0, -np.sum(nz * np.log(nz)) / math.log(S))))
    energy = float(w @ -log_target(ws.samples))
    ref_energy = float(np.mean(-log_target(np.atleast_2d(ref_samples))))
    return w_max, h_ratio, energy - ref_energy


@dataclass
class PosteriorMetrics:
    m1: float
    m2: float
    sw2: float
    pareto_k: float
    max_weight: float
    entropy_ratio: float
    energy_gap: float

    def to_json(self) -> dict:
        return asdict(self)


# --- MCMC reference ----------------------------------------------------------------


@dataclass
class MCMCResult:
    samples: np.ndarray
    acceptance_rate: float
    warning: bool
    proposal_chol: np.ndarray
    backend: str
    label: str = "adaptive random-walk Metropolis"


def mcmc_reference(
    task: TaskInstance,
    iterations: int,
    warmup: int,
    rng: np.random.Generator,
    init: np.ndarray | None = None,
    windows: int = 20,
    target_accept: float = 0.234,
) -> MCMCResult:
    """Adaptive random-walk Metropolis targeting the unnormalized posterior.

    Warmup runs in ``windows`` chunks. After each chunk the proposal
    covariance is reset to ``2.38^2 / d`` times the covariance of the
    warmup draws so far (second half only), with a Robbins-Monro factor
    steering the acceptance rate toward ``target_accept``. The proposal is
    then frozen for the ``iterations`` returned draws.
    """
    packed = kernels.pack_task(task)
    d = task.d
    z = np.array(task.prior.theta["loc"] if init is None else init, dtype=np.float64)
    lp = float(kernels.log_posterior_batch(packed, z[None])[0])
    if not np.isfinite(lp):
        raise ValueError("initial state has zero posterior density")
    base = np.eye(d) * (0.5 / math.sqrt(d))
    log_scale = 0.0
    history = []
    sizes = np.full(windows, warmup // max(windows, 1), dtype=int) if windows else np.zeros(0, int)
    if windows:
        sizes[: warmup - sizes.sum()] += 1
    for k, n in enumerate(sizes):
        if n == 0:
            continue
        chol = math.exp(log_scale) * base
        eps = rng.standard_normal((n, d))
        logu = np.log(rng.random(n))
        draws, lp, acc = kernels.rwm_run(packed, z, lp, chol, eps, logu)
        z = draws[-1].copy()
        history.append(draws)
        log_scale += (acc / n - target_accept) / math.sqrt(k + 1)
        pool = np.concatenate(history)
        pool = pool[pool.shape[0] // 2:]
        if pool.shape[0] > 2 * d + 10:
            cov = np.atleast_2d(np.cov(pool, rowvar=False)) + 1e-10 * np.eye(d)
            try:
                base = np.linalg.cholesky(cov * 2.38 ** 2 / d)
            except np.linalg.LinAlgError:
                pass
    chol = math.exp(log_scale) * base
    eps = rng.standard_normal((iterations, d))
    logu = np.log(rng.random(iterations))
    samples, _, acc = kernels.rwm_run(packed, z, lp, chol, eps, logu)
    rate = acc / max(iterations, 1)
    warn = not 0.05 <= rate <= 0.95
    if warn:
        warnings.warn(f"MCMC acceptance rate {rate:.3f} outside [0.05, 0.95]", RuntimeWarning, stacklevel=2)
    return MCMCResult(samples, rate, warn, chol, kernels.BACKEND)


# --- evaluation driver -------------------------------------------------------------

METHODS = ("afin", "afin+snis", "mcmc", "oracle")


@dataclass
class Reference:
    mean: np.ndarray
    cov: np.ndarray
    samples: np.ndarray
    kind: str


def reference_for(task: TaskInstance, n_samples: int, rng: np.random.Generator, mcmc_iters: int) -> Reference:
    """Exact closed-form posterior when available, otherwise a long MCMC run."""
    if is_conjugate(task):
        oracle = conjugate_posterior_oracle(task)
        return Reference(oracle.mean, oracle.covariance, oracle.sample(n_samples, rng), "oracle")
    run = mcmc_reference(task, mcmc_iters, max(mcmc_iters // 10, 1000), rng)
    thin = max(1, run.samples.shape[0] // n_samples)
    samples = run.samples[::thin][:n_samples]
    mean, cov = sample_moments(run.samples)
    return Reference(mean, cov, samples, "mcmc")


def _metrics_from_weighted(ws, ref: Reference, log_target, directions, rng, with_pareto) -> PosteriorMetrics:
    mean, cov = weighted_moments(ws)
    uniform = np.all(ws.weights == ws.weights[0])
    if uniform:
        mean, cov = sample_moments(ws.samples) if ws.size > 1 else (mean, cov)
        sw2 = sliced_w2(ws.samples, ref.samples, directions=directions, rng=rng)
    else:
        sw2 = sliced_w2(ws.samples, ref.samples, directions=directions, weights_a=ws.weights)
    w_max, h_ratio, gap = weight_diagnostics(ws, log_target, ref.samples)
    k = pareto_k(ws.log_raw_weights) if with_pareto else float("nan")
    return PosteriorMetrics(
        metric_m1(mean, ref.mean), metric_m2(cov, ref.cov), sw2, k, w_max, h_ratio, gap
    )


def evaluate_task(
    task: TaskInstance,
    method: str,
    budget: int,
    ref: Reference,
    rng: np.random.Generator,
    directions: np.ndarray,
    proposal: GaussianDistribution | None = None,
) -> PosteriorMetrics:
    """Metrics of one method at one budget against a reference.

    ``afin`` and ``afin+snis`` draw ``budget`` samples from ``proposal``;
    ``mcmc`` runs ``budget`` post-warmup iterations; ``oracle`` draws
    ``budget`` samples from the closed-form posterior.
    """
    def log_target(z):
        return log_unnormalized_posterior(task, z)

    if method in ("afin", "afin+snis"):
        if proposal is None:
            raise ValueError(f"{method} needs a proposal")
        ws = snis(proposal, log_target, budget, rng)
        if method == "afin":
            uniform = np.full(budget, 1.0 / budget)
            ws = WeightedSampleSet(ws.samples, ws.log_raw_weights, uniform)
        return _metrics_from_weighted(ws, ref, log_target, directions, rng, with_pareto=True)
    if method == "mcmc":
        run = mcmc_reference(task, budget, max(budget // 10, 500), rng)
        ws = WeightedSampleSet(run.samples, np.zeros(budget), np.full(budget, 1.0 / budget))
        return _metrics_from_weighted(ws, ref, log_target, directions, rng, with_pareto=False)
    if method == "oracle":
        if not is_conjugate(task):
            raise ValueError("oracle method needs a conjugate task")
        oracle = conjugate_posterior_oracle(task)
        z = oracle.sample(budget, rng)
        ws = WeightedSampleSet(z, np.zeros(budget), np.full(budget, 1.0 / budget))
        out = _metrics_from_weighted(ws, ref, log_target, directions, rng, with_pareto=False)
        out.m1 = metric_m1(oracle.mean, ref.mean)
        out.m2 = metric_m2(oracle.covariance, ref.cov)
        return out
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")


def run_evaluation(
    tasks: Sequence[TaskInstance],
    methods: Sequence[str],
    budgets: Sequence[int],
    proposals: Sequence[GaussianDistribution] | None,
    seed: int,
    R: int = 128,
    ref_samples: int = 10_000,
    ref_mcmc_iters: int = 200_000,
    notice: Callable[[str], None] | None = None,
) -> list[dict]:
    """Report rows for every (task, method, budget); oracle rows on non-conjugate tasks are skipped."""
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {METHODS}")
    rows = []
    for i, task in enumerate(tasks):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        ref = reference_for(task, ref_samples, rng, ref_mcmc_iters)
        directions = random_directions(R, task.d, np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i, 1))))
        for method in methods:
            if method == "oracle" and not is_conjugate(task):
                if notice is not None:
                    notice(f"task {i}: oracle skipped (non-conjugate task)")
                continue
            for budget in budgets:
                sub = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i, 2, METHODS.index(method), budget)))
                start = time.perf_counter()
                metrics = evaluate_task(
                    task, method, int(budget), ref, sub, directions,
                    proposals[i] if proposals is not None else None,
                )
                rows.append({
                    "task_id": i,
                    "method": method,
                    "budget": int(budget),
                    **metrics.to_json(),
                    "wallclock_s": time.perf_counter() - start,
                    "reference": ref.kind,
                })
    return rows
