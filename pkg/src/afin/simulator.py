"""Simulated inference tasks for amortized training.

Every task is drawn in the order sizes -> prior -> z ~ prior -> likelihood
types -> covariates -> observations, so the stored latent is an exact
posterior draw for the stored observations.

Random streams are derived from a master seed plus integer labels
(:func:`rng_stream`), which makes a batch independent of evaluation order.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .factors import (
    LIKELIHOOD_TYPES,
    PRIOR_TYPES,
    FactorSpec,
    FactorType,
    TaskInstance,
    sample_from_factor,
    with_observation,
)

DESIGN_FAMILIES = ("iid", "diag_scale", "correlated", "student_t")

# Design-matrix spectrum and noise ranges. These are documented conventions,
# not published values.
SPECTRUM_RANGE = (0.2, 5.0)
DESIGN_T_DF = 4.0
NOISE_LOG_SCALE = (-1.0, 0.0)
NOISE_DF = (3.0, 8.0)
TRIALS_RANGE = (2, 8)

# Prior parameter ranges.
PRIOR_LOC_SCALE = 0.45
DIAG_GAUSSIAN_LOG_SCALE = (-0.8, 0.0)
STUDENT_T_LOG_SCALE = (-0.7, 0.0)
STUDENT_T_DF = (3.0, 8.0)
LAPLACE_LOG_SCALE = (-1.0, -0.05)
FULLRANK_FACTOR_SCALE = 0.3
FULLRANK_RIDGE = 0.5

# Purpose labels for derived streams.
PURPOSE_SIZES = 0
PURPOSE_TASK = 1


def rng_stream(seed: int, *labels: int) -> np.random.Generator:
    """Independent generator for ``(seed, *labels)``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(v) for v in labels)))


@dataclass
class SimulatorConfig:
    d_min: int = 1
    d_max: int = 16
    N_min: int = 1
    N_max: int = 256
    p_hard: float = 0.6
    alpha_d: float = 1.0
    alpha_N: float = 0.75
    homogeneous_prob: float = 0.5
    dirichlet_conc: float = 0.5
    design_family_probs: tuple[float, float, float, float] = (0.7, 0.1, 0.1, 0.1)
    base_scale_coeff: float = 0.9
    prior_types: tuple[str, ...] = field(default_factory=lambda: tuple(t.value for t in PRIOR_TYPES))
    likelihood_types: tuple[str, ...] = field(default_factory=lambda: tuple(t.value for t in LIKELIHOOD_TYPES))

    def __post_init__(self):
        self.design_family_probs = tuple(float(p) for p in self.design_family_probs)
        self.prior_types = tuple(FactorType(t).value for t in self.prior_types)
        self.likelihood_types = tuple(FactorType(t).value for t in self.likelihood_types)
        self.validate()

    def validate(self) -> None:
        if not 1 <= self.d_min <= self.d_max:
            raise ValueError("need 1 <= d_min <= d_max")
        if not 1 <= self.N_min <= self.N_max:
            raise ValueError("need 1 <= N_min <= N_max")
        for name in ("p_hard", "homogeneous_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        probs = np.asarray(self.design_family_probs)
        if probs.shape != (4,) or np.any(probs < 0) or not math.isclose(probs.sum(), 1.0, abs_tol=1e-9):
            raise ValueError("design_family_probs must be 4 non-negative numbers summing to 1")
        if self.dirichlet_conc <= 0 or self.base_scale_coeff <= 0:
            raise ValueError("dirichlet_conc and base_scale_coeff must be positive")
        if not self.prior_types or any(not FactorType(t).is_prior for t in self.prior_types):
            raise ValueError("prior_types must be a non-empty list of prior factor types")
        if not self.likelihood_types or any(not FactorType(t).is_likelihood for t in self.likelihood_types):
            raise ValueError("likelihood_types must be a non-empty list of likelihood factor types")

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["design_family_probs"] = list(self.design_family_probs)
        doc["prior_types"] = list(self.prior_types)
        doc["likelihood_types"] = list(self.likelihood_types)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "SimulatorConfig":
        return cls(**doc)


@dataclass(frozen=True)
class BatchSpec:
    B: int = 32
    K: int = 4

    def __post_init__(self):
        if self.B < 1 or self.K < 1:
            raise ValueError("B and K must be >= 1")


def size_marginals(cfg: SimulatorConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Supports and hard-biased marginal probabilities of ``d`` and ``N``.

    The hard-biased weight factorizes over ``d`` and ``N``, so the two are
    sampled independently from their normalized marginals.
    """
    ds = np.arange(cfg.d_min, cfg.d_max + 1)
    ns = np.arange(cfg.N_min, cfg.N_max + 1)
    wd = ((ds - cfg.d_min + 1) / (cfg.d_max - cfg.d_min + 1)) ** cfg.alpha_d
    wn = (cfg.N_min / ns) ** cfg.alpha_N
    return ds, wd / wd.sum(), ns, wn / wn.sum()


def sample_task_sizes(cfg: SimulatorConfig, rng: np.random.Generator) -> tuple[int, int]:
    ds, pd, ns, pn = size_marginals(cfg)
    if rng.random() < cfg.p_hard:
        d = rng.choice(ds, p=pd)
        n = rng.choice(ns, p=pn)
    else:
        d = rng.integers(cfg.d_min, cfg.d_max + 1)
        n = rng.integers(cfg.N_min, cfg.N_max + 1)
    return int(d), int(n)


def sample_prior_factor(d: int, rng: np.random.Generator, cfg: SimulatorConfig | None = None) -> FactorSpec:
    types = cfg.prior_types if cfg is not None else tuple(t.value for t in PRIOR_TYPES)
    ft = FactorType(types[rng.integers(len(types))])
    loc = PRIOR_LOC_SCALE * rng.standard_normal(d)
    if ft is FactorType.DIAG_GAUSSIAN:
        scale = np.exp(rng.uniform(*DIAG_GAUSSIAN_LOG_SCALE, size=d))
        return FactorSpec(ft, {"loc": loc, "scale": scale})
    if ft is FactorType.FULLRANK_GAUSSIAN:
        m = FULLRANK_FACTOR_SCALE * rng.standard_normal((d, d))
        prec = m @ m.T / d + FULLRANK_RIDGE * np.eye(d)
        return FactorSpec(ft, {"loc": loc, "precision": 0.5 * (prec + prec.T)})
    if ft is FactorType.DIAG_STUDENT_T:
        scale = np.exp(rng.uniform(*STUDENT_T_LOG_SCALE, size=d))
        df = rng.uniform(*STUDENT_T_DF)
        return FactorSpec(ft, {"loc": loc, "scale": scale, "df": df})
    scale = np.exp(rng.uniform(*LAPLACE_LOG_SCALE, size=d))
    return FactorSpec(ft, {"loc": loc, "scale": scale})


def sample_likelihood_types(n: int, cfg: SimulatorConfig, rng: np.random.Generator) -> list[FactorType]:
    """Homogeneous with probability ``homogeneous_prob``, else a Dirichlet-multinomial mixture."""
    types = [FactorType(t) for t in cfg.likelihood_types]
    homogeneous = rng.random() < cfg.homogeneous_prob
    if homogeneous or n == 1 or len(types) == 1:
        return [types[rng.integers(len(types))]] * n
    ks = np.arange(2, min(len(types), n) + 1)
    pk = np.exp(-(ks - 2.0))
    k = int(rng.choice(ks, p=pk / pk.sum()))
    chosen = rng.choice(len(types), size=k, replace=False)
    weights = rng.dirichlet(np.full(k, cfg.dirichlet_conc))
    counts = 1 + rng.multinomial(n - k, weights)
    out = [types[c] for c, cnt in zip(chosen, counts) for _ in range(cnt)]
    return [out[i] for i in rng.permutation(n)]


def _haar_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def sample_design_matrix(
    n: int, d: int, cfg: SimulatorConfig, rng: np.random.Generator, family: str | None = None
) -> tuple[np.ndarray, str]:
    """Design matrix ``X`` (``n x d``) and the family it was drawn from."""
    if family is None:
        family = DESIGN_FAMILIES[rng.choice(4, p=np.asarray(cfg.design_family_probs))]
    base = cfg.base_scale_coeff / math.sqrt(d)
    g = rng.standard_normal((n, d))
    if family == "iid":
        return base * g, family
    lo, hi = SPECTRUM_RANGE
    spectrum = np.exp(rng.uniform(math.log(lo), math.log(hi), size=d))
    rows = g * np.sqrt(spectrum)
    if family == "diag_scale":
        return base * rows, family
    rows = rows @ _haar_orthogonal(d, rng).T
    if family == "correlated":
        return base * rows, family
    if family != "student_t":
        raise ValueError(f"unknown design family {family!r}")
    weights = np.sqrt(DESIGN_T_DF / rng.chisquare(DESIGN_T_DF, size=n))
    return base * rows * weights[:, None], family


def _likelihood_template(ft: FactorType, x: np.ndarray | None, d: int, rng: np.random.Generator) -> FactorSpec:
    """Factor with sampled parameters and a placeholder observation."""
    if ft is FactorType.GAUSSIAN:
        return FactorSpec(ft, {"scale": math.exp(rng.uniform(*NOISE_LOG_SCALE))}, None, np.zeros(d))
    if ft is FactorType.LIN_GAUSSIAN:
        return FactorSpec(ft, {"scale": math.exp(rng.uniform(*NOISE_LOG_SCALE))}, x, 0.0)
    if ft is FactorType.LIN_STUDENT_T:
        theta = {"scale": math.exp(rng.uniform(*NOISE_LOG_SCALE)), "df": rng.uniform(*NOISE_DF)}
        return FactorSpec(ft, theta, x, 0.0)
    if ft is FactorType.BERNOULLI_LOGIT:
        return FactorSpec(ft, {}, x, 0)
    trials = int(rng.integers(TRIALS_RANGE[0], TRIALS_RANGE[1] + 1))
    return FactorSpec(ft, {"trials": trials}, x, 0)


def simulate_task(
    cfg: SimulatorConfig, rng: np.random.Generator, d: int | None = None, n: int | None = None
) -> TaskInstance:
    """Draw one task; ``d`` and ``n`` may be fixed by the caller (micro-batch sharing)."""
    if d is None or n is None:
        d0, n0 = sample_task_sizes(cfg, rng)
        d = d0 if d is None else d
        n = n0 if n is None else n
    prior = sample_prior_factor(d, rng, cfg)
    z = sample_from_factor(prior, rng)
    types = sample_likelihood_types(n, cfg, rng)
    X = None
    if any(t.has_covariate for t in types):
        X, _ = sample_design_matrix(n, d, cfg, rng)
    likelihoods = []
    for i, ft in enumerate(types):
        template = _likelihood_template(ft, X[i] if ft.has_covariate else None, d, rng)
        likelihoods.append(with_observation(template, sample_from_factor(template, rng, z)))
    return TaskInstance(d, prior, likelihoods, z)


def simulate_microbatch(cfg: SimulatorConfig, seed: int, step: int, micro_batch: int, size: int) -> list[TaskInstance]:
    """``size`` tasks sharing one ``(d, N)``, each from its own derived stream."""
    d, n = sample_task_sizes(cfg, rng_stream(seed, step, micro_batch, PURPOSE_SIZES))
    return [
        simulate_task(cfg, rng_stream(seed, step, micro_batch, PURPOSE_TASK, b), d, n)
        for b in range(size)
    ]


def simulate_batch(cfg: SimulatorConfig, seed: int, step: int, spec: BatchSpec) -> list[list[TaskInstance]]:
    return [simulate_microbatch(cfg, seed, step, k, spec.B) for k in range(spec.K)]
