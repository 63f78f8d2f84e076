"""Typed factors: densities, exact sampling and the conjugate Gaussian oracle.

A task is one prior factor over ``z in R^d`` and ``N >= 1`` likelihood
factors, each carrying its own observation. Every density here is evaluated
in log space and in float64.

Parameter bundles (``theta``) per factor type:

================== ============================== =====================
type               theta                          covariate / observation
================== ============================== =====================
diag_gaussian      loc[d], scale[d]               -
fullrank_gaussian  loc[d], precision[d, d]        -
diag_student_t     loc[d], scale[d], df           -
diag_laplace       loc[d], scale[d]               -
gaussian           scale                          y[d]  (y = z + eps)
lin_gaussian       scale                          x[d], y real
bernoulli_logit    (none)                         x[d], y in {0, 1}
binomial_logit     trials                         x[d], y in {0..trials}
lin_student_t      scale, df                      x[d], y real
================== ============================== =====================
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import linalg, special

LOG_2PI = math.log(2.0 * math.pi)


class FactorError(ValueError):
    """A factor or task violates its shape or support constraints."""


class UnsupportedTaskError(ValueError):
    """The requested operation is not defined for this task (e.g. non-conjugate)."""


class FactorType(str, enum.Enum):
    DIAG_GAUSSIAN = "diag_gaussian"
    FULLRANK_GAUSSIAN = "fullrank_gaussian"
    DIAG_STUDENT_T = "diag_student_t"
    DIAG_LAPLACE = "diag_laplace"
    GAUSSIAN = "gaussian"
    LIN_GAUSSIAN = "lin_gaussian"
    BERNOULLI_LOGIT = "bernoulli_logit"
    BINOMIAL_LOGIT = "binomial_logit"
    LIN_STUDENT_T = "lin_student_t"

    @property
    def is_prior(self) -> bool:
        return self in PRIOR_TYPES

    @property
    def is_likelihood(self) -> bool:
        return self in LIKELIHOOD_TYPES

    @property
    def has_covariate(self) -> bool:
        return self in REGRESSION_TYPES


PRIOR_TYPES = (
    FactorType.DIAG_GAUSSIAN,
    FactorType.FULLRANK_GAUSSIAN,
    FactorType.DIAG_STUDENT_T,
    FactorType.DIAG_LAPLACE,
)
LIKELIHOOD_TYPES = (
    FactorType.GAUSSIAN,
    FactorType.LIN_GAUSSIAN,
    FactorType.BERNOULLI_LOGIT,
    FactorType.BINOMIAL_LOGIT,
    FactorType.LIN_STUDENT_T,
)
REGRESSION_TYPES = (
    FactorType.LIN_GAUSSIAN,
    FactorType.BERNOULLI_LOGIT,
    FactorType.BINOMIAL_LOGIT,
    FactorType.LIN_STUDENT_T,
)

_THETA_KEYS = {
    FactorType.DIAG_GAUSSIAN: ("loc", "scale"),
    FactorType.FULLRANK_GAUSSIAN: ("loc", "precision"),
    FactorType.DIAG_STUDENT_T: ("loc", "scale", "df"),
    FactorType.DIAG_LAPLACE: ("loc", "scale"),
    FactorType.GAUSSIAN: ("scale",),
    FactorType.LIN_GAUSSIAN: ("scale",),
    FactorType.BERNOULLI_LOGIT: (),
    FactorType.BINOMIAL_LOGIT: ("trials",),
    FactorType.LIN_STUDENT_T: ("scale", "df"),
}


@dataclass(frozen=True, eq=False)
class FactorSpec:
    """One typed factor.

    Parameters
    ----------
    factor_type : FactorType
    theta : dict
        Type-dependent parameters, see the module docstring.
    covariate : ndarray, optional
        Row ``x`` of the design matrix (regression likelihoods only).
    observation : float, int or ndarray, optional
        ``y``; absent for priors, a length-``d`` vector for ``gaussian``.
    """

    factor_type: FactorType
    theta: dict[str, Any]
    covariate: np.ndarray | None = None
    observation: Any = None
    _cache: dict[str, Any] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        ft = FactorType(self.factor_type)
        object.__setattr__(self, "factor_type", ft)
        theta = dict(self.theta)
        if set(theta) != set(_THETA_KEYS[ft]):
            raise FactorError(f"{ft.value}: expected theta keys {_THETA_KEYS[ft]}, got {tuple(theta)}")
        for key in ("loc", "scale", "precision"):
            if key in theta:
                theta[key] = np.asarray(theta[key], dtype=np.float64)
        if "df" in theta:
            theta["df"] = float(theta["df"])
            if not theta["df"] > 0:
                raise FactorError(f"{ft.value}: df must be > 0")
        if "trials" in theta:
            trials = int(theta["trials"])
            if trials != theta["trials"] or trials < 1:
                raise FactorError("binomial_logit: trials must be an integer >= 1")
            theta["trials"] = trials
        object.__setattr__(self, "theta", theta)

        if ft.is_prior:
            self._check_prior(theta)
        else:
            self._check_likelihood(theta)

    def _check_prior(self, theta):
        ft = self.factor_type
        if self.observation is not None or self.covariate is not None:
            raise FactorError(f"{ft.value}: prior factors take no observation or covariate")
        loc = theta["loc"]
        if loc.ndim != 1 or loc.size == 0:
            raise FactorError(f"{ft.value}: loc must be a non-empty vector")
        if not np.all(np.isfinite(loc)):
            raise FactorError(f"{ft.value}: loc must be finite")
        d = loc.size
        if ft is FactorType.FULLRANK_GAUSSIAN:
            prec = theta["precision"]
            if prec.shape != (d, d):
                raise FactorError(f"fullrank_gaussian: precision must be {d}x{d}")
            if not np.array_equal(prec, prec.T):
                raise FactorError("fullrank_gaussian: precision must be symmetric")
            try:
                chol = np.linalg.cholesky(prec)
            except np.linalg.LinAlgError as exc:
                raise FactorError("fullrank_gaussian: precision must be positive definite") from exc
            self._cache["chol"] = chol
            self._cache["half_logdet"] = float(np.sum(np.log(np.diag(chol))))
        else:
            scale = theta["scale"]
            if scale.shape != (d,):
                raise FactorError(f"{ft.value}: scale must have shape ({d},)")
            if not np.all(scale > 0) or not np.all(np.isfinite(scale)):
                raise FactorError(f"{ft.value}: scale must be positive and finite")

    def _check_likelihood(self, theta):
        ft = self.factor_type
        if "scale" in theta:
            scale = theta["scale"]
            if scale.ndim != 0 or not scale > 0 or not np.isfinite(scale):
                raise FactorError(f"{ft.value}: scale must be a positive scalar")
            theta["scale"] = float(scale)
        if self.observation is None:
            raise FactorError(f"{ft.value}: likelihood factors need an observation")
        if ft is FactorType.GAUSSIAN:
            if self.covariate is not None:
                raise FactorError("gaussian: takes a vector observation, not a covariate")
            y = np.asarray(self.observation, dtype=np.float64)
            if y.ndim != 1 or y.size == 0 or not np.all(np.isfinite(y)):
                raise FactorError("gaussian: observation must be a finite vector")
            object.__setattr__(self, "observation", y)
            return
        if self.covariate is None:
            raise FactorError(f"{ft.value}: missing covariate row")
        x = np.asarray(self.covariate, dtype=np.float64)
        if x.ndim != 1 or x.size == 0 or not np.all(np.isfinite(x)):
            raise FactorError(f"{ft.value}: covariate must be a finite vector")
        object.__setattr__(self, "covariate", x)
        y = self.observation
        if ft in (FactorType.BERNOULLI_LOGIT, FactorType.BINOMIAL_LOGIT):
            upper = 1 if ft is FactorType.BERNOULLI_LOGIT else theta["trials"]
            if isinstance(y, (float, np.floating)) and float(y) != int(y):
                raise FactorError(f"{ft.value}: observation must be an integer")
            y = int(y)
            if not 0 <= y <= upper:
                raise FactorError(f"{ft.value}: observation {y} outside {{0..{upper}}}")
        else:
            y = float(y)
            if not math.isfinite(y):
                raise FactorError(f"{ft.value}: observation must be finite")
        object.__setattr__(self, "observation", y)

    @property
    def dim(self) -> int:
        if self.factor_type.is_prior:
            return int(self.theta["loc"].size)
        if self.factor_type is FactorType.GAUSSIAN:
            return int(self.observation.size)
        return int(self.covariate.size)

    def permuted(self, perm: Sequence[int]) -> "FactorSpec":
        """Relabel latent coordinates: new coordinate ``k`` is old ``perm[k]``."""
        perm = np.asarray(perm)
        theta = dict(self.theta)
        for key in ("loc", "scale"):
            if key in theta and np.ndim(theta[key]) == 1:
                theta[key] = theta[key][perm]
        if "precision" in theta:
            theta["precision"] = theta["precision"][np.ix_(perm, perm)]
        x = None if self.covariate is None else self.covariate[perm]
        y = self.observation
        if self.factor_type is FactorType.GAUSSIAN:
            y = y[perm]
        return FactorSpec(self.factor_type, theta, x, y)

    def to_json(self) -> dict:
        theta = {}
        for key, val in self.theta.items():
            theta[key] = val.tolist() if isinstance(val, np.ndarray) else val
        out: dict[str, Any] = {"type": self.factor_type.value, "theta": theta}
        if self.covariate is not None:
            out["x"] = self.covariate.tolist()
        if self.observation is not None:
            y = self.observation
            out["y"] = y.tolist() if isinstance(y, np.ndarray) else y
        return out

    @classmethod
    def from_json(cls, doc: dict) -> "FactorSpec":
        return cls(FactorType(doc["type"]), doc.get("theta", {}), doc.get("x"), doc.get("y"))


def diag_gaussian(loc, scale) -> FactorSpec:
    return FactorSpec(FactorType.DIAG_GAUSSIAN, {"loc": loc, "scale": scale})


def fullrank_gaussian(loc, precision) -> FactorSpec:
    return FactorSpec(FactorType.FULLRANK_GAUSSIAN, {"loc": loc, "precision": precision})


def diag_student_t(loc, scale, df) -> FactorSpec:
    return FactorSpec(FactorType.DIAG_STUDENT_T, {"loc": loc, "scale": scale, "df": df})


def diag_laplace(loc, scale) -> FactorSpec:
    return FactorSpec(FactorType.DIAG_LAPLACE, {"loc": loc, "scale": scale})


def gaussian_obs(y, scale) -> FactorSpec:
    return FactorSpec(FactorType.GAUSSIAN, {"scale": scale}, None, y)


def lin_gaussian(x, y, scale) -> FactorSpec:
    return FactorSpec(FactorType.LIN_GAUSSIAN, {"scale": scale}, x, y)


def bernoulli_logit(x, y) -> FactorSpec:
    return FactorSpec(FactorType.BERNOULLI_LOGIT, {}, x, y)


def binomial_logit(x, y, trials) -> FactorSpec:
    return FactorSpec(FactorType.BINOMIAL_LOGIT, {"trials": trials}, x, y)


def lin_student_t(x, y, scale, df) -> FactorSpec:
    return FactorSpec(FactorType.LIN_STUDENT_T, {"scale": scale, "df": df}, x, y)


@dataclass(frozen=True, eq=False)
class TaskInstance:
    """A complete inference problem: one prior and ``N >= 1`` likelihoods."""

    d: int
    prior: FactorSpec
    likelihoods: tuple[FactorSpec, ...]
    latent: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "likelihoods", tuple(self.likelihoods))
        if int(self.d) != self.d or self.d < 1:
            raise FactorError("d must be a positive integer")
        if not self.prior.factor_type.is_prior:
            raise FactorError(f"{self.prior.factor_type.value} is not a prior type")
        if self.prior.dim != self.d:
            raise FactorError(f"prior has dimension {self.prior.dim}, task has d={self.d}")
        if len(self.likelihoods) < 1:
            raise FactorError("a task needs at least one likelihood factor")
        for n, lik in enumerate(self.likelihoods):
            if not lik.factor_type.is_likelihood:
                raise FactorError(f"likelihood {n}: {lik.factor_type.value} is not a likelihood type")
            if lik.dim != self.d:
                raise FactorError(f"likelihood {n} has dimension {lik.dim}, task has d={self.d}")
        if self.latent is not None:
            z = np.asarray(self.latent, dtype=np.float64)
            if z.shape != (self.d,):
                raise FactorError(f"latent must have shape ({self.d},)")
            object.__setattr__(self, "latent", z)

    @property
    def N(self) -> int:
        return len(self.likelihoods)

    @property
    def factors(self) -> tuple[FactorSpec, ...]:
        return (self.prior,) + self.likelihoods

    def permuted_coordinates(self, perm: Sequence[int]) -> "TaskInstance":
        perm = np.asarray(perm)
        z = None if self.latent is None else self.latent[perm]
        return TaskInstance(self.d, self.prior.permuted(perm), [f.permuted(perm) for f in self.likelihoods], z)

    def reordered_likelihoods(self, order: Sequence[int]) -> "TaskInstance":
        return TaskInstance(self.d, self.prior, [self.likelihoods[i] for i in order], self.latent)

    def to_json(self) -> dict:
        doc: dict[str, Any] = {
            "d": int(self.d),
            "prior": self.prior.to_json(),
            "likelihoods": [f.to_json() for f in self.likelihoods],
        }
        if self.latent is not None:
            doc["z"] = self.latent.tolist()
        return doc

    def dumps(self) -> str:
        return json.dumps(self.to_json(), separators=(",", ":"))

    @classmethod
    def from_json(cls, doc: dict) -> "TaskInstance":
        return cls(
            int(doc["d"]),
            FactorSpec.from_json(doc["prior"]),
            [FactorSpec.from_json(f) for f in doc["likelihoods"]],
            doc.get("z"),
        )


def read_tasks(path) -> list[TaskInstance]:
    with open(path, encoding="utf-8") as fh:
        return [TaskInstance.from_json(json.loads(line)) for line in fh if line.strip()]


def write_tasks(path, tasks: Sequence[TaskInstance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for task in tasks:
            fh.write(task.dumps())
            fh.write("\n")


@dataclass(frozen=True, eq=False)
class GaussianDistribution:
    """``N(mean, precision^{-1})``; the precision must be symmetric positive definite."""

    mean: np.ndarray
    precision: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        prec = np.asarray(self.precision, dtype=np.float64)
        d = mean.size
        if mean.shape != (d,) or prec.shape != (d, d):
            raise FactorError("GaussianDistribution: mean must be (d,) and precision (d, d)")
        if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(prec)):
            raise FactorError("GaussianDistribution: non-finite parameters")
        if not np.allclose(prec, prec.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(prec).max())):
            raise FactorError("GaussianDistribution: precision must be symmetric")
        try:
            chol = np.linalg.cholesky(prec)
        except np.linalg.LinAlgError as exc:
            raise FactorError("GaussianDistribution: precision must be positive definite") from exc
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "precision", prec)
        object.__setattr__(self, "_chol", chol)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def covariance(self) -> np.ndarray:
        inv_chol = np.linalg.inv(self._chol)
        return inv_chol.T @ inv_chol

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        eps = rng.standard_normal((n, self.dim))
        # z = mean + L^{-T} eps has covariance (L L^T)^{-1}
        return self.mean + linalg.solve_triangular(self._chol.T, eps.T, lower=False).T

    def log_prob(self, z) -> np.ndarray | float:
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        z2 = np.atleast_2d(z)
        white = (z2 - self.mean) @ self._chol
        out = (
            np.sum(np.log(np.diag(self._chol)))
            - 0.5 * self.dim * LOG_2PI
            - 0.5 * np.sum(white * white, axis=1)
        )
        return float(out[0]) if single else out


def _as_batch(z, d: int) -> tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    if z2.shape[-1] != d or z2.ndim != 2:
        raise FactorError(f"z has shape {z.shape}, expected (..., {d})")
    return z2, single


def _student_t_logpdf(r, scale, df):
    """Location-scale Student-t log density at standardized residual ``r``."""
    return (
        special.gammaln(0.5 * (df + 1.0))
        - special.gammaln(0.5 * df)
        - 0.5 * math.log(df * math.pi)
        - np.log(scale)
        - 0.5 * (df + 1.0) * np.log1p(r * r / df)
    )


def log_prior_density(prior: FactorSpec, z):
    """``log p(z | t0, theta0)`` including normalizing constants."""
    ft = prior.factor_type
    if not ft.is_prior:
        raise FactorError(f"{ft.value} is not a prior type")
    z2, single = _as_batch(z, prior.dim)
    th = prior.theta
    loc = th["loc"]
    if ft is FactorType.FULLRANK_GAUSSIAN:
        white = (z2 - loc) @ prior._cache["chol"]
        out = prior._cache["half_logdet"] - 0.5 * prior.dim * LOG_2PI - 0.5 * np.sum(white * white, axis=1)
    else:
        scale = th["scale"]
        r = (z2 - loc) / scale
        if ft is FactorType.DIAG_GAUSSIAN:
            terms = -0.5 * r * r - np.log(scale) - 0.5 * LOG_2PI
        elif ft is FactorType.DIAG_LAPLACE:
            terms = -np.abs(r) - np.log(2.0 * scale)
        else:
            terms = _student_t_logpdf(r, scale, th["df"])
        out = np.sum(terms, axis=1)
    return float(out[0]) if single else out


def _log_sigmoid(eta):
    return -np.logaddexp(0.0, -eta)


def log_likelihood_density(factor: FactorSpec, z):
    """``log p(y_n | z, t_n, theta_n)`` including normalizing constants."""
    ft = factor.factor_type
    if not ft.is_likelihood:
        raise FactorError(f"{ft.value} is not a likelihood type")
    z2, single = _as_batch(z, factor.dim)
    th = factor.theta
    y = factor.observation
    if ft is FactorType.GAUSSIAN:
        r = (y - z2) / th["scale"]
        out = np.sum(-0.5 * r * r, axis=1) - factor.dim * (math.log(th["scale"]) + 0.5 * LOG_2PI)
    else:
        with np.errstate(over="ignore", invalid="ignore"):
            eta = z2 @ factor.covariate
        if not np.all(np.isfinite(eta)):
            raise FactorError(f"{ft.value}: non-finite linear predictor")
        if ft is FactorType.LIN_GAUSSIAN:
            r = (y - eta) / th["scale"]
            out = -0.5 * r * r - math.log(th["scale"]) - 0.5 * LOG_2PI
        elif ft is FactorType.LIN_STUDENT_T:
            out = _student_t_logpdf((y - eta) / th["scale"], th["scale"], th["df"])
        elif ft is FactorType.BERNOULLI_LOGIT:
            out = y * _log_sigmoid(eta) + (1 - y) * _log_sigmoid(-eta)
        else:
            n = th["trials"]
            log_coef = special.gammaln(n + 1) - special.gammaln(y + 1) - special.gammaln(n - y + 1)
            out = log_coef + y * _log_sigmoid(eta) + (n - y) * _log_sigmoid(-eta)
    return float(out[0]) if single else out


def log_unnormalized_posterior(task: TaskInstance, z):
    """``log p(z, y_{1:N})``: prior plus likelihoods, summed in list order."""
    total = log_prior_density(task.prior, z)
    for factor in task.likelihoods:
        total = total + log_likelihood_density(factor, z)
    return total


def sample_from_factor(factor: FactorSpec, rng: np.random.Generator, z=None):
    """Exact draw from a prior (``z`` omitted) or from a likelihood given ``z``."""
    ft = factor.factor_type
    th = factor.theta
    if ft.is_prior:
        if z is not None:
            raise FactorError("prior factors are sampled without z")
        d = factor.dim
        loc = th["loc"]
        if ft is FactorType.DIAG_GAUSSIAN:
            return loc + th["scale"] * rng.standard_normal(d)
        if ft is FactorType.DIAG_LAPLACE:
            return loc + th["scale"] * rng.laplace(0.0, 1.0, d)
        if ft is FactorType.DIAG_STUDENT_T:
            return loc + th["scale"] * rng.standard_t(th["df"], d)
        eps = rng.standard_normal(d)
        return loc + np.linalg.solve(factor._cache["chol"].T, eps)
    if z is None:
        raise FactorError("likelihood factors need z to sample an observation")
    z = np.asarray(z, dtype=np.float64)
    if ft is FactorType.GAUSSIAN:
        return z + th["scale"] * rng.standard_normal(z.size)
    eta = float(z @ factor.covariate)
    if ft is FactorType.LIN_GAUSSIAN:
        return eta + th["scale"] * rng.standard_normal()
    if ft is FactorType.LIN_STUDENT_T:
        return eta + th["scale"] * rng.standard_t(th["df"])
    p = float(special.expit(eta))
    if ft is FactorType.BERNOULLI_LOGIT:
        return int(rng.random() < p)
    return int(rng.binomial(th["trials"], p))


def with_observation(factor: FactorSpec, y) -> FactorSpec:
    return FactorSpec(factor.factor_type, factor.theta, factor.covariate, y)


def is_conjugate(task: TaskInstance) -> bool:
    gauss_prior = task.prior.factor_type in (FactorType.DIAG_GAUSSIAN, FactorType.FULLRANK_GAUSSIAN)
    return gauss_prior and all(
        f.factor_type in (FactorType.LIN_GAUSSIAN, FactorType.GAUSSIAN) for f in task.likelihoods
    )


def prior_natural_parameters(prior: FactorSpec) -> tuple[np.ndarray, np.ndarray]:
    """Precision and precision-times-mean of a Gaussian prior."""
    if prior.factor_type is FactorType.DIAG_GAUSSIAN:
        prec = np.diag(prior.theta["scale"] ** -2.0)
    elif prior.factor_type is FactorType.FULLRANK_GAUSSIAN:
        prec = prior.theta["precision"].copy()
    else:
        raise UnsupportedTaskError(f"{prior.factor_type.value} prior is not Gaussian")
    return prec, prec @ prior.theta["loc"]


def conjugate_posterior_oracle(task: TaskInstance) -> GaussianDistribution:
    """Exact Gaussian posterior for a Gaussian prior with linear-Gaussian likelihoods.

    ``Lambda* = Lambda_0 + sum_n x_n x_n^T / s_n^2`` and
    ``mu* = Lambda*^{-1} (Lambda_0 mu_0 + sum_n x_n y_n / s_n^2)``; a vector
    ``gaussian`` observation contributes ``I / s^2`` and ``y / s^2``.
    """
    if not is_conjugate(task):
        kinds = sorted({f.factor_type.value for f in task.factors})
        raise UnsupportedTaskError(f"no closed-form posterior for factor types {kinds}")
    prec, shift = prior_natural_parameters(task.prior)
    for f in task.likelihoods:
        inv_var = f.theta["scale"] ** -2.0
        if f.factor_type is FactorType.GAUSSIAN:
            prec = prec + inv_var * np.eye(task.d)
            shift = shift + inv_var * f.observation
        else:
            prec = prec + inv_var * np.outer(f.covariate, f.covariate)
            shift = shift + inv_var * f.observation * f.covariate
    prec = 0.5 * (prec + prec.T)
    chol = np.linalg.cholesky(prec)
    mean = np.linalg.solve(chol.T, np.linalg.solve(chol, shift))
    return GaussianDistribution(mean, prec)
