"""Flatten a :class:`~afin.factors.TaskInstance` into plain arrays for the kernels."""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from scipy import special

from ..factors import LOG_2PI, FactorType, TaskInstance

PRIOR_CODES = {
    FactorType.DIAG_GAUSSIAN: 0,
    FactorType.FULLRANK_GAUSSIAN: 1,
    FactorType.DIAG_STUDENT_T: 2,
    FactorType.DIAG_LAPLACE: 3,
}
LIKELIHOOD_CODES = {
    FactorType.GAUSSIAN: 0,
    FactorType.LIN_GAUSSIAN: 1,
    FactorType.BERNOULLI_LOGIT: 2,
    FactorType.BINOMIAL_LOGIT: 3,
    FactorType.LIN_STUDENT_T: 4,
}


class PackedTask(NamedTuple):
    d: int
    prior_code: int
    prior_loc: np.ndarray  # (d,)
    prior_scale: np.ndarray  # (d,), ones for fullrank
    prior_chol: np.ndarray  # (d, d) Cholesky factor of the prior precision (fullrank only)
    prior_df: float
    prior_const: float  # z-independent part of the prior log density
    like_code: np.ndarray  # (N,) int32
    X: np.ndarray  # (N, d) covariate rows, zero for vector observations
    Y: np.ndarray  # (N, d) vector observations, zero otherwise
    y: np.ndarray  # (N,) scalar observations
    scale: np.ndarray  # (N,)
    df: np.ndarray  # (N,)
    trials: np.ndarray  # (N,)
    const: np.ndarray  # (N,) z-independent part of each likelihood log density


def _t_const(df: float) -> float:
    return float(special.gammaln(0.5 * (df + 1.0)) - special.gammaln(0.5 * df) - 0.5 * math.log(df * math.pi))


def pack_task(task: TaskInstance) -> PackedTask:
    d, n = task.d, task.N
    prior = task.prior
    th = prior.theta
    loc = np.ascontiguousarray(th["loc"], dtype=np.float64)
    chol = np.eye(d)
    df = 0.0
    if prior.factor_type is FactorType.FULLRANK_GAUSSIAN:
        scale = np.ones(d)
        chol = np.ascontiguousarray(prior._cache["chol"])
        const = prior._cache["half_logdet"] - 0.5 * d * LOG_2PI
    else:
        scale = np.ascontiguousarray(th["scale"], dtype=np.float64)
        if prior.factor_type is FactorType.DIAG_GAUSSIAN:
            const = float(np.sum(-np.log(scale) - 0.5 * LOG_2PI))
        elif prior.factor_type is FactorType.DIAG_LAPLACE:
            const = float(np.sum(-np.log(2.0 * scale)))
        else:
            df = th["df"]
            const = float(np.sum(_t_const(df) - np.log(scale)))

    codes = np.zeros(n, dtype=np.int32)
    X = np.zeros((n, d))
    Y = np.zeros((n, d))
    y = np.zeros(n)
    lscale = np.ones(n)
    ldf = np.zeros(n)
    trials = np.zeros(n)
    lconst = np.zeros(n)
    for i, f in enumerate(task.likelihoods):
        ft = f.factor_type
        codes[i] = LIKELIHOOD_CODES[ft]
        if ft is FactorType.GAUSSIAN:
            Y[i] = f.observation
            lscale[i] = f.theta["scale"]
            lconst[i] = -d * (math.log(lscale[i]) + 0.5 * LOG_2PI)
            continue
        X[i] = f.covariate
        y[i] = f.observation
        if ft is FactorType.LIN_GAUSSIAN:
            lscale[i] = f.theta["scale"]
            lconst[i] = -math.log(lscale[i]) - 0.5 * LOG_2PI
        elif ft is FactorType.LIN_STUDENT_T:
            lscale[i] = f.theta["scale"]
            ldf[i] = f.theta["df"]
            lconst[i] = _t_const(ldf[i]) - math.log(lscale[i])
        elif ft is FactorType.BINOMIAL_LOGIT:
            nc = f.theta["trials"]
            trials[i] = nc
            k = f.observation
            lconst[i] = float(special.gammaln(nc + 1) - special.gammaln(k + 1) - special.gammaln(nc - k + 1))
        else:
            trials[i] = 1.0
    return PackedTask(
        d, PRIOR_CODES[prior.factor_type], loc, scale, chol, float(df), float(const),
        codes, X, Y, y, lscale, ldf, trials, lconst,
    )
