"""Fixed-width numeric descriptors for each factor type.

Each factor becomes a node descriptor of shape ``(d, w_node)`` and a pair
descriptor of shape ``(d, d, w_pair)``. Pair descriptors always start with
the two coordinates' node descriptors ``[node_i, node_j]`` and end with the
indicator ``1{i=j}``.

========================  ==================================================  ===========================================
type                      node entries (per coordinate ``i``)                 extra pair entries (between ``node_j`` and 1{i=j})
========================  ==================================================  ===========================================
diag_gaussian             mu_i, log sigma_i, mu_i / sigma_i                   none
diag_laplace              mu_i, log s_i, mu_i / s_i                           none
diag_student_t            mu_i, log sigma_i, mu_i / sigma_i, log nu, 1 / nu   none
fullrank_gaussian         mu_i, log Lambda_ii, (Lambda mu)_i                  Lambda_ij, Lambda_ij / sqrt(Lambda_ii Lambda_jj), Sigma_ij
gaussian                  y_i, log sigma, y_i / sigma, 1 / sigma^2            none
lin_gaussian              x_i, y, log sigma, x_i y / sigma^2, x_i^2 / sigma^2 x_i x_j, x_i x_j / sigma^2
lin_student_t             lin_gaussian entries, log nu                        x_i x_j, x_i x_j / sigma^2
bernoulli_logit           x_i, y, (2y - 1) x_i, x_i^2                         x_i x_j
binomial_logit            x_i, y, n, y / n, (y - n/2) x_i, n x_i^2 / 4        x_i x_j, n x_i x_j / 4
========================  ==================================================  ===========================================
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .factors import FactorSpec, FactorType

NODE_WIDTHS = {
    FactorType.DIAG_GAUSSIAN: 3,
    FactorType.DIAG_LAPLACE: 3,
    FactorType.DIAG_STUDENT_T: 5,
    FactorType.FULLRANK_GAUSSIAN: 3,
    FactorType.GAUSSIAN: 4,
    FactorType.LIN_GAUSSIAN: 5,
    FactorType.LIN_STUDENT_T: 6,
    FactorType.BERNOULLI_LOGIT: 4,
    FactorType.BINOMIAL_LOGIT: 6,
}
_PAIR_EXTRA = {
    FactorType.DIAG_GAUSSIAN: 0,
    FactorType.DIAG_LAPLACE: 0,
    FactorType.DIAG_STUDENT_T: 0,
    FactorType.FULLRANK_GAUSSIAN: 3,
    FactorType.GAUSSIAN: 0,
    FactorType.LIN_GAUSSIAN: 2,
    FactorType.LIN_STUDENT_T: 2,
    FactorType.BERNOULLI_LOGIT: 1,
    FactorType.BINOMIAL_LOGIT: 2,
}
PAIR_WIDTHS = {t: 2 * NODE_WIDTHS[t] + _PAIR_EXTRA[t] + 1 for t in NODE_WIDTHS}


def _theta(factors, key):
    return np.array([np.asarray(f.theta[key], dtype=np.float64) for f in factors])


def _broadcast(v: np.ndarray, d: int) -> np.ndarray:
    """Per-factor scalars ``(n,)`` -> ``(n, d)``."""
    return np.repeat(np.asarray(v, dtype=np.float64)[:, None], d, axis=1)


def _node_block(factors: Sequence[FactorSpec], ft: FactorType, d: int) -> np.ndarray:
    n = len(factors)
    if ft in (FactorType.DIAG_GAUSSIAN, FactorType.DIAG_LAPLACE, FactorType.DIAG_STUDENT_T):
        mu = _theta(factors, "loc")
        sc = _theta(factors, "scale")
        cols = [mu, np.log(sc), mu / sc]
        if ft is FactorType.DIAG_STUDENT_T:
            nu = _theta(factors, "df")
            cols += [_broadcast(np.log(nu), d), _broadcast(1.0 / nu, d)]
        return np.stack(cols, axis=-1)
    if ft is FactorType.FULLRANK_GAUSSIAN:
        mu = _theta(factors, "loc")
        lam = _theta(factors, "precision")
        diag = np.diagonal(lam, axis1=1, axis2=2)
        return np.stack([mu, np.log(diag), np.einsum("nij,nj->ni", lam, mu)], axis=-1)
    if ft is FactorType.GAUSSIAN:
        y = np.array([np.asarray(f.observation, dtype=np.float64) for f in factors]).reshape(n, d)
        sc = _theta(factors, "scale")
        return np.stack(
            [y, _broadcast(np.log(sc), d), y / sc[:, None], _broadcast(sc ** -2, d)], axis=-1
        )
    x = np.array([f.covariate for f in factors], dtype=np.float64).reshape(n, d)
    y = np.array([f.observation for f in factors], dtype=np.float64)
    if ft in (FactorType.LIN_GAUSSIAN, FactorType.LIN_STUDENT_T):
        sc = _theta(factors, "scale")
        inv_var = (sc ** -2)[:, None]
        cols = [x, _broadcast(y, d), _broadcast(np.log(sc), d), x * (y[:, None] * inv_var), x * x * inv_var]
        if ft is FactorType.LIN_STUDENT_T:
            cols.append(_broadcast(np.log(_theta(factors, "df")), d))
        return np.stack(cols, axis=-1)
    if ft is FactorType.BERNOULLI_LOGIT:
        return np.stack([x, _broadcast(y, d), (2.0 * y - 1.0)[:, None] * x, x * x], axis=-1)
    if ft is FactorType.BINOMIAL_LOGIT:
        nc = _theta(factors, "trials")
        return np.stack(
            [
                x,
                _broadcast(y, d),
                _broadcast(nc, d),
                _broadcast(y / nc, d),
                (y - 0.5 * nc)[:, None] * x,
                0.25 * nc[:, None] * x * x,
            ],
            axis=-1,
        )
    raise ValueError(f"no descriptor for factor type {ft!r}")


def _pair_extra(factors: Sequence[FactorSpec], ft: FactorType, d: int) -> list[np.ndarray]:
    n = len(factors)
    if ft is FactorType.FULLRANK_GAUSSIAN:
        lam = _theta(factors, "precision")
        diag = np.diagonal(lam, axis1=1, axis2=2)
        corr = lam / np.sqrt(diag[:, :, None] * diag[:, None, :])
        cov = np.linalg.inv(lam)
        return [lam, corr, 0.5 * (cov + np.swapaxes(cov, 1, 2))]
    if not ft.has_covariate:
        return []
    x = np.array([f.covariate for f in factors], dtype=np.float64).reshape(n, d)
    xx = x[:, :, None] * x[:, None, :]
    if ft in (FactorType.LIN_GAUSSIAN, FactorType.LIN_STUDENT_T):
        return [xx, xx * (_theta(factors, "scale") ** -2)[:, None, None]]
    if ft is FactorType.BERNOULLI_LOGIT:
        return [xx]
    return [xx, 0.25 * _theta(factors, "trials")[:, None, None] * xx]


def build_descriptors_batch(
    factors: Sequence[FactorSpec], d: int
) -> tuple[np.ndarray, np.ndarray]:
    """Descriptors for factors that all share one type and dimension ``d``.

    Returns
    -------
    node : ndarray, shape (n, d, w_node)
    pair : ndarray, shape (n, d, d, w_pair)
    """
    if not factors:
        raise ValueError("need at least one factor")
    ft = factors[0].factor_type
    if ft not in NODE_WIDTHS:
        raise ValueError(f"no descriptor for factor type {ft!r}")
    if any(f.factor_type is not ft for f in factors):
        raise ValueError("factors must share one type")
    if any(f.dim != d for f in factors):
        raise ValueError(f"factors must all have dimension {d}")
    node = _node_block(factors, ft, d)
    n, _, w = node.shape
    ni = np.broadcast_to(node[:, :, None, :], (n, d, d, w))
    nj = np.broadcast_to(node[:, None, :, :], (n, d, d, w))
    extras = [e[..., None] for e in _pair_extra(factors, ft, d)]
    eye = np.broadcast_to(np.eye(d)[None, :, :, None], (n, d, d, 1))
    pair = np.concatenate([ni, nj, *extras, eye], axis=-1)
    return node, pair


def build_descriptors(factor: FactorSpec, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Node ``(d, w_node)`` and pair ``(d, d, w_pair)`` descriptors of one factor."""
    node, pair = build_descriptors_batch([factor], d)
    return node[0], pair[0]
