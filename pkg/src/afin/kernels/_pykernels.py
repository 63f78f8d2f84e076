"""Numpy implementations of the compiled kernels (same signatures and results)."""
from __future__ import annotations

import numpy as np


def _log_sigmoid(x):
    return np.where(x >= 0.0, -np.log1p(np.exp(-np.abs(x))), x - np.log1p(np.exp(-np.abs(x))))


def log_posterior_batch(packed, Z):
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    p = packed
    if p.prior_code == 1:
        white = (Z - p.prior_loc) @ p.prior_chol
        out = -0.5 * np.sum(white * white, axis=1)
    else:
        r = (Z - p.prior_loc) / p.prior_scale
        if p.prior_code == 0:
            out = -0.5 * np.sum(r * r, axis=1)
        elif p.prior_code == 3:
            out = -np.sum(np.abs(r), axis=1)
        else:
            out = -0.5 * (p.prior_df + 1.0) * np.sum(np.log1p(r * r / p.prior_df), axis=1)
    out = out + p.prior_const

    code = p.like_code
    eta = Z @ p.X.T  # (S, N)
    terms = np.zeros_like(eta)
    vec = code == 0
    if vec.any():
        diff = (p.Y[vec][None, :, :] - Z[:, None, :]) / p.scale[vec][None, :, None]
        terms[:, vec] = -0.5 * np.sum(diff * diff, axis=2)
    lin = code == 1
    if lin.any():
        r = (p.y[lin] - eta[:, lin]) / p.scale[lin]
        terms[:, lin] = -0.5 * r * r
    stud = code == 4
    if stud.any():
        r = (p.y[stud] - eta[:, stud]) / p.scale[stud]
        terms[:, stud] = -0.5 * (p.df[stud] + 1.0) * np.log1p(r * r / p.df[stud])
    logit = (code == 2) | (code == 3)
    if logit.any():
        e = eta[:, logit]
        terms[:, logit] = p.y[logit] * _log_sigmoid(e) + (p.trials[logit] - p.y[logit]) * _log_sigmoid(-e)
    terms = terms + p.const
    for n in range(terms.shape[1]):
        out = out + terms[:, n]
    return out


def rwm_run(packed, z0, logp0, chol, normals, log_uniforms):
    chol = np.asarray(chol, dtype=np.float64)
    steps = np.asarray(normals, dtype=np.float64) @ chol.T
    T, d = steps.shape
    samples = np.empty((T, d))
    cur = np.array(z0, dtype=np.float64)
    cur_lp = float(logp0)
    accepted = 0
    for t in range(T):
        prop = cur + steps[t]
        prop_lp = float(log_posterior_batch(packed, prop[None, :])[0])
        if log_uniforms[t] < prop_lp - cur_lp:
            cur = prop
            cur_lp = prop_lp
            accepted += 1
        samples[t] = cur
    return samples, cur_lp, accepted
