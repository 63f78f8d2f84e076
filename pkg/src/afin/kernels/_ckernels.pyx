# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled log-posterior evaluation and fixed-proposal random-walk Metropolis."""
import numpy as np

from libc.math cimport exp, fabs, log, log1p


cdef inline double _log_sigmoid(double x) noexcept nogil:
    if x >= 0.0:
        return -log1p(exp(-x))
    return x - log1p(exp(x))


cdef class _Task:
    cdef int d, n, prior_code
    cdef double[::1] prior_loc, prior_scale
    cdef double[:, ::1] prior_chol
    cdef double prior_df, prior_const
    cdef int[::1] code
    cdef double[:, ::1] X, Y
    cdef double[::1] y, scale, df, trials, const, work

    def __init__(self, packed):
        self.d = packed.d
        self.prior_code = packed.prior_code
        self.prior_loc = np.ascontiguousarray(packed.prior_loc, dtype=np.float64)
        self.prior_scale = np.ascontiguousarray(packed.prior_scale, dtype=np.float64)
        self.prior_chol = np.ascontiguousarray(packed.prior_chol, dtype=np.float64)
        self.prior_df = packed.prior_df
        self.prior_const = packed.prior_const
        self.code = np.ascontiguousarray(packed.like_code, dtype=np.int32)
        self.n = self.code.shape[0]
        self.X = np.ascontiguousarray(packed.X, dtype=np.float64)
        self.Y = np.ascontiguousarray(packed.Y, dtype=np.float64)
        self.y = np.ascontiguousarray(packed.y, dtype=np.float64)
        self.scale = np.ascontiguousarray(packed.scale, dtype=np.float64)
        self.df = np.ascontiguousarray(packed.df, dtype=np.float64)
        self.trials = np.ascontiguousarray(packed.trials, dtype=np.float64)
        self.const = np.ascontiguousarray(packed.const, dtype=np.float64)
        self.work = np.zeros(self.d)

    cdef double logp(self, double* z) noexcept nogil:
        cdef int i, j, n
        cdef double r, acc, eta, s, t
        cdef int d = self.d
        acc = 0.0
        if self.prior_code == 1:
            # (z - mu)^T L, then squared norm
            for j in range(d):
                self.work[j] = z[j] - self.prior_loc[j]
            for j in range(d):
                t = 0.0
                for i in range(j, d):
                    t = t + self.work[i] * self.prior_chol[i, j]
                acc = acc - 0.5 * t * t
        else:
            for j in range(d):
                r = (z[j] - self.prior_loc[j]) / self.prior_scale[j]
                if self.prior_code == 0:
                    acc = acc - 0.5 * r * r
                elif self.prior_code == 3:
                    acc = acc - fabs(r)
                else:
                    acc = acc - 0.5 * (self.prior_df + 1.0) * log1p(r * r / self.prior_df)
        acc = acc + self.prior_const

        for n in range(self.n):
            s = self.const[n]
            if self.code[n] == 0:
                t = 0.0
                for j in range(d):
                    r = (self.Y[n, j] - z[j]) / self.scale[n]
                    t = t + r * r
                s = s - 0.5 * t
            else:
                eta = 0.0
                for j in range(d):
                    eta = eta + self.X[n, j] * z[j]
                if self.code[n] == 1:
                    r = (self.y[n] - eta) / self.scale[n]
                    s = s - 0.5 * r * r
                elif self.code[n] == 4:
                    r = (self.y[n] - eta) / self.scale[n]
                    s = s - 0.5 * (self.df[n] + 1.0) * log1p(r * r / self.df[n])
                else:
                    s = s + self.y[n] * _log_sigmoid(eta) + (self.trials[n] - self.y[n]) * _log_sigmoid(-eta)
            acc = acc + s
        return acc


def log_posterior_batch(packed, Z):
    """Unnormalized log posterior at each row of ``Z`` (shape ``(S, d)``)."""
    cdef _Task task = _Task(packed)
    cdef double[:, ::1] z = np.ascontiguousarray(Z, dtype=np.float64)
    cdef Py_ssize_t s, S = z.shape[0]
    out = np.empty(S)
    cdef double[::1] res = out
    with nogil:
        for s in range(S):
            res[s] = task.logp(&z[s, 0])
    return out


def rwm_run(packed, z0, double logp0, chol, normals, log_uniforms):
    """Random-walk Metropolis with a fixed proposal ``z + chol @ normals[t]``.

    Returns ``(samples, final_logp, n_accepted)``; ``samples[t]`` is the state
    after iteration ``t``.
    """
    cdef _Task task = _Task(packed)
    cdef int d = task.d
    cdef double[:, ::1] L = np.ascontiguousarray(chol, dtype=np.float64)
    cdef double[:, ::1] eps = np.ascontiguousarray(normals, dtype=np.float64)
    cdef double[::1] logu = np.ascontiguousarray(log_uniforms, dtype=np.float64)
    cdef Py_ssize_t T = eps.shape[0]
    samples = np.empty((T, d))
    cdef double[:, ::1] out = samples
    cur_arr = np.array(z0, dtype=np.float64)
    prop_arr = np.empty(d)
    cdef double[::1] cur = cur_arr
    cdef double[::1] prop = prop_arr
    cdef double cur_lp = logp0, prop_lp, step
    cdef long accepted = 0
    cdef Py_ssize_t t
    cdef int i, j
    with nogil:
        for t in range(T):
            for i in range(d):
                step = 0.0
                for j in range(i + 1):
                    step = step + L[i, j] * eps[t, j]
                prop[i] = cur[i] + step
            prop_lp = task.logp(&prop[0])
            if logu[t] < prop_lp - cur_lp:
                for i in range(d):
                    cur[i] = prop[i]
                cur_lp = prop_lp
                accepted += 1
            for i in range(d):
                out[t, i] = cur[i]
    return samples, cur_lp, accepted
