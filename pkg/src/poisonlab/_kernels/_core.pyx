# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled twin of the numpy reference kernel.

Semantics are defined by purepy.td_adam_train: same batch schedule, same
per-slot accumulation order, same Adam arithmetic. Any divergence beyond
float rounding is a bug caught by the parity tests.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport pow, sqrt

cnp.import_array()


def td_adam_train(
    cnp.ndarray[cnp.float64_t, ndim=1] theta0,
    cnp.ndarray[cnp.int64_t, ndim=2] obs_idx,
    cnp.ndarray[cnp.int64_t, ndim=2] act_idx,
    cnp.ndarray[cnp.int64_t, ndim=2] next_idx,
    cnp.ndarray[cnp.float64_t, ndim=1] rewards,
    cnp.ndarray[cnp.float64_t, ndim=1] done,
    double gamma,
    int n_actions,
    int n_cells,
    int method,
    double learning_rate,
    cnp.ndarray[cnp.int64_t, ndim=1] batch_offsets,
    cnp.ndarray[cnp.int64_t, ndim=1] batch_indices,
):
    cdef Py_ssize_t n = obs_idx.shape[0]
    cdef Py_ssize_t n_agents = obs_idx.shape[1]
    cdef Py_ssize_t p = theta0.shape[0]
    cdef Py_ssize_t steps = batch_offsets.shape[0] - 1

    theta_arr = np.array(theta0, dtype=np.float64, copy=True)
    cdef double[:] theta = theta_arr

    cur_flat_arr = np.empty((n, n_agents), dtype=np.int64)
    cdef cnp.int64_t[:, :] cur_flat = cur_flat_arr
    cdef Py_ssize_t b, i, a, step
    for b in range(n):
        for i in range(n_agents):
            cur_flat[b, i] = (i * n_actions + act_idx[b, i]) * n_cells + obs_idx[b, i]

    cdef Py_ssize_t max_bsz = 0
    for step in range(steps):
        if batch_offsets[step + 1] - batch_offsets[step] > max_bsz:
            max_bsz = batch_offsets[step + 1] - batch_offsets[step]

    cdef double[:] g = np.zeros(p)
    cdef double[:] e = np.zeros(max_bsz)
    cdef double[:] nd = np.zeros(max_bsz)
    cdef cnp.int64_t[:, :] best_flat = np.zeros((max_bsz, n_agents), dtype=np.int64)
    cdef double[:] m = np.zeros(p)
    cdef double[:] v = np.zeros(p)
    cdef double b1 = 0.9, b2 = 0.999, eps = 1e-8
    cdef double q, boot, cand, best_val, coef, mhat, vhat, bias1, bias2, gk
    cdef Py_ssize_t start, bsz, rec, best_a, k
    cdef cnp.int64_t[:, :] ni = next_idx
    cdef double[:] rew = rewards

    for step in range(steps):
        start = batch_offsets[step]
        bsz = batch_offsets[step + 1] - start

        for b in range(bsz):
            rec = batch_indices[start + b]
            q = 0.0
            for i in range(n_agents):
                q += theta[cur_flat[rec, i]]
            boot = 0.0
            for i in range(n_agents):
                best_a = 0
                best_val = theta[(i * n_actions) * n_cells + ni[rec, i]]
                for a in range(1, n_actions):
                    cand = theta[(i * n_actions + a) * n_cells + ni[rec, i]]
                    if cand > best_val:
                        best_val = cand
                        best_a = a
                boot += best_val
                best_flat[b, i] = (i * n_actions + best_a) * n_cells + ni[rec, i]
            nd[b] = 1.0 - done[rec]
            e[b] = q - (rew[rec] + gamma * nd[b] * boot)

        coef = 2.0 / bsz
        for k in range(p):
            g[k] = 0.0
        for i in range(n_agents):
            for b in range(bsz):
                rec = batch_indices[start + b]
                g[cur_flat[rec, i]] += coef * e[b]
        for i in range(n_agents):
            for b in range(bsz):
                g[best_flat[b, i]] -= coef * e[b] * gamma * nd[b]

        if method == 0:
            for k in range(p):
                theta[k] -= learning_rate * g[k]
        else:
            bias1 = 1.0 - pow(b1, step + 1)
            bias2 = 1.0 - pow(b2, step + 1)
            for k in range(p):
                gk = g[k]
                m[k] = b1 * m[k] + (1.0 - b1) * gk
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk
                mhat = m[k] / bias1
                vhat = v[k] / bias2
                theta[k] -= learning_rate * mhat / (sqrt(vhat) + eps)

    return theta_arr
