# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled loops for the rough-path tables (p-variation DP, controls, Chen defect)."""

import numpy as np
from libc.math cimport pow, sqrt, fabs


cdef inline double _dist(const double[:, ::1] x, Py_ssize_t i, Py_ssize_t j) noexcept nogil:
    cdef Py_ssize_t k
    cdef double acc = 0.0, d
    for k in range(x.shape[1]):
        d = x[j, k] - x[i, k]
        acc += d * d
    return sqrt(acc)


def pvar_power(const double[:, ::1] x, double p):
    """sup over node partitions of sum |x_j - x_i|^p."""
    cdef Py_ssize_t n = x.shape[0], i, j
    cdef double[::1] best = np.zeros(n)
    cdef double cand, b
    with nogil:
        for j in range(1, n):
            b = 0.0
            for i in range(j):
                cand = best[i] + pow(_dist(x, i, j), p)
                if cand > b:
                    b = cand
            best[j] = b
    return best[n - 1]


def control_table(const double[:, ::1] x, double p):
    """omega[s, t] = p-variation power on [t_s, t_t] for every node pair."""
    cdef Py_ssize_t n = x.shape[0], s, i, j
    out = np.zeros((n, n))
    cdef double[:, ::1] om = out
    cdef double[::1] best = np.zeros(n)
    cdef double cand, b
    with nogil:
        for s in range(n):
            best[s] = 0.0
            for j in range(s + 1, n):
                b = 0.0
                for i in range(s, j):
                    cand = best[i] + pow(_dist(x, i, j), p)
                    if cand > b:
                        b = cand
                best[j] = b
                om[s, j] = b
    return out


def chen_defect(const double[:, ::1] z, const double[:, :, :, ::1] second):
    """max over i < j < k of |ZZ_ik - ZZ_ij - ZZ_jk - Z_ij (x) Z_jk|."""
    cdef Py_ssize_t n = z.shape[0], K = z.shape[1], i, j, k, a, b
    cdef double worst = 0.0, d
    with nogil:
        for i in range(n):
            for j in range(i + 1, n):
                for k in range(j + 1, n):
                    for a in range(K):
                        for b in range(K):
                            d = fabs(second[i, k, a, b] - second[i, j, a, b] - second[j, k, a, b]
                                     - (z[j, a] - z[i, a]) * (z[k, b] - z[j, b]))
                            if d > worst:
                                worst = d
    return worst
