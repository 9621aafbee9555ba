# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled rank-statistics and distance kernels.

Same call signatures and results as ``_kernels_py``; selected at import by
``msdistill.numerics`` when the extension is built.
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def average_ranks(const double[::1] v):
    cdef Py_ssize_t n = v.shape[0]
    cdef Py_ssize_t i, j, k
    cdef double avg
    order = np.argsort(np.asarray(v), kind="mergesort")
    cdef const cnp.intp_t[::1] idx = order
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] r = out
    i = 0
    while i < n:
        j = i
        while j + 1 < n and v[idx[j + 1]] == v[idx[i]]:
            j += 1
        avg = 0.5 * (i + j) + 1.0
        for k in range(i, j + 1):
            r[idx[k]] = avg
        i = j + 1
    return out


def kendall_pair_counts(const double[::1] x, const double[::1] y):
    """Return (concordant - discordant, pairs tied in x, pairs tied in y)."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t i, j
    cdef long long s = 0
    cdef long long tx = 0
    cdef long long ty = 0
    cdef double xi, yi
    cdef bint ex, ey
    for i in range(n - 1):
        xi = x[i]
        yi = y[i]
        for j in range(i + 1, n):
            ex = x[j] == xi
            ey = y[j] == yi
            if ex:
                tx += 1
            if ey:
                ty += 1
            if not ex and not ey:
                if (x[j] > xi) == (y[j] > yi):
                    s += 1
                else:
                    s -= 1
    return s, tx, ty


def pearson_distance_matrix(const double[:, ::1] rows, double eps):
    """1 - Pearson correlation between every pair of rows.

    Rows whose variance is below ``eps`` correlate 0 with everything,
    themselves included. Returns (distances, degenerate_row_mask).
    """
    cdef Py_ssize_t n = rows.shape[0]
    cdef Py_ssize_t d = rows.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double m, acc, r
    centered_arr = np.empty((n, d), dtype=np.float64)
    norms_arr = np.empty(n, dtype=np.float64)
    degenerate_arr = np.zeros(n, dtype=np.bool_)
    out_arr = np.empty((n, n), dtype=np.float64)
    cdef double[:, ::1] c = centered_arr
    cdef double[::1] norms = norms_arr
    cdef cnp.npy_bool[::1] degenerate = degenerate_arr
    cdef double[:, ::1] out = out_arr

    for i in range(n):
        m = 0.0
        for k in range(d):
            m += rows[i, k]
        m /= d
        acc = 0.0
        for k in range(d):
            c[i, k] = rows[i, k] - m
            acc += c[i, k] * c[i, k]
        if acc / d < eps:
            degenerate[i] = 1
            norms[i] = 0.0
        else:
            norms[i] = sqrt(acc)

    for i in range(n):
        out[i, i] = 1.0 if degenerate[i] else 0.0
        for j in range(i + 1, n):
            if degenerate[i] or degenerate[j]:
                r = 0.0
            else:
                acc = 0.0
                for k in range(d):
                    acc += c[i, k] * c[j, k]
                r = acc / (norms[i] * norms[j])
                if r > 1.0:
                    r = 1.0
                elif r < -1.0:
                    r = -1.0
            out[i, j] = 1.0 - r
            out[j, i] = 1.0 - r
    return out_arr, degenerate_arr
