# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled geometry kernels; semantics identical to ``_kernels_py``.

Hot per-step loops: farthest point sampling, k-nearest neighbours and
Chamfer nearest-neighbour search.  Per-element arithmetic matches the
NumPy fallback (coordinate-wise squared differences, left-to-right adds)
so index outputs agree bitwise across backends.
"""

import numpy as np

from libc.float cimport DBL_MAX


def pairwise_sq_dist(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t na = a.shape[0], nb = b.shape[0]
    out = np.empty((na, nb), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double dx, dy, dz
    for i in range(na):
        for j in range(nb):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            dz = a[i, 2] - b[j, 2]
            o[i, j] = dx * dx + dy * dy + dz * dz
    return out


def fps(double[:, ::1] pts, Py_ssize_t p, Py_ssize_t start):
    cdef Py_ssize_t n = pts.shape[0]
    out = np.empty(p, dtype=np.int64)
    cdef long long[::1] sel = out
    cdef double[::1] dist = np.full(n, DBL_MAX)
    cdef Py_ssize_t i, j, cur, best
    cdef double dx, dy, dz, dd, bestval
    cur = start
    for i in range(p):
        sel[i] = cur
        for j in range(n):
            dx = pts[j, 0] - pts[cur, 0]
            dy = pts[j, 1] - pts[cur, 1]
            dz = pts[j, 2] - pts[cur, 2]
            dd = dx * dx + dy * dy + dz * dz
            if dd < dist[j]:
                dist[j] = dd
        dist[cur] = -1.0  # exclude picked indices; keeps picks distinct
        best = 0
        bestval = dist[0]
        for j in range(1, n):
            if dist[j] > bestval:
                bestval = dist[j]
                best = j
        cur = best
    return out


def knn(double[:, ::1] query, double[:, ::1] ref, Py_ssize_t k):
    cdef Py_ssize_t q = query.shape[0], n = ref.shape[0]
    out = np.empty((q, k), dtype=np.int64)
    cdef long long[:, ::1] o = out
    cdef double[::1] dist = np.empty(n)
    cdef Py_ssize_t i, j, r, best
    cdef double dx, dy, dz, bestval
    for i in range(q):
        for j in range(n):
            dx = query[i, 0] - ref[j, 0]
            dy = query[i, 1] - ref[j, 1]
            dz = query[i, 2] - ref[j, 2]
            dist[j] = dx * dx + dy * dy + dz * dz
        for r in range(k):
            best = 0
            bestval = DBL_MAX
            for j in range(n):
                if dist[j] < bestval:  # strict: first minimum = lowest index
                    bestval = dist[j]
                    best = j
            o[i, r] = best
            dist[best] = DBL_MAX
    return out


def nearest(double[:, ::1] query, double[:, ::1] ref):
    cdef Py_ssize_t q = query.shape[0], n = ref.shape[0]
    out = np.empty(q, dtype=np.int64)
    cdef long long[::1] o = out
    cdef Py_ssize_t i, j, best
    cdef double dx, dy, dz, dd, bestval
    for i in range(q):
        best = 0
        bestval = DBL_MAX
        for j in range(n):
            dx = query[i, 0] - ref[j, 0]
            dy = query[i, 1] - ref[j, 1]
            dz = query[i, 2] - ref[j, 2]
            dd = dx * dx + dy * dy + dz * dz
            if dd < bestval:
                bestval = dd
                best = j
        o[i] = best
    return out


def chamfer(double[:, ::1] x, double[:, ::1] y):
    cdef Py_ssize_t a = x.shape[0], b = y.shape[0]
    cdef Py_ssize_t i, j
    cdef double dx, dy, dz, dd, best, acc1 = 0.0, acc2 = 0.0
    for i in range(a):
        best = DBL_MAX
        for j in range(b):
            dx = x[i, 0] - y[j, 0]
            dy = x[i, 1] - y[j, 1]
            dz = x[i, 2] - y[j, 2]
            dd = dx * dx + dy * dy + dz * dz
            if dd < best:
                best = dd
        acc1 += best
    for j in range(b):
        best = DBL_MAX
        for i in range(a):
            dx = x[i, 0] - y[j, 0]
            dy = x[i, 1] - y[j, 1]
            dz = x[i, 2] - y[j, 2]
            dd = dx * dx + dy * dy + dz * dz
            if dd < best:
                best = dd
        acc2 += best
    return acc1 / a + acc2 / b
