# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled clustering hot loops. Mirrors reid_uda._kernels_py."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


cdef inline double _sqdist(const double[:, ::1] A, Py_ssize_t i,
                           const double[:, ::1] B, Py_ssize_t j) noexcept nogil:
    cdef Py_ssize_t d
    cdef double acc = 0.0, diff
    for d in range(A.shape[1]):
        diff = A[i, d] - B[j, d]
        acc += diff * diff
    return acc


def nearest_centroid(X, C):
    cdef const double[:, ::1] xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:, ::1] cv = np.ascontiguousarray(C, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], k = cv.shape[0], i, j, best_j
    cdef double best, d2
    if k == 0:
        raise ValueError("empty centroid set")
    labels = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] lv = labels
    cdef double[::1] dv = dist
    with nogil:
        for i in range(n):
            best = _sqdist(xv, i, cv, 0)
            best_j = 0
            for j in range(1, k):
                d2 = _sqdist(xv, i, cv, j)
                if d2 < best:
                    best = d2
                    best_j = j
            lv[i] = best_j
            dv[i] = best
    return labels, dist


def candidate_costs(X, cur_d2, cand_idx):
    cdef const double[:, ::1] xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[::1] cur = np.ascontiguousarray(cur_d2, dtype=np.float64)
    cdef const cnp.int64_t[::1] cand = np.ascontiguousarray(cand_idx, dtype=np.int64)
    cdef Py_ssize_t n = xv.shape[0], m = cand.shape[0], i, t
    out = np.empty(m, dtype=np.float64)
    cdef double[::1] ov = out
    cdef double total, d2
    with nogil:
        for t in range(m):
            total = 0.0
            for i in range(n):
                d2 = _sqdist(xv, i, xv, cand[t])
                total += d2 if d2 < cur[i] else cur[i]
            ov[t] = total
    return out


def minibatch_step(Xb, double[:, ::1] C, cnp.int64_t[::1] counts):
    cdef const double[:, ::1] xv = np.ascontiguousarray(Xb, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], k = C.shape[0], dim = C.shape[1]
    cdef Py_ssize_t i, j, d
    cdef double inertia = 0.0, lr
    labels, d2 = nearest_centroid(xv, C)
    cdef const cnp.int64_t[::1] lv = labels
    cdef const double[::1] dv = d2
    # grouped in batch order so the result equals sequential arrival
    cdef cnp.int64_t[::1] n_new = np.zeros(k, dtype=np.int64)
    cdef double[:, ::1] sums = np.zeros((k, dim), dtype=np.float64)
    with nogil:
        for i in range(n):
            j = lv[i]
            n_new[j] += 1
            inertia += dv[i]
            for d in range(dim):
                sums[j, d] += xv[i, d]
        for j in range(k):
            if n_new[j] > 0:
                lr = 1.0 / <double>(counts[j] + n_new[j])
                for d in range(dim):
                    C[j, d] += (sums[j, d] - n_new[j] * C[j, d]) * lr
                counts[j] += n_new[j]
    return labels, inertia
