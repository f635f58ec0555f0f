# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled nearest-centroid kernels.

Every routine here has a numpy twin in ``_kernels_py`` and both must return
bit-identical results: squared distances are always ``dx*dx + dy*dy`` in that
order and ties resolve to the lowest centroid index.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def assign_nearest(const double[:, ::1] points, const double[:, ::1] centroids):
    """Return (labels, squared distances) of each point's nearest centroid."""
    cdef Py_ssize_t m = points.shape[0]
    cdef Py_ssize_t n = centroids.shape[0]
    cdef Py_ssize_t i, j, best_j
    cdef double px, py, dx, dy, d, best
    labels_arr = np.empty(m, dtype=np.int64)
    d2_arr = np.empty(m, dtype=np.float64)
    cdef cnp.int64_t[::1] labels = labels_arr
    cdef double[::1] d2 = d2_arr
    with nogil:
        for i in range(m):
            px = points[i, 0]
            py = points[i, 1]
            best = 1.0e308
            best_j = 0
            for j in range(n):
                dx = px - centroids[j, 0]
                dy = py - centroids[j, 1]
                d = dx * dx + dy * dy
                if d < best:
                    best = d
                    best_j = j
            labels[i] = best_j
            d2[i] = best
    return labels_arr, d2_arr


def knn(const double[:, ::1] points, const double[:, ::1] centroids, Py_ssize_t k):
    """Return (indices, squared distances) of the k nearest centroids, ascending."""
    cdef Py_ssize_t m = points.shape[0]
    cdef Py_ssize_t n = centroids.shape[0]
    cdef Py_ssize_t i, j, s, filled
    cdef double px, py, dx, dy, d
    idx_arr = np.empty((m, k), dtype=np.int64)
    dist_arr = np.empty((m, k), dtype=np.float64)
    cdef cnp.int64_t[:, ::1] idx = idx_arr
    cdef double[:, ::1] dist = dist_arr
    with nogil:
        for i in range(m):
            px = points[i, 0]
            py = points[i, 1]
            filled = 0
            for j in range(n):
                dx = px - centroids[j, 0]
                dy = py - centroids[j, 1]
                d = dx * dx + dy * dy
                if filled == k and d >= dist[i, k - 1]:
                    continue
                # insertion keeps earlier (lower) indices ahead on ties
                s = filled if filled < k else k - 1
                while s > 0 and dist[i, s - 1] > d:
                    dist[i, s] = dist[i, s - 1]
                    idx[i, s] = idx[i, s - 1]
                    s -= 1
                dist[i, s] = d
                idx[i, s] = j
                if filled < k:
                    filled += 1
    return idx_arr, dist_arr


def cluster_sums(const double[:, ::1] points, const cnp.int64_t[::1] labels, Py_ssize_t n):
    """Per-cluster coordinate sums and member counts, accumulated in point order."""
    cdef Py_ssize_t m = points.shape[0]
    cdef Py_ssize_t i
    cdef cnp.int64_t c
    sums_arr = np.zeros((n, 2), dtype=np.float64)
    counts_arr = np.zeros(n, dtype=np.int64)
    cdef double[:, ::1] sums = sums_arr
    cdef cnp.int64_t[::1] counts = counts_arr
    with nogil:
        for i in range(m):
            c = labels[i]
            sums[c, 0] += points[i, 0]
            sums[c, 1] += points[i, 1]
            counts[c] += 1
    return sums_arr, counts_arr
