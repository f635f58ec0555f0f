"""Pure numpy fallback for the compiled nearest-centroid kernels."""

import numpy as np

# caps the (chunk, N) distance matrix at a few MB
_CHUNK = 4096


def _sq_dists(points, centroids):
    dx = points[:, None, 0] - centroids[None, :, 0]
    dy = points[:, None, 1] - centroids[None, :, 1]
    return dx * dx + dy * dy


def assign_nearest(points, centroids):
    points = np.ascontiguousarray(points, dtype=np.float64)
    centroids = np.ascontiguousarray(centroids, dtype=np.float64)
    m = points.shape[0]
    labels = np.empty(m, dtype=np.int64)
    d2 = np.empty(m, dtype=np.float64)
    for start in range(0, m, _CHUNK):
        d = _sq_dists(points[start:start + _CHUNK], centroids)
        lab = np.argmin(d, axis=1)  # first occurrence == lowest index
        labels[start:start + _CHUNK] = lab
        d2[start:start + _CHUNK] = d[np.arange(len(lab)), lab]
    return labels, d2


def knn(points, centroids, k):
    points = np.ascontiguousarray(points, dtype=np.float64)
    centroids = np.ascontiguousarray(centroids, dtype=np.float64)
    m = points.shape[0]
    idx = np.empty((m, k), dtype=np.int64)
    dist = np.empty((m, k), dtype=np.float64)
    for start in range(0, m, _CHUNK):
        d = _sq_dists(points[start:start + _CHUNK], centroids)
        order = np.argsort(d, axis=1, kind="stable")[:, :k]
        idx[start:start + _CHUNK] = order
        dist[start:start + _CHUNK] = np.take_along_axis(d, order, axis=1)
    return idx, dist


def cluster_sums(points, labels, n):
    points = np.ascontiguousarray(points, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    sums = np.zeros((n, 2), dtype=np.float64)
    # bincount accumulates sequentially in input order, same as the C loop
    sums[:, 0] = np.bincount(labels, weights=points[:, 0], minlength=n)
    sums[:, 1] = np.bincount(labels, weights=points[:, 1], minlength=n)
    counts = np.bincount(labels, minlength=n).astype(np.int64)
    return sums, counts
