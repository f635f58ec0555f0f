"""Nearest-centroid kernels with backend selection at import.

The compiled Cython module is used when it was built; otherwise (or when
``MASKPLAN_PURE_PYTHON=1`` is set) the numpy implementation is used. Both
backends produce identical outputs.
"""

import os

import numpy as np

from . import _kernels_py

_impl = _kernels_py
BACKEND = "python"
if not os.environ.get("MASKPLAN_PURE_PYTHON"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        pass


def _as_points(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 2:
        raise ValueError(f"expected an (M, 2) array, got shape {a.shape}")
    return a


def assign_nearest(points, centroids, backend=None):
    """Nearest centroid index and squared distance for each point.

    Ties go to the lowest centroid index.
    """
    impl = _select(backend)
    return impl.assign_nearest(_as_points(points), _as_points(centroids))


def knn(points, centroids, k, backend=None):
    """Indices and squared distances of the ``k`` nearest centroids, ascending."""
    centroids = _as_points(centroids)
    if not 1 <= k <= centroids.shape[0]:
        raise ValueError(f"k={k} outside [1, {centroids.shape[0]}]")
    impl = _select(backend)
    return impl.knn(_as_points(points), centroids, int(k))


def cluster_sums(points, labels, n, backend=None):
    impl = _select(backend)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    return impl.cluster_sums(_as_points(points), labels, int(n))


def _select(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _kernels_py
    if backend == "cython":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown backend {backend!r}")
