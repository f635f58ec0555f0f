"""K-means action codebook: fitting, quantization, and serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import FormatError, NumericError, ValidationError
from .numerics import Rng

CODEBOOK_VERSION = "maskplan-codebook/1"


@dataclass(frozen=True)
class Codebook:
    centroids: np.ndarray  # (N, 2)
    objective: float = float("nan")
    iterations: int = 0
    seed: int | None = None
    history: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        c = np.ascontiguousarray(self.centroids, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != 2 or c.shape[0] < 2:
            raise ValidationError(f"codebook needs an (N>=2, 2) centroid array, got {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)

    @property
    def n(self) -> int:
        return self.centroids.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Codebook):
            return NotImplemented
        return (
            np.array_equal(self.centroids, other.centroids)
            and _same_float(self.objective, other.objective)
            and self.iterations == other.iterations
            and self.seed == other.seed
        )


def _same_float(a, b):
    return a == b or (np.isnan(a) and np.isnan(b))


def objective(points: np.ndarray, centroids: np.ndarray) -> float:
    """Within-cluster sum of squared distances."""
    _, d2 = kernels.assign_nearest(points, centroids)
    return float(d2.sum())


def _kmeans_pp(points: np.ndarray, n: int, g: np.random.Generator) -> np.ndarray:
    m = points.shape[0]
    centers = np.empty((n, 2))
    centers[0] = points[g.integers(m)]
    _, d2 = kernels.assign_nearest(points, centers[:1])
    for j in range(1, n):
        total = d2.sum()
        if total <= 0.0:
            # every point already sits on a center; take any unused point
            idx = int(g.integers(m))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), g.uniform(0.0, total), side="right"))
            idx = min(idx, m - 1)
        centers[j] = points[idx]
        dx = points[:, 0] - centers[j, 0]
        dy = points[:, 1] - centers[j, 1]
        d2 = np.minimum(d2, dx * dx + dy * dy)
    return centers


def fit_kmeans(points, n: int = 256, rng: Rng = Rng(0), max_iter: int = 200, tol: float = 1e-6) -> Codebook:
    """Lloyd's algorithm from a k-means++ start.

    Stops when the relative objective change drops below ``tol``. An empty
    cluster is reseeded at the point currently farthest from its centroid.
    The objective is checked to be non-increasing at every iteration (up to a
    1e-12 relative slack for rounding in the mean update).
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if n < 2:
        raise ValidationError("codebook size must be >= 2")
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValidationError(f"expected (M, 2) waypoints, got {pts.shape}")
    if pts.shape[0] < n:
        raise ValidationError(f"{pts.shape[0]} waypoints cannot fill {n} clusters")
    distinct = np.unique(pts, axis=0)
    if distinct.shape[0] < n:
        raise ValidationError(f"only {distinct.shape[0]} distinct waypoints for {n} clusters")

    g = rng.generator()
    centers = _kmeans_pp(pts, n, g)
    history: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        labels, d2 = kernels.assign_nearest(pts, centers)
        sums, counts = kernels.cluster_sums(pts, labels, n)
        for j in np.flatnonzero(counts == 0):
            far = int(np.argmax(d2))
            centers[j] = pts[far]
            labels[far] = j
            d2[far] = 0.0
            sums, counts = kernels.cluster_sums(pts, labels, n)
        J = float(d2.sum())
        if history and J > history[-1] * (1.0 + 1e-12):
            raise NumericError(f"k-means objective increased at iteration {it}: {history[-1]} -> {J}")
        history.append(J)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        if len(history) > 1:
            prev = history[-2]
            if prev == 0.0 or abs(prev - J) / prev < tol:
                break
    final = objective(pts, centers)
    if final > history[-1] * (1.0 + 1e-12):
        raise NumericError("k-means objective increased after the last mean update")
    history.append(final)
    centers = _separate(centers)
    return Codebook(centers, objective=final, iterations=it, seed=rng.seed, history=tuple(history))


def _separate(centers: np.ndarray) -> np.ndarray:
    # duplicate centers can only come from coincident reseeds; nudge them apart
    c = centers.copy()
    _, first = np.unique(c, axis=0, return_index=True)
    dup = np.setdiff1d(np.arange(len(c)), first)
    for j in dup:
        c[j] = np.nextafter(c[j], np.inf)
    return c


def quantize(w, cb: Codebook) -> int:
    """Index of the nearest centroid; ties go to the lowest index."""
    pts = np.asarray(w, dtype=np.float64).reshape(1, 2)
    labels, _ = kernels.assign_nearest(pts, cb.centroids)
    return int(labels[0])


def quantize_many(points, cb: Codebook) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    labels, _ = kernels.assign_nearest(pts, cb.centroids)
    return labels


def dequantize(k: int, cb: Codebook) -> np.ndarray:
    k = int(k)
    if not 0 <= k < cb.n:
        raise IndexError(f"token {k} outside codebook of size {cb.n}")
    return cb.centroids[k].copy()


def quantization_floor(samples, cb: Codebook) -> dict:
    """Planning error of the quantized ground truth itself.

    Returns the average over samples of the per-horizon L2 report (see
    :func:`maskplan.evaluation.l2_at_horizons`).
    """
    from .evaluation import average_reports, l2_at_horizons

    if not samples:
        raise ValidationError("quantization_floor needs at least one sample")
    reports = []
    for s in samples:
        truth = s.trajectory
        recon = cb.centroids[quantize_many(truth, cb)]
        reports.append(l2_at_horizons(recon, truth))
    return average_reports(reports)


def save_codebook(cb: Codebook, path) -> None:
    payload = {
        "version": CODEBOOK_VERSION,
        "n": cb.n,
        "centroids": cb.centroids.tolist(),
        "objective": cb.objective,
        "iterations": cb.iterations,
        "seed": cb.seed,
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")


def load_codebook(path) -> Codebook:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read codebook {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("version") != CODEBOOK_VERSION:
        found = payload.get("version") if isinstance(payload, dict) else None
        raise FormatError(f"unsupported codebook version {found!r}")
    try:
        centroids = np.array(payload["centroids"], dtype=np.float64)
        n = int(payload["n"])
        cb = Codebook(
            centroids,
            objective=float(payload["objective"]),
            iterations=int(payload["iterations"]),
            seed=payload["seed"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"corrupt codebook file: {exc}") from None
    if cb.n != n:
        raise FormatError(f"codebook header says n={n} but holds {cb.n} centroids")
    return cb
