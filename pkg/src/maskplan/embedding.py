"""Geometry-aware action-token embeddings.

Trains an N x D matrix ``E`` so that distances between rows track distances
between the centroids they stand for. A waypoint is embedded as a
temperature-weighted mix of its K nearest centroids' rows; a small decoder must
recover the waypoint from that mix, a geometry term matches median-normalized
pairwise distances, and a supervised contrastive term groups waypoints that
quantize to the same token. K shrinks over training toward a hard lookup.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.stats import spearmanr
from torch import nn

from . import kernels
from .codebook import Codebook, quantize_many
from .errors import FormatError, NumericError, TrainingError, ValidationError
from .numerics import DTYPE, Rng, init_normal
from .trajdata import pool_actions

EMBEDDING_VERSION = "maskplan-embedding/1"


@dataclass(frozen=True)
class EmbedTrainConfig:
    d: int = 64
    k_start: int = 16
    k_end: int = 1
    tau: float = 0.5
    tau_con: float = 0.5
    lambda_recon: float = 1.0
    lambda_geom: float = 0.5
    lambda_contra: float = 0.5
    epochs: int = 8
    batch_size: int = 256
    learning_rate: float = 0.2
    momentum: float = 0.9
    hidden: int = 128
    # gradient-norm cap per step; 0 disables clipping
    clip_norm: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if not self.k_start >= self.k_end >= 1:
            raise ValidationError("need k_start >= k_end >= 1")
        if self.tau <= 0 or self.tau_con <= 0:
            raise ValidationError("temperatures must be positive")
        if min(self.lambda_recon, self.lambda_geom, self.lambda_contra) < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.epochs < 1 or self.batch_size < 3 or self.d < 1:
            raise ValidationError("epochs >= 1, batch_size >= 3 and d >= 1 required")


def k_schedule(k_start: int, k_end: int, epochs: int) -> list[int]:
    """Per-epoch neighbour count, linear in the epoch index, rounded half up."""
    if epochs == 1:
        return [k_end]
    return [
        int(math.floor(k_start + (k_end - k_start) * e / (epochs - 1) + 0.5))
        for e in range(epochs)
    ]


def soft_assign_batch(points, cb: Codebook, E: torch.Tensor, k: int, tau: float):
    """Soft-assigned embeddings for a batch of waypoints.

    Returns ``(z, weights, indices)`` with shapes (B, D), (B, k), (B, k).
    Neighbours are ordered nearest first.
    """
    if k > cb.n or k < 1:
        raise ValidationError(f"k={k} must lie in [1, {cb.n}]")
    if tau <= 0:
        raise ValidationError("tau must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    idx, d2 = kernels.knn(pts, cb.centroids, k)
    logits = -np.sqrt(d2) / tau
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    weights = torch.tensor(w, dtype=DTYPE)
    indices = torch.tensor(idx)
    z = (weights.unsqueeze(-1) * E[indices]).sum(dim=1)
    return z, weights, indices


def soft_assign(w, cb: Codebook, E, k: int, tau: float):
    E = torch.as_tensor(E, dtype=DTYPE)
    z, weights, indices = soft_assign_batch(np.asarray(w).reshape(1, 2), cb, E, k, tau)
    return z[0], weights[0], indices[0]


class CoordDecoder(nn.Module):
    """D -> hidden -> 2 perceptron with a tanh hidden layer.

    ``scale`` multiplies the output so that the network works in roughly unit
    coordinates while returning meters.
    """

    def __init__(self, d: int, hidden: int = 128, rng: Rng | None = None, scale: float = 1.0):
        super().__init__()
        self.hidden_layer = nn.Linear(d, hidden, dtype=DTYPE)
        self.out = nn.Linear(hidden, 2, dtype=DTYPE)
        self.register_buffer("scale", torch.tensor(float(scale), dtype=DTYPE))
        if rng is not None:
            with torch.no_grad():
                self.hidden_layer.weight.copy_(init_normal(rng.child("h"), (hidden, d), 1.0 / math.sqrt(d)))
                self.hidden_layer.bias.zero_()
                self.out.weight.copy_(init_normal(rng.child("o"), (2, hidden), 1.0 / math.sqrt(hidden)))
                self.out.bias.zero_()

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.scale * self.out(torch.tanh(self.hidden_layer(z)))


def decode_coords(z, decoder: CoordDecoder) -> torch.Tensor:
    return decoder(torch.as_tensor(z, dtype=DTYPE))


def loss_recon(w, z, decoder: CoordDecoder) -> torch.Tensor:
    """Mean squared Euclidean reconstruction error, in m^2."""
    w = torch.as_tensor(w, dtype=DTYPE).reshape(-1, 2)
    if w.shape[0] == 0:
        raise ValidationError("empty batch")
    diff = decoder(z) - w
    return (diff * diff).sum(dim=1).mean()


def _pair_dists(x: torch.Tensor) -> torch.Tensor:
    """Distances over unordered pairs i < j, row-major order.

    pdist's backward returns a zero gradient for coincident points.
    """
    return torch.pdist(x)


def _median(v: torch.Tensor) -> torch.Tensor:
    s, _ = torch.sort(v)
    n = s.shape[0]
    if n % 2:
        return s[n // 2]
    return 0.5 * (s[n // 2 - 1] + s[n // 2])


def loss_geom(w, z) -> torch.Tensor:
    """Squared gap between median-normalized pairwise distances in both spaces.

    Averaged over all unordered in-batch pairs. A batch whose median distance
    (in either space) is below 1e-9 contributes zero.
    """
    w = torch.as_tensor(w, dtype=DTYPE).reshape(-1, 2)
    z = torch.as_tensor(z, dtype=DTYPE)
    if w.shape[0] < 3:
        raise ValidationError("loss_geom needs a batch of at least 3")
    dw = _pair_dists(w)
    dz = _pair_dists(z)
    mw = _median(dw)
    mz = _median(dz)
    if mw.item() < 1e-9 or mz.item() < 1e-9:
        return (z * 0.0).sum()
    gap = dz / mz - dw / mw
    return (gap * gap).mean()


def loss_contra(z, clusters, tau_con: float) -> torch.Tensor:
    """Supervised contrastive loss on unit-normalized embeddings.

    Positives of anchor ``i`` are the other batch items with the same cluster
    index; the denominator runs over every other item. Anchors without
    positives are skipped and the sum is divided by the number of anchors
    that have them.
    """
    z = torch.as_tensor(z, dtype=DTYPE)
    clusters = torch.as_tensor(np.asarray(clusters), dtype=torch.int64)
    b = z.shape[0]
    if b < 2:
        raise ValidationError("loss_contra needs a batch of at least 2")
    if tau_con <= 0:
        raise ValidationError("tau_con must be positive")
    norms = z.norm(dim=1, keepdim=True)
    if torch.any(norms == 0):
        raise NumericError("zero-norm embedding cannot be normalized")
    u = z / norms
    sim = u @ u.T / tau_con
    eye = torch.eye(b, dtype=torch.bool)
    sim = sim.masked_fill(eye, float("-inf"))
    log_prob = sim - torch.logsumexp(sim, dim=1, keepdim=True)
    pos = (clusters[:, None] == clusters[None, :]) & ~eye
    n_pos = pos.sum(dim=1)
    has = n_pos > 0
    if not torch.any(has):
        return (z * 0.0).sum()
    per_anchor = -(log_prob.masked_fill(~pos, 0.0).sum(dim=1)[has] / n_pos[has])
    return per_anchor.sum() / has.sum()


def metric_alignment_score(E, cb: Codebook) -> float:
    """Spearman correlation of embedding vs centroid distances over all pairs i<j."""
    E = np.asarray(E.detach() if torch.is_tensor(E) else E, dtype=np.float64)
    c = cb.centroids
    i, j = np.triu_indices(c.shape[0], k=1)
    de = np.linalg.norm(E[i] - E[j], axis=1)
    dc = np.linalg.norm(c[i] - c[j], axis=1)
    return float(spearmanr(de, dc)[0])


def random_embeddings(n: int, d: int, rng: Rng) -> np.ndarray:
    return init_normal(rng, (n, d), 1.0 / math.sqrt(d)).numpy()


def train_embeddings(cb: Codebook, samples, config: EmbedTrainConfig = EmbedTrainConfig(),
                     representation: str = "waypoint"):
    """Fit E and the coordinate decoder with SGD + momentum.

    Returns ``(E, decoder, log)`` where ``log`` has one dict per epoch. The
    reconstruction term enters the objective in units of the waypoint scale
    (pooled coordinate std) so the three terms are commensurate; the logged
    ``recon`` value is in m^2.
    """
    points = pool_actions(samples, representation)
    if points.shape[0] < 3:
        raise ValidationError("need at least 3 waypoints")
    root = Rng(config.seed).child("embed")
    scale = float(points.std()) or 1.0
    E = nn.Parameter(init_normal(root.child("E"), (cb.n, config.d), 1.0 / math.sqrt(config.d)))
    decoder = CoordDecoder(config.d, config.hidden, root.child("decoder"), scale=scale)
    params = [E, *decoder.parameters()]
    opt = torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum)
    hard = quantize_many(points, cb)
    ks = k_schedule(config.k_start, config.k_end, config.epochs)
    bs = min(config.batch_size, points.shape[0])
    log = []
    for epoch, k in enumerate(ks):
        perm = root.child("epoch", epoch).generator().permutation(points.shape[0])
        totals = {"recon": 0.0, "geom": 0.0, "contra": 0.0, "total": 0.0}
        batches = 0
        for start in range(0, points.shape[0] - bs + 1, bs):
            sel = perm[start:start + bs]
            w = points[sel]
            z, _, _ = soft_assign_batch(w, cb, E, k, config.tau)
            lr_ = loss_recon(w, z, decoder)
            lg = loss_geom(w, z) if config.lambda_geom else torch.zeros((), dtype=DTYPE)
            lc = loss_contra(z, hard[sel], config.tau_con) if config.lambda_contra else torch.zeros((), dtype=DTYPE)
            total = config.lambda_recon * lr_ / scale**2 + config.lambda_geom * lg + config.lambda_contra * lc
            if not torch.isfinite(total):
                raise TrainingError("embedding loss diverged", epoch=epoch)
            opt.zero_grad()
            total.backward()
            if config.clip_norm > 0:
                nn.utils.clip_grad_norm_(params, config.clip_norm)
            opt.step()
            totals["recon"] += lr_.item()
            totals["geom"] += lg.item()
            totals["contra"] += lc.item()
            totals["total"] += total.item()
            batches += 1
        entry = {"epoch": epoch, "k": k}
        entry.update({key: v / max(batches, 1) for key, v in totals.items()})
        log.append(entry)
    E_out = E.detach().clone()
    if torch.any(torch.all(E_out == 0, dim=1)):
        raise TrainingError("an embedding row collapsed to zero", epoch=len(ks) - 1)
    return E_out.numpy(), decoder, log


def save_embedding(E, decoder: CoordDecoder, config: EmbedTrainConfig, path) -> None:
    E = np.asarray(E, dtype=np.float64)
    payload = {
        "version": EMBEDDING_VERSION,
        "n": int(E.shape[0]),
        "d": int(E.shape[1]),
        "E": E.reshape(-1).tolist(),
        "decoder": {k: v.detach().numpy().reshape(-1).tolist() for k, v in decoder.state_dict().items()},
        "decoder_shapes": {k: list(v.shape) for k, v in decoder.state_dict().items()},
        "config": asdict(config),
    }
    Path(path).write_text(json.dumps(payload) + "\n", encoding="utf-8")


def load_embedding(path):
    """Returns ``(E, decoder, config)``."""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read embedding file {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("version") != EMBEDDING_VERSION:
        raise FormatError("unsupported embedding file version")
    try:
        n, d = int(payload["n"]), int(payload["d"])
        E = np.array(payload["E"], dtype=np.float64).reshape(n, d)
        config = EmbedTrainConfig(**payload["config"])
        decoder = CoordDecoder(d, config.hidden)
        state = {
            k: torch.tensor(v, dtype=DTYPE).reshape(payload["decoder_shapes"][k])
            for k, v in payload["decoder"].items()
        }
        decoder.load_state_dict(state)
    except (KeyError, TypeError, ValueError, RuntimeError) as exc:
        raise FormatError(f"corrupt embedding file: {exc}") from None
    return E, decoder, config


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
