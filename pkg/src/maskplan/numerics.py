"""Seeded RNG streams, stable softmax, attention blocks, and a gradient checker.

All differentiable math runs on float64 torch tensors so that central
differences at h=1e-5 can resolve relative gradient errors well below 1e-4.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import NumericError, ShapeError

DTYPE = torch.float64


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream keys must be non-negative")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


@dataclass(frozen=True)
class Rng:
    """A named, counter-based random stream.

    ``Rng(seed).child("data", 3)`` is an independent stream identified by its
    path, so the values a consumer sees never depend on how many draws some
    other consumer made first. Backed by Philox-4x64.
    """

    seed: int
    path: tuple[int, ...] = field(default=())
    algorithm = "philox4x64"

    def child(self, *parts) -> "Rng":
        return Rng(self.seed, self.path + tuple(_key(p) for p in parts))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))


def softmax_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects rank 2, got rank {x.ndim}")
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def grad_check(
    f: Callable,
    params: torch.Tensor | Sequence[torch.Tensor],
    h: float = 1e-5,
) -> float:
    """Max relative error between autograd and central-difference gradients.

    If ``params`` is a single tensor, ``f(params)`` is evaluated; if it is a
    sequence of tensors (e.g. module parameters), ``f()`` is called and is
    expected to read them. The error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    single = isinstance(params, torch.Tensor)
    tensors = [params] if single else list(params)

    def evaluate() -> torch.Tensor:
        out = f(tensors[0]) if single else f()
        if not torch.is_tensor(out) or out.numel() != 1:
            raise ShapeError("grad_check needs a scalar-valued function")
        if not torch.isfinite(out):
            raise NumericError("function evaluated to a non-finite value")
        return out

    originals = [t.requires_grad for t in tensors]
    for t in tensors:
        t.grad = None
        t.requires_grad_(True)
    try:
        value = evaluate()
        grads = torch.autograd.grad(value, tensors, allow_unused=True)
        worst = 0.0
        with torch.no_grad():
            for t, g in zip(tensors, grads):
                analytic = torch.zeros_like(t) if g is None else g
                flat = t.view(-1)
                for i in range(flat.numel()):
                    saved = flat[i].item()
                    flat[i] = saved + h
                    plus = evaluate().item()
                    flat[i] = saved - h
                    minus = evaluate().item()
                    flat[i] = saved
                    numeric = (plus - minus) / (2.0 * h)
                    err = abs(analytic.view(-1)[i].item() - numeric) / max(1.0, abs(numeric))
                    worst = max(worst, err)
    finally:
        for t, req in zip(tensors, originals):
            t.requires_grad_(req)
    return worst


def init_normal(rng: Rng, shape, std: float) -> torch.Tensor:
    values = rng.generator().normal(0.0, std, size=shape)
    return torch.tensor(values, dtype=DTYPE)


def init_linear(layer: nn.Linear, rng: Rng) -> None:
    std = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.copy_(init_normal(rng.child("w"), tuple(layer.weight.shape), std))
        if layer.bias is not None:
            layer.bias.zero_()


class AttentionBlock(nn.Module):
    """Pre-norm transformer block with full (non-causal) self-attention."""

    def __init__(self, d: int, heads: int, ff: int, rng: Rng):
        super().__init__()
        if d % heads:
            raise ShapeError(f"width {d} not divisible by {heads} heads")
        self.d, self.heads = d, heads
        self.norm1 = nn.LayerNorm(d, dtype=DTYPE)
        self.qkv = nn.Linear(d, 3 * d, dtype=DTYPE)
        self.proj = nn.Linear(d, d, dtype=DTYPE)
        self.norm2 = nn.LayerNorm(d, dtype=DTYPE)
        self.ff_in = nn.Linear(d, ff, dtype=DTYPE)
        self.ff_out = nn.Linear(ff, d, dtype=DTYPE)
        for name in ("qkv", "proj", "ff_in", "ff_out"):
            init_linear(getattr(self, name), rng.child(name))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d:
            raise ShapeError(f"expected width {self.d}, got {x.shape[-1]}")
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        b, n, d = x.shape
        hd = d // self.heads
        q, k, v = self.qkv(self.norm1(x)).split(d, dim=-1)
        q = q.view(b, n, self.heads, hd).transpose(1, 2)
        k = k.view(b, n, self.heads, hd).transpose(1, 2)
        v = v.view(b, n, self.heads, hd).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, n, d)
        x = x + self.proj(y)
        x = x + self.ff_out(torch.nn.functional.gelu(self.ff_in(self.norm2(x))))
        return x.squeeze(0) if squeeze else x


def attention_block(x: torch.Tensor, block: AttentionBlock) -> torch.Tensor:
    return block(x)
