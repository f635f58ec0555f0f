"""Bidirectional transformer predictor and the masked-token diffusion loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ShapeError, TrainingError, ValidationError
from .numerics import DTYPE, AttentionBlock, Rng, init_linear, init_normal
from .sequence import ACTION, REASONING


@dataclass(frozen=True)
class PredictorConfig:
    vocab_size: int
    max_len: int
    layers: int = 4
    width: int = 64
    heads: int = 4
    ff: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.width % self.heads:
            raise ValidationError(f"width {self.width} not divisible by heads {self.heads}")
        if self.layers < 1 or self.max_len < 1 or self.vocab_size < 2:
            raise ValidationError("layers, max_len and vocab_size must be positive")


class Predictor(nn.Module):
    def __init__(self, config: PredictorConfig, action_rows: np.ndarray | None = None, action_start: int | None = None):
        super().__init__()
        self.config = config
        rng = Rng(config.seed).child("predictor")
        d, v = config.width, config.vocab_size
        std = 1.0 / math.sqrt(d)
        if action_rows is not None:
            action_rows = np.asarray(action_rows, dtype=np.float64)
            if action_rows.shape[1] != d:
                raise ShapeError(f"action embeddings have width {action_rows.shape[1]}, model width is {d}")
            # other rows start at the same scale as the supplied action rows
            std = float(np.sqrt(np.mean(action_rows**2)))
        tok = init_normal(rng.child("tok"), (v, d), std)
        if action_rows is not None:
            if action_start is None or action_start + action_rows.shape[0] != v:
                raise ShapeError("action rows must fill the end of the vocabulary")
            tok[action_start:] = torch.from_numpy(action_rows.copy())
        self.action_start = v if action_start is None else action_start
        self.tok_emb = nn.Parameter(tok)
        self.pos_emb = nn.Parameter(init_normal(rng.child("pos"), (config.max_len, d), std))
        self.blocks = nn.ModuleList(
            AttentionBlock(d, config.heads, config.ff, rng.child("block", i)) for i in range(config.layers)
        )
        self.norm = nn.LayerNorm(d, dtype=DTYPE)
        self.out = nn.Linear(d, v, dtype=DTYPE)
        init_linear(self.out, rng.child("out"))
        if action_rows is not None:
            # action rows of the output head start from the same embeddings, rescaled to
            # the head's init scale, so nearby waypoints also begin with similar logits
            with torch.no_grad():
                head = self.out.weight
                rows = torch.from_numpy(action_rows.copy())
                scale = head[: self.action_start].pow(2).mean().sqrt() / rows.pow(2).mean().sqrt().clamp_min(1e-12)
                head[self.action_start:] = rows * scale
        self.freeze_actions = False

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        """Logits of shape (B, L, V) for integer ids of shape (B, L)."""
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        n = ids.shape[1]
        if n > self.config.max_len:
            raise ShapeError(f"sequence of length {n} exceeds max_len {self.config.max_len}")
        x = self.tok_emb[ids] + self.pos_emb[:n]
        for block in self.blocks:
            x = block(x)
        return self.out(self.norm(x))


def build_predictor(config: PredictorConfig, E=None, action_start=None) -> Predictor:
    return Predictor(config, action_rows=E, action_start=action_start)


@torch.no_grad()
def forward_predict(model: Predictor, ids) -> np.ndarray:
    """Per-position distributions over the vocabulary, shape (L, V) or (B, L, V)."""
    t = torch.as_tensor(np.asarray(ids), dtype=torch.int64)
    probs = torch.softmax(model(t), dim=-1)
    return probs[0].numpy() if t.dim() == 1 else probs.numpy()


def masked_nll(logits: torch.Tensor, targets: torch.Tensor, flags: torch.Tensor) -> torch.Tensor:
    """-log p(target) at every flagged position, flattened."""
    logp = torch.log_softmax(logits, dim=-1)
    picked = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return -picked[flags]


def diffusion_loss(model: Predictor, ids, targets, flags, t=None, importance_weighting: bool = False,
                   segment=None, return_parts: bool = False):
    """Mean negative log-likelihood over masked positions.

    ``flags`` marks masked generation slots (PAD is never flagged). With
    ``importance_weighting`` each term is scaled by 1/t of its row. With
    ``return_parts`` also returns the action-only and reasoning-only means
    (``None`` when a segment has no masked positions).
    """
    ids = torch.as_tensor(np.asarray(ids), dtype=torch.int64)
    targets = torch.as_tensor(np.asarray(targets), dtype=torch.int64)
    flags = torch.as_tensor(np.asarray(flags), dtype=torch.bool)
    if ids.dim() == 1:
        ids, targets, flags = ids[None], targets[None], flags[None]
    count = int(flags.sum())
    if count == 0:
        raise ValidationError("diffusion_loss needs at least one masked position")
    nll = masked_nll(model(ids), targets, flags)
    if importance_weighting:
        if t is None:
            raise ValidationError("importance weighting needs the per-row masking ratio t")
        inv_t = (1.0 / torch.as_tensor(np.asarray(t), dtype=DTYPE).reshape(-1, 1)).expand_as(flags)
        nll = nll * inv_t[flags]
    loss = nll.mean()
    if not return_parts:
        return loss
    parts = {}
    if segment is not None:
        seg = torch.as_tensor(np.asarray(segment)).reshape(flags.shape)[flags]
        for name, tag in (("action", ACTION), ("reasoning", REASONING)):
            sel = seg == tag
            parts[name] = nll[sel].mean().item() if bool(sel.any()) else None
    return loss, parts


class Adam:
    """Adam without weight decay; state is plain tensors so checkpoints are exact."""

    def __init__(self, params, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.step_count = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    @torch.no_grad()
    def step(self):
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / c2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-self.lr / c1)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state(self) -> dict:
        return {"step": self.step_count, "m": [t.clone() for t in self.m], "v": [t.clone() for t in self.v]}

    def load_state(self, state: dict) -> None:
        self.step_count = int(state["step"])
        with torch.no_grad():
            for dst, src in zip(self.m, state["m"]):
                dst.copy_(src)
            for dst, src in zip(self.v, state["v"]):
                dst.copy_(src)


def make_optimizer(model: Predictor, lr: float = 3e-4) -> Adam:
    return Adam(model.parameters(), lr=lr)


def train_step(model: Predictor, batch: dict, opt: Adam, importance_weighting: bool = False) -> float:
    """One Adam step on the masked-token loss; returns the loss value.

    ``batch`` holds ``ids``, ``targets``, ``flags`` and optionally ``t``.
    When ``model.freeze_actions`` is set, action-token embedding rows keep
    their values.
    """
    opt.zero_grad()
    loss = diffusion_loss(model, batch["ids"], batch["targets"], batch["flags"], t=batch.get("t"),
                          importance_weighting=importance_weighting)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError("non-finite diffusion loss")
    loss.backward()
    if model.freeze_actions and model.tok_emb.grad is not None:
        model.tok_emb.grad[model.action_start:] = 0.0
    opt.step()
    return value
