"""Two-stage training (action warm-up, then joint action+reasoning) and checkpoints.

Every random draw during training comes from a stream keyed by
(seed, stage, epoch, batch), so a run resumed from a checkpoint replays
exactly the batches and masks an uninterrupted run would have used.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .codebook import Codebook
from .decoding import DecodeConfig, decode_batch, extract_trajectory, reasoning_words
from .errors import ConfigurationError, FormatError, IntegrityError, TrainingError, ValidationError
from .evaluation import (
    DecodeOutcome,
    L2Report,
    PlanningReport,
    average_reports,
    failure_rate,
    l2_at_horizons,
    label_from_reasoning,
    reasoning_accuracy,
)
from .model import Adam, Predictor, PredictorConfig, diffusion_loss
from .numerics import DTYPE, Rng
from .sequence import (
    ACTION,
    INSTRUCTION_LEN,
    PAD_SEG,
    REASONING,
    REASONING_LEN,
    Vocabulary,
    assemble_sequence,
    batch_arrays,
    generation_template,
    mask_batch,
)

CHECKPOINT_VERSION = "maskplan-checkpoint/1"
LOG_COLUMNS = ("epoch", "stage", "total_loss", "action_loss", "reasoning_loss", "wall_seconds")


@dataclass(frozen=True)
class StageConfig:
    stage: int
    epochs: int = 8
    batch_size: int = 64
    learning_rate: float = 1e-3
    mask_eps: float = 0.05
    seed: int = 0
    representation: str = "waypoint"
    importance_weighting: bool = False
    # None means: frozen in stage 1, trainable in stage 2
    freeze_actions: bool | None = None
    allow_missing_stage1: bool = False

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigurationError(f"stage must be 1 or 2, got {self.stage}")
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate < 0:
            raise ConfigurationError("epochs and batch_size must be positive, learning_rate non-negative")
        if not 0.0 <= self.mask_eps < 1.0:
            raise ConfigurationError("mask_eps must lie in [0, 1)")

    @property
    def include_reasoning(self) -> bool:
        return self.stage == 2

    @property
    def frozen(self) -> bool:
        return self.stage == 1 if self.freeze_actions is None else self.freeze_actions


@dataclass
class TrainState:
    model: Predictor
    opt: Adam
    stage: int
    epoch: int = 0
    batch: int = 0
    stages_completed: list = field(default_factory=list)
    log: list = field(default_factory=list)
    # running sums for the epoch in progress
    accum: dict = field(default_factory=lambda: {"total": 0.0, "n": 0, "action": 0.0, "n_action": 0,
                                                   "reasoning": 0.0, "n_reasoning": 0, "wall": 0.0})


def max_len(horizon: int = 6, context_len: int = 8) -> int:
    return context_len + INSTRUCTION_LEN + horizon + REASONING_LEN


def encode_samples(samples, cb: Codebook, vocab: Vocabulary, include_reasoning: bool, representation: str = "waypoint"):
    seqs = [assemble_sequence(s, cb, vocab, include_reasoning, representation) for s in samples]
    return batch_arrays(seqs)


def new_state(model: Predictor, config: StageConfig, previous: TrainState | None = None) -> TrainState:
    """Fresh optimizer for a stage; stage-2 requires a finished stage 1 unless overridden."""
    done = list(previous.stages_completed) if previous is not None else []
    if config.stage == 2 and 1 not in done and not config.allow_missing_stage1:
        raise ConfigurationError("stage 2 needs a completed stage-1 checkpoint (or allow_missing_stage1)")
    log = list(previous.log) if previous is not None else []
    return TrainState(model=model, opt=Adam(model.parameters(), lr=config.learning_rate), stage=config.stage,
                      stages_completed=done, log=log)


def train_stage(state: TrainState, samples, cb: Codebook, vocab: Vocabulary, config: StageConfig,
                max_steps: int | None = None, timing: bool = False) -> TrainState:
    """Run (or continue) one stage. Stops early after ``max_steps`` optimizer steps."""
    if state.stage != config.stage:
        raise ConfigurationError(f"state is for stage {state.stage}, config for stage {config.stage}")
    targets, segment = encode_samples(samples, cb, vocab, config.include_reasoning, config.representation)
    has_reasoning = bool(np.any((segment == REASONING) | (segment == PAD_SEG)))
    if config.stage == 1 and has_reasoning:
        raise ConfigurationError("stage-1 sequences must not contain a reasoning segment")
    if config.stage == 2 and not has_reasoning:
        raise ConfigurationError("stage-2 sequences need a reasoning segment")
    model = state.model
    model.freeze_actions = config.frozen
    state.opt.lr = config.learning_rate
    n = targets.shape[0]
    bs = min(config.batch_size, n)
    n_batches = n // bs
    root = Rng(config.seed).child("train", config.stage)
    steps = 0
    while state.epoch < config.epochs:
        perm = root.child("epoch", state.epoch).generator().permutation(n)
        while state.batch < n_batches:
            if max_steps is not None and steps >= max_steps:
                return state
            t0 = time.perf_counter()
            sel = perm[state.batch * bs:(state.batch + 1) * bs]
            g = root.child("epoch", state.epoch, "batch", state.batch).generator()
            ids, flags, t = mask_batch(targets[sel], segment[sel], g, vocab.mask, config.mask_eps)
            if flags.any():
                _step(state, ids, targets[sel], flags, t, segment[sel], config)
            state.batch += 1
            steps += 1
            if timing:
                state.accum["wall"] += time.perf_counter() - t0
        _close_epoch(state, config, timing)
    if config.stage not in state.stages_completed:
        state.stages_completed.append(config.stage)
    return state


def _step(state: TrainState, ids, targets, flags, t, segment, config: StageConfig) -> None:
    model, opt = state.model, state.opt
    opt.zero_grad()
    loss, parts = diffusion_loss(model, ids, targets, flags, t=t, importance_weighting=config.importance_weighting,
                                 segment=segment, return_parts=True)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError("non-finite diffusion loss", epoch=state.epoch)
    loss.backward()
    if model.freeze_actions and model.tok_emb.grad is not None:
        model.tok_emb.grad[model.action_start:] = 0.0
    opt.step()
    a = state.accum
    a["total"] += value
    a["n"] += 1
    for name in ("action", "reasoning"):
        if parts.get(name) is not None:
            a[name] += parts[name]
            a["n_" + name] += 1


def _close_epoch(state: TrainState, config: StageConfig, timing: bool) -> None:
    a = state.accum
    entry = {
        "epoch": state.epoch,
        "stage": config.stage,
        "total_loss": a["total"] / a["n"] if a["n"] else float("nan"),
        # None marks a segment that was not trained in this stage
        "action_loss": a["action"] / a["n_action"] if a["n_action"] else None,
        "reasoning_loss": a["reasoning"] / a["n_reasoning"] if a["n_reasoning"] else None,
        "wall_seconds": a["wall"] if timing else None,
    }
    if not math.isfinite(entry["total_loss"]):
        raise TrainingError("epoch ended without a finite loss", epoch=state.epoch)
    state.log.append(entry)
    state.epoch += 1
    state.batch = 0
    state.accum = {k: 0.0 if isinstance(v, float) else 0 for k, v in a.items()}


def run_stage1(model: Predictor, samples, cb: Codebook, vocab: Vocabulary, config: StageConfig | None = None,
               timing: bool = False):
    config = config or StageConfig(stage=1)
    if config.stage != 1:
        raise ConfigurationError("run_stage1 needs a stage-1 config")
    state = train_stage(new_state(model, config), samples, cb, vocab, config, timing=timing)
    return state


def run_stage2(state_or_model, samples, cb: Codebook, vocab: Vocabulary, config: StageConfig | None = None,
               timing: bool = False):
    config = config or StageConfig(stage=2)
    if config.stage != 2:
        raise ConfigurationError("run_stage2 needs a stage-2 config")
    if isinstance(state_or_model, TrainState):
        model, previous = state_or_model.model, state_or_model
    else:
        model, previous = state_or_model, None
    state = new_state(model, config, previous)
    return train_stage(state, samples, cb, vocab, config, timing=timing)


def log_csv(log) -> str:
    lines = [",".join(LOG_COLUMNS)]
    for e in log:
        cells = []
        for col in LOG_COLUMNS:
            v = e.get(col)
            cells.append("" if v is None else repr(v) if isinstance(v, float) else str(v))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- evaluation


def evaluate_planner(model, samples, cb: Codebook, vocab: Vocabulary, decode: DecodeConfig = DecodeConfig(),
                     representation: str = "waypoint", include_reasoning: bool = True, batch_size: int = 256,
                     return_details: bool = False):
    """Decode every sample from its conditioning and score plan and reasoning."""
    model.eval()
    horizon = len(samples[0].waypoints)
    reports, outcomes, ready, walls = [], [], [], []
    token_acc, label_hits = [], []
    schedules_all = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        templates = [generation_template(s, vocab, horizon, include_reasoning=include_reasoning) for s in chunk]
        decoded, schedules = decode_batch(model, templates, decode, vocab)
        schedules_all.extend(schedules)
        for s, seq, sched in zip(chunk, decoded, schedules):
            try:
                traj = extract_trajectory(seq, cb, vocab, representation)
                outcomes.append(DecodeOutcome(traj))
                reports.append(l2_at_horizons(traj, s.trajectory))
            except ValidationError as exc:
                outcomes.append(DecodeOutcome(None, str(exc)))
            ready.append(sched.action_ready_step)
            walls.append(sched.wall_ms)
            if include_reasoning:
                truth = assemble_sequence(s, cb, vocab, True, representation)
                pos = seq.positions(REASONING)
                words = reasoning_words(seq, vocab)
                score = reasoning_accuracy(seq.ids[pos], truth.targets[pos], vocab.pad, words, s.label)
                if score.token_accuracy is not None:
                    token_acc.append(score.token_accuracy)
                label_hits.append(score.label_match)
    l2 = average_reports(reports) if reports else L2Report(at={1.0: float("nan")}, avg=float("nan"))
    report = PlanningReport(
        l2=l2,
        failure_rate=failure_rate(outcomes),
        steps_to_action_ready=float(np.mean(ready)),
        wall_ms_per_decode=float(np.mean(walls)),
        token_accuracy=float(np.mean(token_acc)) if token_acc else None,
        label_match=float(np.mean(label_hits)) if label_hits else None,
    )
    if return_details:
        return report, outcomes, schedules_all
    return report


# ---------------------------------------------------------------- checkpoints


def _encode_tensor(t: torch.Tensor) -> dict:
    arr = t.detach().contiguous().numpy().astype("<f8", copy=False)
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode_tensor(rec: dict) -> torch.Tensor:
    raw = base64.b64decode(rec["data"].encode("ascii"), validate=True)
    arr = np.frombuffer(raw, dtype="<f8").reshape(rec["shape"]).copy()
    return torch.from_numpy(arr)


def _digest(payload: dict) -> str:
    body = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(body).hexdigest()


def save_checkpoint(state: TrainState, path, extra: dict | None = None, codebook_sha256: str | None = None,
                    embedding_sha256: str | None = None) -> None:
    model = state.model
    payload = {
        "version": CHECKPOINT_VERSION,
        "predictor_config": asdict(model.config),
        "action_start": model.action_start,
        "params": {name: _encode_tensor(p) for name, p in model.state_dict().items()},
        "optimizer": {
            "lr": state.opt.lr,
            "step": state.opt.step_count,
            "m": [_encode_tensor(t) for t in state.opt.m],
            "v": [_encode_tensor(t) for t in state.opt.v],
        },
        "rng_state": {"stage": state.stage, "epoch": state.epoch, "batch": state.batch},
        "stages_completed": list(state.stages_completed),
        "log": state.log,
        "accum": state.accum,
        "hashes": {"codebook": codebook_sha256, "embedding": embedding_sha256},
        "extra": extra or {},
    }
    payload["sha256"] = _digest(payload)
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path, codebook_sha256: str | None = None, embedding_sha256: str | None = None) -> tuple[TrainState, dict]:
    """Restore a TrainState; returns ``(state, extra)``.

    Raises IntegrityError if the file was modified or if a supplied codebook or
    embedding hash differs from the one recorded at save time.
    """
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        raise FormatError("unsupported checkpoint version")
    recorded = payload.pop("sha256", None)
    if recorded != _digest(payload):
        raise IntegrityError("checkpoint content hash mismatch (file modified?)")
    hashes = payload["hashes"]
    for name, given in (("codebook", codebook_sha256), ("embedding", embedding_sha256)):
        if given is not None and hashes.get(name) is not None and hashes[name] != given:
            raise IntegrityError(f"checkpoint was trained against a different {name} file")
    try:
        config = PredictorConfig(**payload["predictor_config"])
        model = Predictor(config, action_start=payload["action_start"])
        model.load_state_dict({k: _decode_tensor(v) for k, v in payload["params"].items()})
        opt = Adam(model.parameters(), lr=payload["optimizer"]["lr"])
        opt.load_state({
            "step": payload["optimizer"]["step"],
            "m": [_decode_tensor(r) for r in payload["optimizer"]["m"]],
            "v": [_decode_tensor(r) for r in payload["optimizer"]["v"]],
        })
        rs = payload["rng_state"]
        state = TrainState(model=model, opt=opt, stage=rs["stage"], epoch=rs["epoch"], batch=rs["batch"],
                           stages_completed=list(payload["stages_completed"]), log=payload["log"],
                           accum=payload["accum"])
    except (KeyError, TypeError, ValueError, RuntimeError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}") from None
    return state, payload.get("extra", {})
