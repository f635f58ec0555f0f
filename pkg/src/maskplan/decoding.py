"""Iterative unmasking: action-priority and global-confidence schedules.

Decoding is greedy. At each step the predictor scores every masked slot,
the schedule picks which slots to commit, and the committed IDs never change
afterwards. Action slots may only take IDs from the action block.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .codebook import Codebook
from .errors import IncompleteDecodeError, SchedulerInvariantError, ValidationError
from .sequence import ACTION, REASONING, TokenSequence, Vocabulary, reconstruct_waypoints

POLICIES = ("action_priority", "global_confidence")


@dataclass(frozen=True)
class DecodeConfig:
    total_steps: int = 8
    action_steps: int = 3
    policy: str = "action_priority"
    seed: int = 0

    def __post_init__(self):
        if self.total_steps < 1 or not 1 <= self.action_steps <= self.total_steps:
            raise ValidationError("need 1 <= action_steps <= total_steps")
        if self.policy not in POLICIES:
            raise ValidationError(f"unknown policy {self.policy!r}")


@dataclass
class StepRecord:
    step: int
    positions: list
    ids: list
    confidences: list


@dataclass
class DecodeSchedule:
    policy: str
    steps: list = field(default_factory=list)
    action_ready_step: int | None = None
    wall_ms: float | None = None

    def step_of(self) -> dict:
        """Position -> step at which it was unmasked."""
        return {p: rec.step for rec in self.steps for p in rec.positions}


def confidence_scores(probs: np.ndarray, positions, action_slots, vocab: Vocabulary):
    """Confidence ``u_j`` and greedy ID for each listed position.

    ``probs`` is (L, V). At action slots the max is taken over the action
    block only; elsewhere over every ID except MASK.
    """
    positions = np.asarray(positions, dtype=np.int64)
    action_slots = np.asarray(action_slots, dtype=bool)
    rows = probs[positions]
    scores = np.empty(len(positions))
    ids = np.empty(len(positions), dtype=np.int64)
    for n, (row, is_act) in enumerate(zip(rows, action_slots)):
        if is_act:
            block = row[vocab.action_start:]
            k = int(np.argmax(block))
            ids[n] = vocab.action_start + k
            scores[n] = block[k]
        else:
            masked = row.copy()
            if vocab.mask < len(masked):
                masked[vocab.mask] = -1.0
            k = int(np.argmax(masked))
            ids[n] = k
            scores[n] = row[k]
    return scores, ids


def _predict(model, ids: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        logits = model(torch.as_tensor(ids, dtype=torch.int64))
        return torch.softmax(logits, dim=-1).numpy()


def _pick(scores: np.ndarray, positions: np.ndarray, count: int) -> np.ndarray:
    # highest confidence first, lower position index on ties
    order = np.lexsort((positions, -scores))
    return order[:count]


def decode_batch(model, seqs: Sequence[TokenSequence], config: DecodeConfig, vocab: Vocabulary):
    """Decode several sequences that share one layout; returns (seqs, schedules)."""
    if not seqs:
        return [], []
    segment = seqs[0].segment
    for s in seqs:
        if not np.array_equal(s.segment, segment):
            raise ValidationError("batched decode needs a shared segment layout")
        gen = (s.segment == ACTION) | (s.segment == REASONING)
        if not np.all(s.mask_flags[gen]) or np.any(s.mask_flags[~gen]):
            raise ValidationError("every generation slot, and only those, must start masked")
    ids = np.stack([s.ids for s in seqs]).copy()
    flags = np.stack([s.mask_flags for s in seqs]).copy()
    act_pos = np.flatnonzero(segment == ACTION)
    rea_pos = np.flatnonzero(segment == REASONING)
    is_action = segment == ACTION
    S, Sa = config.total_steps, config.action_steps
    if config.policy == "action_priority" and len(rea_pos) and Sa == S:
        raise ValidationError("action_priority needs action_steps < total_steps when reasoning slots exist")
    schedules = [DecodeSchedule(policy=config.policy) for _ in seqs]
    t0 = time.perf_counter()
    for step in range(1, S + 1):
        if not flags.any():
            break
        probs = _predict(model, ids)
        for b in range(len(seqs)):
            if config.policy == "action_priority":
                if step <= Sa:
                    cand = act_pos[flags[b, act_pos]]
                    budget = Sa - step + 1
                else:
                    cand = rea_pos[flags[b, rea_pos]]
                    budget = S - step + 1
            else:
                cand = np.flatnonzero(flags[b])
                budget = S - step + 1
            if len(cand) == 0:
                continue
            count = math.ceil(len(cand) / budget)
            scores, best = confidence_scores(probs[b], cand, is_action[cand], vocab)
            chosen = _pick(scores, cand, count)
            pos = cand[chosen]
            ids[b, pos] = best[chosen]
            flags[b, pos] = False
            schedules[b].steps.append(
                StepRecord(step, pos.tolist(), best[chosen].tolist(), scores[chosen].tolist())
            )
            if schedules[b].action_ready_step is None and not flags[b, act_pos].any():
                schedules[b].action_ready_step = step
        if config.policy == "action_priority" and step == Sa and flags[:, act_pos].any():
            raise SchedulerInvariantError("action budget exhausted with action slots still masked")
    wall = (time.perf_counter() - t0) * 1000.0 / len(seqs)
    out = []
    for b, s in enumerate(seqs):
        if flags[b].any():
            raise SchedulerInvariantError("decode finished with masked slots remaining")
        if not np.all(vocab.is_action(ids[b, act_pos])):
            raise SchedulerInvariantError("non-action ID committed at an action slot")
        if config.policy == "action_priority":
            check_action_first(schedules[b], segment)
        schedules[b].wall_ms = wall
        out.append(s.with_ids(ids[b].copy(), flags[b].copy()))
    return out, schedules


def check_action_first(schedule: DecodeSchedule, segment: np.ndarray) -> None:
    step_of = schedule.step_of()
    act = [step_of[p] for p in np.flatnonzero(segment == ACTION)]
    rea = [step_of[p] for p in np.flatnonzero(segment == REASONING)]
    if act and rea and min(rea) <= max(act):
        raise SchedulerInvariantError("a reasoning slot was unmasked before the last action slot")


def action_priority_decode(model, seq: TokenSequence, config: DecodeConfig, vocab: Vocabulary):
    cfg = DecodeConfig(config.total_steps, config.action_steps, "action_priority", config.seed)
    out, sched = decode_batch(model, [seq], cfg, vocab)
    return out[0], sched[0]


def global_confidence_decode(model, seq: TokenSequence, config: DecodeConfig, vocab: Vocabulary):
    cfg = DecodeConfig(config.total_steps, config.action_steps, "global_confidence", config.seed)
    out, sched = decode_batch(model, [seq], cfg, vocab)
    return out[0], sched[0]


def extract_trajectory(seq: TokenSequence, cb: Codebook, vocab: Vocabulary, representation: str = "waypoint") -> np.ndarray:
    pos = seq.positions(ACTION)
    if seq.mask_flags[pos].any() or np.any(seq.ids[pos] == vocab.mask):
        raise IncompleteDecodeError("action slots are still masked")
    if not np.all(vocab.is_action(seq.ids[pos])):
        raise IncompleteDecodeError("action slot holds a non-action token")
    return reconstruct_waypoints(seq.ids[pos] - vocab.action_start, cb, representation)


def reasoning_words(seq: TokenSequence, vocab: Vocabulary) -> list[str]:
    """Decoded reasoning text, cut at the first EOS (BOS and PAD dropped)."""
    words = []
    for tok in seq.ids[seq.positions(REASONING)]:
        if tok == vocab.eos:
            break
        if tok in (vocab.bos, vocab.pad):
            continue
        words.append(vocab.word_of(int(tok)))
    return words


def trace_records(decode_id: int, schedule: DecodeSchedule, include_wall: bool = False) -> list[dict]:
    recs = [
        {
            "kind": "step",
            "decode": decode_id,
            "policy": schedule.policy,
            "step": r.step,
            "positions": r.positions,
            "ids": r.ids,
            "confidences": r.confidences,
        }
        for r in schedule.steps
    ]
    summary = {
        "kind": "summary",
        "decode": decode_id,
        "policy": schedule.policy,
        "action_ready_step": schedule.action_ready_step,
        "total_steps": len(schedule.steps),
    }
    # wall-clock is opt-in so trace files stay byte-reproducible by default
    summary["wall_ms"] = schedule.wall_ms if include_wall else 0.0
    recs.append(summary)
    return recs


def write_trace(path, schedules: Sequence[DecodeSchedule], include_wall: bool = False) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, sched in enumerate(schedules):
            for rec in trace_records(i, sched, include_wall):
                fh.write(json.dumps(rec))
                fh.write("\n")
