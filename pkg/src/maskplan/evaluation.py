"""Planning and reasoning metrics, failure accounting, and latency reports."""

from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .trajdata import LABEL_KEYWORDS

HORIZONS_S = (1.0, 2.0, 3.0)


@dataclass(frozen=True)
class L2Report:
    at: dict  # horizon seconds -> meters
    avg: float

    def row(self) -> dict:
        out = {f"l2_{h:g}s": v for h, v in self.at.items()}
        out["l2_avg"] = self.avg
        return out


def l2_at_horizons(pred, truth, dt: float = 0.5, horizons=HORIZONS_S) -> L2Report:
    """Euclidean error at each reporting horizon, plus the mean over all waypoints."""
    p = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    t = np.asarray(truth, dtype=np.float64).reshape(-1, 2)
    if p.shape != t.shape:
        raise ValidationError(f"trajectory length mismatch: {p.shape[0]} vs {t.shape[0]}")
    err = np.hypot(p[:, 0] - t[:, 0], p[:, 1] - t[:, 1])
    at = {}
    for h in horizons:
        k = int(round(h / dt)) - 1
        if not 0 <= k < len(err):
            raise ValidationError(f"horizon {h}s not covered by {len(err)} waypoints at dt={dt}")
        at[h] = float(err[k])
    return L2Report(at=at, avg=float(err.mean()))


def average_reports(reports: Sequence[L2Report]) -> L2Report:
    if not reports:
        raise ValidationError("no reports to average")
    keys = list(reports[0].at)
    at = {h: float(np.mean([r.at[h] for r in reports])) for h in keys}
    return L2Report(at=at, avg=float(np.mean([r.avg for r in reports])))


@dataclass(frozen=True)
class DecodeOutcome:
    """One decode: the trajectory if extraction succeeded, else ``None``."""

    trajectory: np.ndarray | None
    error: str | None = None


def failure_rate(decodes: Sequence[DecodeOutcome]) -> float:
    if not decodes:
        return 0.0
    failed = sum(1 for d in decodes if d.trajectory is None or np.shape(d.trajectory)[0] == 0)
    return failed / len(decodes)


def label_from_reasoning(words: Sequence[str]) -> str | None:
    """Maneuver named by the decoded reasoning, or None if absent or ambiguous."""
    found = {label for label, kw in LABEL_KEYWORDS.items() if kw in words}
    return found.pop() if len(found) == 1 else None


@dataclass(frozen=True)
class ReasoningScore:
    token_accuracy: float | None  # None when the truth is all padding
    label_match: bool


def reasoning_accuracy(pred_ids, truth_ids, pad_id: int, pred_words=None, label: str | None = None) -> ReasoningScore:
    """Exact-match fraction over non-PAD truth positions, and label agreement."""
    pred_ids = list(pred_ids)
    truth_ids = list(truth_ids)
    if len(pred_ids) != len(truth_ids):
        raise ValidationError("reasoning sequences must share the fixed length")
    keep = [i for i, t in enumerate(truth_ids) if t != pad_id]
    acc = None
    if keep:
        acc = sum(pred_ids[i] == truth_ids[i] for i in keep) / len(keep)
    match = False
    if label is not None and pred_words is not None:
        match = label_from_reasoning(pred_words) == label
    return ReasoningScore(token_accuracy=acc, label_match=match)


@dataclass
class PlanningReport:
    l2: L2Report
    failure_rate: float
    steps_to_action_ready: float
    wall_ms_per_decode: float
    token_accuracy: float | None = None
    label_match: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.l2.avg < 0 or any(v < 0 for v in self.l2.at.values()):
            raise ValidationError("negative L2")
        if not 0.0 <= self.failure_rate <= 1.0:
            raise ValidationError("failure rate outside [0, 1]")

    def row(self, include_wall: bool = True) -> dict:
        out = dict(self.extra)
        out.update(self.l2.row())
        out["failure_rate"] = self.failure_rate
        out["steps_to_action_ready"] = self.steps_to_action_ready
        if include_wall:
            out["wall_ms_per_decode"] = self.wall_ms_per_decode
        out["token_accuracy"] = "" if self.token_accuracy is None else self.token_accuracy
        out["label_match"] = "" if self.label_match is None else self.label_match
        return out

    def table(self) -> str:
        h = list(self.l2.at)
        head = " | ".join(f"{x:g} s" for x in h) + " | Avg | FR"
        vals = " | ".join(f"{self.l2.at[x]:.3f}" for x in h)
        lines = [
            head,
            f"{vals} | {self.l2.avg:.3f} | {100 * self.failure_rate:.2f}%",
            f"steps to action ready: {self.steps_to_action_ready:.2f}",
            f"wall ms per decode: {self.wall_ms_per_decode:.2f}",
        ]
        if self.token_accuracy is not None:
            lines.append(f"reasoning token accuracy: {self.token_accuracy:.4f}")
        if self.label_match is not None:
            lines.append(f"reasoning label match: {self.label_match:.4f}")
        return "\n".join(lines)


def rows_to_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    fields = list(rows[0])
    for r in rows[1:]:
        fields += [k for k in r if k not in fields]
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k, "")) for k in fields})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def read_trace(path) -> list[dict]:
    """Read a decode trace file (JSONL); records carry a ``decode`` id and ``step``."""
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"missing trace file {path}")
    return [json.loads(line) for line in p.read_text(encoding="utf-8").splitlines() if line.strip()]


def _summary(values):
    return {
        "mean": float(statistics.fmean(values)),
        "median": float(statistics.median(values)),
    }


def latency_report(traces: dict) -> dict:
    """Step and wall-clock statistics per decoding policy.

    ``traces`` maps policy name to trace records. Each decode contributes its
    summary record (``kind == "summary"``) with ``action_ready_step`` and
    ``wall_ms``. The ratio compares action_priority to global_confidence.
    """
    if not traces or any(not recs for recs in traces.values()):
        raise ValidationError("latency_report needs non-empty traces for every policy")
    out = {}
    for policy, recs in traces.items():
        summaries = [r for r in recs if r.get("kind") == "summary"]
        if not summaries:
            raise ValidationError(f"no decode summaries in {policy} trace")
        steps = [r["action_ready_step"] for r in summaries]
        wall = [r["wall_ms"] for r in summaries]
        out[policy] = {
            "decodes": len(summaries),
            "steps_to_action_ready": _summary(steps),
            "wall_ms": _summary(wall),
            "per_decode_steps": steps,
        }
    if "action_priority" in out and "global_confidence" in out:
        pri = out["action_priority"]["per_decode_steps"]
        glo = out["global_confidence"]["per_decode_steps"]
        out["ratio_priority_over_global"] = (
            out["action_priority"]["steps_to_action_ready"]["mean"]
            / out["global_confidence"]["steps_to_action_ready"]["mean"]
        )
        if len(pri) == len(glo):
            out["priority_not_slower_fraction"] = sum(p <= g for p, g in zip(pri, glo)) / len(pri)
    return out
