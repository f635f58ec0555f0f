"""Synthetic ego-frame trajectories with paired instruction and reasoning text.

Frame convention: ``x`` is lateral (right positive), ``y`` is longitudinal
(forward positive), both in meters. Waypoints sit at t = 0.5 s, 1.0 s, ...
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ParseError, ValidationError
from .numerics import Rng

LABELS = ("keep-lane", "turn-left", "turn-right", "stop", "accelerate", "decelerate")

REASONING_TEMPLATES = {
    "keep-lane": "the lane ahead is clear so the ego vehicle keeps its lane",
    "turn-left": "the road curves ahead so the ego vehicle steers left",
    "turn-right": "the road curves ahead so the ego vehicle steers right",
    "stop": "an obstacle blocks the road so the ego vehicle stops",
    "accelerate": "the road is open and traffic is fast so the ego vehicle accelerates",
    "decelerate": "traffic ahead is slow so the ego vehicle decelerates",
}

# exactly one of these appears in each template
LABEL_KEYWORDS = {
    "keep-lane": "keeps",
    "turn-left": "left",
    "turn-right": "right",
    "stop": "stops",
    "accelerate": "accelerates",
    "decelerate": "decelerates",
}

COMMANDS = {"left": "turn left", "right": "turn right", "straight": "go straight"}
INSTRUCTION_TEMPLATE = "{command} then plan and explain"

X_LIMIT = 50.0
Y_LIMIT = 60.0
V_MAX_ENVELOPE = 25.0


@dataclass(frozen=True)
class GeneratorConfig:
    horizon: int = 6
    dt: float = 0.5
    speed_max: float = 20.0
    curvature_max: float = 0.05
    straight_prob: float = 0.6
    context_len: int = 8
    context_alphabet: int = 128
    speed_bins: int = 16
    curvature_bins: int = 16
    # residual resolution inside each coarse bin; 1 disables the residual tokens
    fine_bins: int = 16

    @property
    def signal_tokens(self) -> int:
        return 2 if self.fine_bins <= 1 else 4


@dataclass(frozen=True)
class Sample:
    scene_context: tuple[int, ...]
    instruction: str
    waypoints: tuple[tuple[float, float], ...]
    reasoning: str
    label: str

    @property
    def trajectory(self) -> np.ndarray:
        return np.array(self.waypoints, dtype=np.float64).reshape(-1, 2)


def vocabulary_words() -> list[str]:
    """Every word that instructions or reasoning can contain, in a fixed order."""
    words: set[str] = set()
    for text in REASONING_TEMPLATES.values():
        words.update(text.split())
    for command in COMMANDS.values():
        words.update(INSTRUCTION_TEMPLATE.format(command=command).split())
    return sorted(words)


def arc_waypoints(speed: float, curvature: float, horizon: int = 6, dt: float = 0.5) -> np.ndarray:
    """Constant-speed, constant-curvature positions at t = dt, 2 dt, ..."""
    t = dt * np.arange(1, horizon + 1, dtype=np.float64)
    if curvature == 0.0:
        return np.stack([np.zeros_like(t), speed * t], axis=1)
    theta = speed * curvature * t
    # 1 - cos(theta) written as 2 sin^2(theta/2) to avoid cancellation at small theta
    x = 2.0 * np.sin(0.5 * theta) ** 2 / curvature
    y = np.sin(theta) / curvature
    return np.stack([x, y], axis=1)


def _bins(frac: float, coarse: int, fine: int) -> tuple[int, int]:
    b = int(math.floor(frac * coarse * fine))
    b = min(max(b, 0), coarse * fine - 1)
    return b // fine, b % fine


def speed_bin(speed: float, cfg: GeneratorConfig = GeneratorConfig()) -> int:
    return _bins(speed / cfg.speed_max, cfg.speed_bins, cfg.fine_bins)[0]


def curvature_bin(curvature: float, cfg: GeneratorConfig = GeneratorConfig()) -> int:
    frac = (curvature + cfg.curvature_max) / (2.0 * cfg.curvature_max)
    return _bins(frac, cfg.curvature_bins, cfg.fine_bins)[0]


def context_tokens(speed: float, curvature: float, noise: Sequence[int], cfg: GeneratorConfig = GeneratorConfig()) -> tuple[int, ...]:
    """Scene-context symbols: coarse speed, coarse curvature, their fine residuals, then noise.

    Coarse codes live in [0, 16) and [16, 32); the residual codes (position
    inside the coarse bin) in [32, 48) and [48, 64). Noise is uniform over the
    whole alphabet.
    """
    vc, vf = _bins(speed / cfg.speed_max, cfg.speed_bins, cfg.fine_bins)
    kc, kf = _bins((curvature + cfg.curvature_max) / (2.0 * cfg.curvature_max), cfg.curvature_bins, cfg.fine_bins)
    signal = [vc, cfg.speed_bins + kc]
    if cfg.fine_bins > 1:
        base = cfg.speed_bins + cfg.curvature_bins
        signal += [base + vf, base + cfg.fine_bins + kf]
    if len(noise) != cfg.context_len - len(signal):
        raise ValidationError(f"expected {cfg.context_len - len(signal)} noise tokens, got {len(noise)}")
    return tuple(int(c) for c in (*signal, *noise))


def maneuver_label(speed: float, curvature: float, cfg: GeneratorConfig = GeneratorConfig()) -> str:
    """Thresholds sit on bin edges so the label is a function of the two context tokens.

    With the default 16 bins: stop below 1.25 m/s, turns at |kappa| >= 0.0125,
    accelerate from 15 m/s, decelerate below 5 m/s.
    """
    vb = speed_bin(speed, cfg)
    kb = curvature_bin(curvature, cfg)
    nb = cfg.curvature_bins
    if vb == 0:
        return "stop"
    if kb >= nb // 2 + nb // 8:
        return "turn-right"
    if kb < nb // 2 - nb // 8:
        return "turn-left"
    if vb >= (3 * cfg.speed_bins) // 4:
        return "accelerate"
    if vb < cfg.speed_bins // 4:
        return "decelerate"
    return "keep-lane"


def _command(curvature: float, cfg: GeneratorConfig) -> str:
    kb = curvature_bin(curvature, cfg)
    nb = cfg.curvature_bins
    if kb >= nb // 2 + nb // 8:
        return COMMANDS["right"]
    if kb < nb // 2 - nb // 8:
        return COMMANDS["left"]
    return COMMANDS["straight"]


def make_sample(speed: float, curvature: float, noise: Sequence[int], cfg: GeneratorConfig = GeneratorConfig()) -> Sample:
    wps = arc_waypoints(speed, curvature, cfg.horizon, cfg.dt)
    context = context_tokens(speed, curvature, noise, cfg)
    label = maneuver_label(speed, curvature, cfg)
    return Sample(
        scene_context=context,
        instruction=INSTRUCTION_TEMPLATE.format(command=_command(curvature, cfg)),
        waypoints=tuple((float(x), float(y)) for x, y in wps),
        reasoning=REASONING_TEMPLATES[label],
        label=label,
    )


def generate_dataset(n: int, rng: Rng, config: GeneratorConfig = GeneratorConfig()) -> list[Sample]:
    if n < 1:
        raise ValidationError("n must be >= 1")
    out = []
    for i in range(n):
        g = rng.child(i).generator()
        speed = g.uniform(0.0, config.speed_max)
        if g.uniform() < config.straight_prob:
            curvature = 0.0
        else:
            curvature = g.uniform(-config.curvature_max, config.curvature_max)
        noise = g.integers(0, config.context_alphabet, size=config.context_len - config.signal_tokens)
        out.append(make_sample(speed, curvature, noise, config))
    return out


def validate_trajectory(wps: np.ndarray, dt: float = 0.5) -> None:
    if np.any(~np.isfinite(wps)):
        raise ValidationError("non-finite waypoint")
    if np.any(np.abs(wps[:, 0]) > X_LIMIT) or np.any(wps[:, 1] < 0.0) or np.any(wps[:, 1] > Y_LIMIT):
        raise ValidationError("waypoint outside the plausibility envelope")
    steps = np.diff(np.vstack([np.zeros((1, 2)), wps]), axis=0)
    if np.any(np.hypot(steps[:, 0], steps[:, 1]) > V_MAX_ENVELOPE * dt + 1e-9):
        raise ValidationError("consecutive waypoints exceed the speed envelope")


def sample_to_json(s: Sample) -> str:
    record = {
        "scene_context": list(s.scene_context),
        "instruction": s.instruction,
        "waypoints": [list(w) for w in s.waypoints],
        "reasoning": s.reasoning,
        "label": s.label,
    }
    # json emits float repr, which round-trips float64 exactly
    return json.dumps(record)


def write_dataset(samples: Iterable[Sample], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(sample_to_json(s))
            fh.write("\n")


def load_dataset(path) -> list[Sample]:
    samples = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            wps = tuple((float(x), float(y)) for x, y in rec["waypoints"])
            sample = Sample(
                scene_context=tuple(int(c) for c in rec["scene_context"]),
                instruction=str(rec["instruction"]),
                waypoints=wps,
                reasoning=str(rec["reasoning"]),
                label=str(rec["label"]),
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise ParseError(f"malformed sample: {exc}", line=lineno) from None
        if sample.label not in LABELS:
            raise ParseError(f"unknown label {sample.label!r}", line=lineno)
        try:
            validate_trajectory(sample.trajectory)
        except ValidationError as exc:
            raise ValidationError(f"line {lineno}: {exc}") from None
        samples.append(sample)
    return samples


def split_dataset(samples: Sequence[Sample], fractions=(0.8, 0.1, 0.1), rng: Rng = Rng(0)):
    """Shuffle and cut into (train, val, test).

    Sizes are ``floor(f * n)`` with the leftover items handed out one at a time
    by largest fractional remainder (earlier split first on ties).
    """
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ValidationError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    n = len(samples)
    raw = [f * n for f in fr]
    sizes = [int(math.floor(r + 1e-9)) for r in raw]
    order = sorted(range(3), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    perm = rng.generator().permutation(n)
    shuffled = [samples[i] for i in perm]
    a, b = sizes[0], sizes[0] + sizes[1]
    return shuffled[:a], shuffled[a:b], shuffled[b:]


def pool_waypoints(samples: Sequence[Sample]) -> np.ndarray:
    """All waypoints, in sample order then timestep order, as an (M, 2) array."""
    if not samples:
        raise ValidationError("cannot pool waypoints from an empty sample list")
    return np.concatenate([s.trajectory for s in samples], axis=0)


def pool_actions(samples: Sequence[Sample], representation: str = "waypoint") -> np.ndarray:
    """Pooled points a codebook is fit on: waypoints, or per-step deltas."""
    if representation == "waypoint":
        return pool_waypoints(samples)
    if representation != "displacement":
        raise ValidationError(f"unknown action representation {representation!r}")
    if not samples:
        raise ValidationError("cannot pool actions from an empty sample list")
    return np.concatenate([to_displacements(s.trajectory) for s in samples], axis=0)


def to_displacements(wps: np.ndarray) -> np.ndarray:
    """Per-step deltas, the first taken from the ego origin."""
    return np.diff(np.vstack([np.zeros((1, 2)), wps]), axis=0)


def from_displacements(deltas: np.ndarray) -> np.ndarray:
    return np.cumsum(deltas, axis=0)
