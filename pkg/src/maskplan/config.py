"""Flat ``key = value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Unknown keys and unparsable values are validation errors. Command-line
flags override file values.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .errors import ConfigurationError

# key -> (type, default, description)
KEYS = {
    "seed": (int, 0, "root seed for every random stream"),
    "n_samples": (int, 20000, "samples produced by gen-data"),
    "split": (str, "0.8,0.1,0.1", "train,val,test fractions"),
    "codebook_size": (int, 256, "number of k-means centroids (action tokens)"),
    "kmeans_max_iter": (int, 200, "Lloyd iteration cap"),
    "embed_dim": (int, 64, "action-token embedding width"),
    "embed_epochs": (int, 8, "embedding training epochs"),
    "embed_k_start": (int, 16, "soft-assignment neighbours at the first epoch"),
    "embed_k_end": (int, 1, "soft-assignment neighbours at the last epoch"),
    "embed_tau": (float, 0.5, "soft-assignment temperature"),
    "embed_tau_con": (float, 0.5, "contrastive temperature"),
    "embed_lambda_recon": (float, 1.0, "reconstruction loss weight"),
    "embed_lambda_geom": (float, 0.5, "distance-preservation loss weight"),
    "embed_lambda_contra": (float, 0.5, "contrastive loss weight"),
    "embed_lr": (float, 0.2, "embedding SGD learning rate"),
    "embed_batch": (int, 256, "embedding minibatch size"),
    "embed_clip": (float, 2.0, "embedding gradient-norm cap (0 disables)"),
    "model_layers": (int, 4, "transformer blocks"),
    "model_width": (int, 64, "model width (must equal embed_dim)"),
    "model_heads": (int, 4, "attention heads"),
    "model_ff": (int, 256, "feed-forward hidden size"),
    "stage1_epochs": (int, 8, "action warm-up epochs"),
    "stage2_epochs": (int, 8, "joint action+reasoning epochs"),
    "stage_batch": (int, 64, "predictor minibatch size"),
    "stage_lr": (float, 1e-3, "predictor Adam learning rate"),
    "importance_weighting": (bool, False, "scale masked NLL terms by 1/t"),
    "representation": (str, "waypoint", "action tokens: waypoint or displacement"),
    "decode_steps": (int, 8, "total unmasking steps"),
    "decode_action_steps": (int, 3, "steps reserved for action slots"),
    "decode_policy": (str, "action_priority", "action_priority or global_confidence"),
    "ablate_train": (int, 4000, "training samples per ablation run"),
    "ablate_test": (int, 500, "test samples per ablation run"),
    "ablate_epochs": (int, 4, "epochs per stage (and for embeddings) in ablation runs"),
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(key: str, raw: str):
    kind = KEYS[key][0]
    try:
        if kind is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigurationError(f"bad value for {key}: {raw!r}") from None


def defaults() -> dict:
    return {k: v[1] for k, v in KEYS.items()}


def parse_config(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        out[key] = _convert(key, raw)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the file, then non-None overrides."""
    cfg = defaults()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        cfg.update(parse_config(text))
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k not in KEYS:
            raise ConfigurationError(f"unknown key {k!r}")
        cfg[k] = v
    return cfg


def format_config(cfg: dict) -> str:
    return "".join(f"{k} = {_text(cfg[k])}\n" for k in KEYS if k in cfg)


def _text(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def config_hash(cfg: dict) -> str:
    body = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(body.encode("utf-8")).hexdigest()[:12]


def split_fractions(cfg: dict) -> tuple[float, ...]:
    try:
        parts = tuple(float(x) for x in cfg["split"].split(","))
    except ValueError:
        raise ConfigurationError(f"bad split {cfg['split']!r}") from None
    if any(p < 0 for p in parts) or abs(sum(parts) - 1.0) > 1e-9:
        raise ConfigurationError("split fractions must be non-negative and sum to 1")
    return parts
