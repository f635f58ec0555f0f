"""End-to-end runs and the ablation drivers built on them."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

from .codebook import fit_kmeans, quantization_floor
from .config import config_hash, defaults
from .decoding import DecodeConfig
from .embedding import EmbedTrainConfig, metric_alignment_score, random_embeddings, train_embeddings
from .errors import ConfigurationError
from .evaluation import PlanningReport
from .model import PredictorConfig, build_predictor
from .numerics import Rng
from .pipeline import StageConfig, evaluate_planner, max_len, run_stage1, run_stage2
from .sequence import build_vocab
from .trajdata import pool_actions, vocabulary_words

AXES = ("vocab", "embedding", "representation")


def embed_config(cfg: dict, epochs: int | None = None) -> EmbedTrainConfig:
    return EmbedTrainConfig(
        d=cfg["embed_dim"], k_start=cfg["embed_k_start"], k_end=cfg["embed_k_end"], tau=cfg["embed_tau"],
        tau_con=cfg["embed_tau_con"], lambda_recon=cfg["embed_lambda_recon"], lambda_geom=cfg["embed_lambda_geom"],
        lambda_contra=cfg["embed_lambda_contra"], epochs=epochs or cfg["embed_epochs"], batch_size=cfg["embed_batch"],
        learning_rate=cfg["embed_lr"], clip_norm=cfg["embed_clip"], seed=cfg["seed"],
    )


def stage_config(cfg: dict, stage: int, epochs: int | None = None, **extra) -> StageConfig:
    key = "stage1_epochs" if stage == 1 else "stage2_epochs"
    return StageConfig(stage=stage, epochs=epochs or cfg[key], batch_size=cfg["stage_batch"],
                       learning_rate=cfg["stage_lr"], seed=cfg["seed"], representation=cfg["representation"],
                       importance_weighting=cfg["importance_weighting"], **extra)


def predictor_config(cfg: dict, vocab_size: int, horizon: int = 6) -> PredictorConfig:
    if cfg["model_width"] != cfg["embed_dim"]:
        raise ConfigurationError("model_width must equal embed_dim")
    return PredictorConfig(vocab_size=vocab_size, max_len=max_len(horizon), layers=cfg["model_layers"],
                           width=cfg["model_width"], heads=cfg["model_heads"], ff=cfg["model_ff"], seed=cfg["seed"])


def decode_config(cfg: dict, policy: str | None = None) -> DecodeConfig:
    return DecodeConfig(total_steps=cfg["decode_steps"], action_steps=cfg["decode_action_steps"],
                        policy=policy or cfg["decode_policy"], seed=cfg["seed"])


@dataclass
class RunResult:
    report: PlanningReport
    floor: float
    alignment: float
    cfg: dict
    model: object = None
    codebook: object = None
    vocab: object = None
    stage1_report: PlanningReport | None = None
    seconds: dict | None = None


def full_run(train, test, cfg: dict | None = None, embedding: str = "geometry", epochs: int | None = None,
             embed_epochs: int | None = None, skip_stage1: bool = False, eval_stage1: bool = False) -> RunResult:
    """Codebook, embeddings, stage 1, stage 2, then held-out evaluation.

    ``eval_stage1`` also scores the action-only model between the stages;
    ``skip_stage1`` trains stage 2 from scratch (ablation). ``seconds`` in the
    result holds wall time per phase.
    """
    cfg = dict(cfg or defaults())
    clock = [time.perf_counter()]
    seconds = {}

    def lap(name):
        now = time.perf_counter()
        seconds[name] = now - clock[0]
        clock[0] = now

    if embedding not in ("geometry", "random"):
        raise ConfigurationError(f"unknown embedding mode {embedding!r}")
    rep = cfg["representation"]
    root = Rng(cfg["seed"])
    cb = fit_kmeans(pool_actions(train, rep), cfg["codebook_size"], root.child("codebook"),
                    max_iter=cfg["kmeans_max_iter"])
    lap("codebook")
    if embedding == "geometry":
        E, _, _ = train_embeddings(cb, train, embed_config(cfg, embed_epochs), representation=rep)
    else:
        E = random_embeddings(cb.n, cfg["embed_dim"], root.child("random-embedding"))
    lap("embedding")
    vocab = build_vocab(cb, vocabulary_words())
    model = build_predictor(predictor_config(cfg, vocab.size), E, vocab.action_start)
    stage1_report = None
    if skip_stage1:
        state = run_stage2(model, train, cb, vocab, stage_config(cfg, 2, epochs, allow_missing_stage1=True))
    else:
        state = run_stage1(model, train, cb, vocab, stage_config(cfg, 1, epochs))
        lap("stage1")
        if eval_stage1:
            stage1_report = evaluate_planner(model, test, cb, vocab, decode_config(cfg), representation=rep,
                                             include_reasoning=False)
            lap("stage1_eval")
        run_stage2(state, train, cb, vocab, stage_config(cfg, 2, epochs))
    lap("stage2")
    report = evaluate_planner(model, test, cb, vocab, decode_config(cfg), representation=rep)
    lap("eval")
    # the floor is only defined for waypoint tokens
    floor = quantization_floor(test, cb).avg if rep == "waypoint" else float("nan")
    return RunResult(report, floor, metric_alignment_score(E, cb), cfg, model, cb, vocab, stage1_report, seconds)


def ablation_settings(axis: str, cfg: dict) -> list[tuple[dict, str]]:
    if axis == "vocab":
        return [({**cfg, "codebook_size": n}, "geometry") for n in (128, 256, 384)]
    if axis == "embedding":
        return [(cfg, "geometry"), (cfg, "random")]
    if axis == "representation":
        return [({**cfg, "representation": r}, "geometry") for r in ("waypoint", "displacement")]
    raise ConfigurationError(f"unknown ablation axis {axis!r}; choose from {AXES}")


def run_ablation(axis: str, train, test, cfg: dict | None = None) -> list[dict]:
    """One row per configuration, identical training budget for each."""
    cfg = dict(cfg or defaults())
    epochs = cfg["ablate_epochs"]
    train = train[:cfg["ablate_train"]]
    test = test[:cfg["ablate_test"]]
    rows = []
    for setting, embedding in ablation_settings(axis, cfg):
        res = full_run(train, test, setting, embedding=embedding, epochs=epochs, embed_epochs=epochs)
        row = {
            "axis": axis,
            "codebook_size": setting["codebook_size"],
            "embedding": embedding,
            "representation": setting["representation"],
            "config_hash": config_hash({**setting, "embedding": embedding}),
            "alignment": res.alignment,
        }
        row.update(replace(res.report, extra={}).row(include_wall=False))
        rows.append(row)
    return rows
