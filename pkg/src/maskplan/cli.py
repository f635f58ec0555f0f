"""Command-line entry point: ``maskplan <subcommand> ...``.

Exit codes: 0 ok, 2 usage, 3 validation, 4 integrity, 5 numeric, 6 scheduler invariant.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import config as cfgmod
from .codebook import fit_kmeans, load_codebook, save_codebook
from .decoding import decode_batch, extract_trajectory, reasoning_words, trace_records, write_trace
from .embedding import file_sha256, load_embedding, save_embedding, train_embeddings
from .errors import ConfigurationError, MaskplanError
from .evaluation import latency_report, rows_to_csv
from .experiments import (
    AXES,
    decode_config,
    embed_config,
    predictor_config,
    run_ablation,
    stage_config,
)
from .model import build_predictor
from .numerics import Rng
from .pipeline import (
    evaluate_planner,
    load_checkpoint,
    log_csv,
    new_state,
    save_checkpoint,
    train_stage,
)
from .sequence import Vocabulary, build_vocab, generation_template
from .trajdata import generate_dataset, load_dataset, pool_actions, split_dataset, vocabulary_words, write_dataset

SPLIT_NAMES = ("train", "val", "test")


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--seed", type=int, default=None, help="root seed (overrides config)")
    p.add_argument("--config", default=None, help="flat key = value config file")
    p.add_argument("--out", required=True, help=out_help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskplan", description="Masked-diffusion planner with discrete action tokens.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic train/val/test JSONL files")
    _common(p, "output directory")
    p.add_argument("--n", type=int, default=None, help="total number of samples")

    p = sub.add_parser("build-codebook", help="fit the k-means action codebook")
    _common(p, "codebook JSON path")
    p.add_argument("--data", required=True, help="training JSONL")
    p.add_argument("--n", type=int, default=None, help="codebook size")
    p.add_argument("--representation", choices=("waypoint", "displacement"), default=None)

    p = sub.add_parser("train-embed", help="train geometry-aware action embeddings")
    _common(p, "embedding JSON path")
    p.add_argument("--data", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--representation", choices=("waypoint", "displacement"), default=None)

    for stage in (1, 2):
        p = sub.add_parser(f"train-stage{stage}", help=f"stage-{stage} predictor training")
        _common(p, "checkpoint path")
        p.add_argument("--data", required=True)
        p.add_argument("--codebook", required=True)
        p.add_argument("--embedding", required=True)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--log", default=None, help="training log CSV path")
        p.add_argument("--resume", default=None, help="continue from a partial checkpoint of this stage")
        p.add_argument("--max-steps", type=int, default=None, help="stop after this many optimizer steps")
        p.add_argument("--timing", action="store_true", help="record wall_seconds in the log")
        if stage == 2:
            p.add_argument("--checkpoint", default=None, help="finished stage-1 checkpoint")
            p.add_argument("--allow-missing-stage1", action="store_true",
                           help="start stage 2 from a fresh model (ablation only)")

    p = sub.add_parser("decode", help="decode samples and write plans (plus an optional trace)")
    _common(p, "decoded JSONL path")
    _model_inputs(p)
    p.add_argument("--trace", default=None, help="per-step JSONL trace path")
    p.add_argument("--timing", action="store_true", help="include wall-clock in the trace")

    p = sub.add_parser("eval", help="planning/reasoning report on held-out data")
    _common(p, "report CSV path")
    _model_inputs(p)
    p.add_argument("--latency", action="store_true", help="evaluate both policies and compare steps")
    p.add_argument("--timing", action="store_true", help="include wall-clock columns")

    p = sub.add_parser("ablate", help="run an ablation axis and write a comparison CSV")
    _common(p, "comparison CSV path")
    p.add_argument("--data", required=True, help="directory holding train.jsonl and test.jsonl")
    p.add_argument("--axis", choices=AXES, default=None)
    p.add_argument("--embedding", action="store_true", help="shorthand for --axis embedding")
    return parser


def _model_inputs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--policy", choices=("action_priority", "global_confidence"), default=None)
    p.add_argument("--steps", type=int, default=None, help="total unmasking steps")
    p.add_argument("--action-steps", type=int, default=None)
    p.add_argument("--limit", type=int, default=None, help="use only the first N samples")


def _config(args, **overrides) -> dict:
    overrides["seed"] = args.seed
    return cfgmod.load_config(args.config, overrides)


def cmd_gen_data(args) -> None:
    cfg = _config(args, n_samples=args.n)
    data = generate_dataset(cfg["n_samples"], Rng(cfg["seed"]).child("data"))
    parts = split_dataset(data, cfgmod.split_fractions(cfg), Rng(cfg["seed"]).child("split"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in zip(SPLIT_NAMES, parts):
        write_dataset(part, out / f"{name}.jsonl")
    print(" ".join(f"{n}={len(p)}" for n, p in zip(SPLIT_NAMES, parts)))


def cmd_build_codebook(args) -> None:
    cfg = _config(args, codebook_size=args.n, representation=args.representation)
    pts = pool_actions(load_dataset(args.data), cfg["representation"])
    cb = fit_kmeans(pts, cfg["codebook_size"], Rng(cfg["seed"]).child("codebook"), max_iter=cfg["kmeans_max_iter"])
    save_codebook(cb, args.out)
    print(f"n={cb.n} objective={cb.objective:.6g} iterations={cb.iterations}")


def cmd_train_embed(args) -> None:
    cfg = _config(args, embed_epochs=args.epochs, representation=args.representation)
    cb = load_codebook(args.codebook)
    ec = embed_config(cfg)
    E, decoder, log = train_embeddings(cb, load_dataset(args.data), ec, representation=cfg["representation"])
    save_embedding(E, decoder, ec, args.out)
    last = log[-1]
    print(f"recon={last['recon']:.6g} geom={last['geom']:.6g} contra={last['contra']:.6g}")


def _vocab_extra(vocab: Vocabulary, cfg: dict) -> dict:
    return {"n_context": vocab.n_context, "words": list(vocab.words), "representation": cfg["representation"],
            "config": cfg}


def _vocab_from(extra: dict, n_actions: int) -> Vocabulary:
    return Vocabulary(n_context=extra["n_context"], words=tuple(extra["words"]), n_actions=n_actions)


def cmd_train_stage(args, stage: int) -> None:
    cfg = _config(args, **{f"stage{stage}_epochs": args.epochs})
    cb = load_codebook(args.codebook)
    cb_hash, emb_hash = file_sha256(args.codebook), file_sha256(args.embedding)
    E, _, _ = load_embedding(args.embedding)
    vocab = build_vocab(cb, vocabulary_words())
    samples = load_dataset(args.data)
    extra_flags = {"allow_missing_stage1": bool(getattr(args, "allow_missing_stage1", False))} if stage == 2 else {}
    sc = stage_config(cfg, stage, **extra_flags)
    if args.resume:
        state, extra = load_checkpoint(args.resume, cb_hash, emb_hash)
        if state.stage != stage:
            raise ConfigurationError(f"--resume checkpoint is from stage {state.stage}")
    elif stage == 1:
        model = build_predictor(predictor_config(cfg, vocab.size), E, vocab.action_start)
        state = new_state(model, sc)
    else:
        if args.checkpoint:
            prev, _ = load_checkpoint(args.checkpoint, cb_hash, emb_hash)
            model = prev.model
        elif sc.allow_missing_stage1:
            prev = None
            model = build_predictor(predictor_config(cfg, vocab.size), E, vocab.action_start)
        else:
            raise ConfigurationError("train-stage2 needs --checkpoint (or --allow-missing-stage1)")
        state = new_state(model, sc, prev)
    state = train_stage(state, samples, cb, vocab, sc, max_steps=args.max_steps, timing=args.timing)
    save_checkpoint(state, args.out, _vocab_extra(vocab, cfg), cb_hash, emb_hash)
    if args.log:
        Path(args.log).write_text(log_csv(state.log), encoding="utf-8")
    done = "complete" if stage in state.stages_completed else f"paused at epoch {state.epoch} batch {state.batch}"
    print(f"stage {stage} {done}")


def _load_model(args):
    cb = load_codebook(args.codebook)
    state, extra = load_checkpoint(args.checkpoint, file_sha256(args.codebook))
    vocab = _vocab_from(extra, cb.n)
    if vocab.size != state.model.config.vocab_size:
        raise ConfigurationError("codebook size does not match the checkpoint vocabulary")
    samples = load_dataset(args.data)
    if args.limit is not None:
        samples = samples[:args.limit]
    include_reasoning = 2 in state.stages_completed or state.stage == 2
    return cb, state, extra, vocab, samples, include_reasoning


def cmd_decode(args) -> None:
    cfg = _config(args, decode_policy=args.policy, decode_steps=args.steps, decode_action_steps=args.action_steps)
    cb, state, extra, vocab, samples, include_reasoning = _load_model(args)
    dc = decode_config(cfg)
    rep = extra.get("representation", "waypoint")
    horizon = len(samples[0].waypoints)
    schedules, lines = [], []
    for start in range(0, len(samples), 256):
        chunk = samples[start:start + 256]
        templates = [generation_template(s, vocab, horizon, include_reasoning=include_reasoning) for s in chunk]
        decoded, scheds = decode_batch(state.model, templates, dc, vocab)
        schedules.extend(scheds)
        for seq, sched in zip(decoded, scheds):
            traj = extract_trajectory(seq, cb, vocab, rep)
            lines.append(json.dumps({
                "waypoints": traj.tolist(),
                "reasoning": " ".join(reasoning_words(seq, vocab)),
                "action_ready_step": sched.action_ready_step,
            }))
    Path(args.out).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    if args.trace:
        write_trace(args.trace, schedules, include_wall=args.timing)
    print(f"decoded {len(lines)} samples with {dc.policy}")


def cmd_eval(args) -> None:
    cfg = _config(args, decode_policy=args.policy, decode_steps=args.steps, decode_action_steps=args.action_steps)
    cb, state, extra, vocab, samples, include_reasoning = _load_model(args)
    rep = extra.get("representation", "waypoint")
    policies = ("action_priority", "global_confidence") if args.latency else (cfg["decode_policy"],)
    rows, traces = [], {}
    for policy in policies:
        report, _, scheds = evaluate_planner(state.model, samples, cb, vocab, decode_config(cfg, policy), rep,
                                             include_reasoning, return_details=True)
        report.extra = {"policy": policy}
        rows.append(report.row(include_wall=args.timing))
        traces[policy] = [rec for i, s in enumerate(scheds) for rec in trace_records(i, s, args.timing)]
        print(f"[{policy}]")
        print(report.table())
    Path(args.out).write_text(rows_to_csv(rows), encoding="utf-8")
    if args.latency:
        lat = latency_report(traces)
        for policy in policies:
            s = lat[policy]["steps_to_action_ready"]
            print(f"{policy}: steps to action ready mean={s['mean']:.3f} median={s['median']:g}")
        print(f"ratio priority/global: {lat['ratio_priority_over_global']:.4f}")
        print(f"priority not slower on {100 * lat['priority_not_slower_fraction']:.1f}% of decodes")


def cmd_ablate(args) -> None:
    axis = "embedding" if args.embedding else args.axis
    if axis is None:
        raise ConfigurationError("ablate needs --axis or --embedding")
    cfg = _config(args)
    root = Path(args.data)
    rows = run_ablation(axis, load_dataset(root / "train.jsonl"), load_dataset(root / "test.jsonl"), cfg)
    text = rows_to_csv(rows)
    Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-codebook": cmd_build_codebook,
    "train-embed": cmd_train_embed,
    "train-stage1": lambda a: cmd_train_stage(a, 1),
    "train-stage2": lambda a: cmd_train_stage(a, 2),
    "decode": cmd_decode,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except MaskplanError as exc:
        print(f"maskplan {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"maskplan {args.command}: missing file: {exc.filename}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
