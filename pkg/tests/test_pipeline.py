import json

import numpy as np
import pytest
import torch

from maskplan.embedding import random_embeddings
from maskplan.errors import ConfigurationError, FormatError, IntegrityError
from maskplan.model import PredictorConfig, build_predictor
from maskplan.numerics import Rng
from maskplan.pipeline import (
    LOG_COLUMNS,
    StageConfig,
    encode_samples,
    evaluate_planner,
    load_checkpoint,
    log_csv,
    max_len,
    new_state,
    run_stage1,
    run_stage2,
    save_checkpoint,
    train_stage,
)
from maskplan.sequence import ACTION, PAD_SEG, REASONING


@pytest.fixture
def parts(small_data, small_codebook, small_vocab):
    E = random_embeddings(small_codebook.n, 8, Rng(0))
    cfg = PredictorConfig(small_vocab.size, max_len(), layers=1, width=8, heads=2, ff=16, seed=1)
    return small_data[:128], small_codebook, small_vocab, lambda: build_predictor(cfg, E, small_vocab.action_start)


def params(model):
    return [p.detach().clone() for p in model.parameters()]


def same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


def test_stage_config_rules():
    assert StageConfig(1).epochs == 8 and StageConfig(2).epochs == 8
    assert StageConfig(1).frozen and not StageConfig(2).frozen
    assert not StageConfig(1).include_reasoning and StageConfig(2).include_reasoning
    with pytest.raises(ConfigurationError):
        StageConfig(3)
    with pytest.raises(ConfigurationError):
        StageConfig(1, epochs=0)


def test_stage1_layout_has_no_reasoning(parts):
    data, cb, vocab, _ = parts
    _, seg = encode_samples(data, cb, vocab, include_reasoning=False)
    assert seg.shape[1] == 20 and not np.any((seg == REASONING) | (seg == PAD_SEG))


def test_stage1_freezes_actions_and_loss_falls(parts):
    data, cb, vocab, make = parts
    model = make()
    rows = model.tok_emb.detach()[vocab.action_start:].clone()
    state = run_stage1(model, data, cb, vocab, StageConfig(1, epochs=3, batch_size=16, learning_rate=3e-3))
    losses = [e["total_loss"] for e in state.log]
    assert losses[0] > losses[1] > losses[2]
    assert all(e["reasoning_loss"] is None for e in state.log)
    assert torch.equal(model.tok_emb.detach()[vocab.action_start:], rows)
    assert state.stages_completed == [1]


def test_stage2_requires_stage1(parts):
    data, cb, vocab, make = parts
    with pytest.raises(ConfigurationError):
        run_stage2(make(), data, cb, vocab, StageConfig(2, epochs=1))
    state = run_stage2(make(), data, cb, vocab, StageConfig(2, epochs=1, batch_size=32, allow_missing_stage1=True))
    assert state.stages_completed == [2]


def test_stage2_trains_both_segments_and_unfreezes(parts):
    data, cb, vocab, make = parts
    s1 = run_stage1(make(), data, cb, vocab, StageConfig(1, epochs=1, batch_size=32))
    rows = s1.model.tok_emb.detach()[vocab.action_start:].clone()
    s2 = run_stage2(s1, data, cb, vocab, StageConfig(2, epochs=1, batch_size=32))
    last = s2.log[-1]
    assert last["stage"] == 2 and last["action_loss"] > 0 and last["reasoning_loss"] > 0
    assert [e["stage"] for e in s2.log] == [1, 2]
    assert not torch.equal(s2.model.tok_emb.detach()[vocab.action_start:], rows)
    # the optimizer restarts at the stage boundary
    assert s2.opt.step_count == len(data) // 32


def test_mismatched_state_and_config(parts):
    data, cb, vocab, make = parts
    state = new_state(make(), StageConfig(1))
    with pytest.raises(ConfigurationError):
        train_stage(state, data, cb, vocab, StageConfig(2, allow_missing_stage1=True))


def test_resume_is_bit_identical(tmp_path, parts):
    data, cb, vocab, make = parts
    cfg = StageConfig(1, epochs=2, batch_size=16)
    full = run_stage1(make(), data, cb, vocab, cfg)

    partial = train_stage(new_state(make(), cfg), data, cb, vocab, cfg, max_steps=11)
    assert (partial.epoch, partial.batch) == (1, 3)
    path = tmp_path / "ck.json"
    save_checkpoint(partial, path, codebook_sha256="c" * 64, embedding_sha256="e" * 64)
    resumed, _ = load_checkpoint(path, codebook_sha256="c" * 64)
    resumed = train_stage(resumed, data, cb, vocab, cfg)
    assert same(params(full.model), params(resumed.model))
    assert full.log == resumed.log
    assert resumed.opt.step_count == full.opt.step_count


def test_checkpoint_round_trip(tmp_path, parts):
    data, cb, vocab, make = parts
    state = run_stage1(make(), data, cb, vocab, StageConfig(1, epochs=1, batch_size=32))
    path = tmp_path / "ck.json"
    save_checkpoint(state, path, extra={"note": 1})
    back, extra = load_checkpoint(path)
    assert extra == {"note": 1}
    assert same(params(state.model), params(back.model))
    assert all(torch.equal(a, b) for a, b in zip(state.opt.v, back.opt.v))
    assert back.stages_completed == [1] and back.log == state.log
    save_checkpoint(back, tmp_path / "again.json", extra={"note": 1})
    assert (tmp_path / "again.json").read_bytes() == path.read_bytes()


def test_checkpoint_integrity(tmp_path, parts):
    data, cb, vocab, make = parts
    state = new_state(make(), StageConfig(1))
    path = tmp_path / "ck.json"
    save_checkpoint(state, path, codebook_sha256="a" * 64)
    payload = json.loads(path.read_text())
    payload["rng_state"]["epoch"] = 5
    path.write_text(json.dumps(payload))
    with pytest.raises(IntegrityError):
        load_checkpoint(path)
    save_checkpoint(state, path, codebook_sha256="a" * 64)
    with pytest.raises(IntegrityError):
        load_checkpoint(path, codebook_sha256="b" * 64)
    text = path.read_text()
    path.write_text(text.replace("maskplan-checkpoint/1", "maskplan-checkpoint/0"))
    with pytest.raises(FormatError):
        load_checkpoint(path)
    path.write_text(text[: len(text) // 2])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_log_csv_columns(parts):
    data, cb, vocab, make = parts
    state = run_stage1(make(), data, cb, vocab, StageConfig(1, epochs=1, batch_size=32))
    lines = log_csv(state.log).splitlines()
    assert lines[0] == ",".join(LOG_COLUMNS)
    cells = lines[1].split(",")
    assert cells[0] == "0" and cells[1] == "1" and cells[4] == "" and cells[5] == ""
    timed = run_stage1(make(), data, cb, vocab, StageConfig(1, epochs=1, batch_size=32), timing=True)
    assert float(log_csv(timed.log).splitlines()[1].split(",")[5]) > 0


def test_evaluation_never_fails(parts):
    data, cb, vocab, make = parts
    model = make()
    report = evaluate_planner(model, data[:20], cb, vocab)
    assert report.failure_rate == 0.0
    assert report.steps_to_action_ready == 3.0
    assert report.token_accuracy is not None
