import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from maskplan.errors import ValidationError
from maskplan.evaluation import (
    DecodeOutcome,
    L2Report,
    PlanningReport,
    average_reports,
    failure_rate,
    l2_at_horizons,
    label_from_reasoning,
    latency_report,
    read_trace,
    reasoning_accuracy,
    rows_to_csv,
)
from maskplan.trajdata import LABELS, REASONING_TEMPLATES

traj = arrays(np.float64, (6, 2), elements=st.floats(-50, 50))


def test_identical_is_zero():
    t = np.arange(12.0).reshape(6, 2)
    r = l2_at_horizons(t, t)
    assert r.avg == 0 and all(v == 0 for v in r.at.values())


def test_three_four_five():
    t = np.zeros((6, 2))
    r = l2_at_horizons(t + [0.3, 0.4], t)
    assert r.at == {1.0: pytest.approx(0.5), 2.0: pytest.approx(0.5), 3.0: pytest.approx(0.5)}
    assert r.avg == pytest.approx(0.5)


def test_horizons_pick_the_right_waypoints():
    pred = np.zeros((6, 2))
    pred[:, 0] = [1, 2, 3, 4, 5, 6]
    r = l2_at_horizons(pred, np.zeros((6, 2)))
    assert r.at == {1.0: 2.0, 2.0: 4.0, 3.0: 6.0}
    # the average runs over all six waypoints, not the three horizons
    assert r.avg == 3.5
    assert list(r.row()) == ["l2_1s", "l2_2s", "l2_3s", "l2_avg"]


def test_length_mismatch():
    with pytest.raises(ValidationError):
        l2_at_horizons(np.zeros((5, 2)), np.zeros((6, 2)))


@given(traj, traj, st.floats(-100, 100), st.floats(-100, 100))
def test_sign_flip_and_translation(p, t, dx, dy):
    base = l2_at_horizons(p, t)
    flipped = l2_at_horizons(-p, -t)
    shifted = l2_at_horizons(p + [dx, dy], t + [dx, dy])
    for other in (flipped, shifted):
        assert abs(other.avg - base.avg) <= 1e-12 * max(1.0, base.avg) + 1e-9
        for h in base.at:
            assert abs(other.at[h] - base.at[h]) <= 1e-12 * max(1.0, base.at[h]) + 1e-9


def test_average_reports():
    a = L2Report({1.0: 1.0, 2.0: 2.0}, 1.5)
    b = L2Report({1.0: 3.0, 2.0: 4.0}, 2.5)
    assert average_reports([a, b]) == L2Report({1.0: 2.0, 2.0: 3.0}, 2.0)


def test_failure_rate():
    ok = [DecodeOutcome(np.zeros((6, 2))) for _ in range(4)]
    assert failure_rate(ok) == 0.0
    assert failure_rate(ok + [DecodeOutcome(None, "masked")]) == pytest.approx(1 / 5)


def test_reasoning_accuracy():
    truth = [1, 2, 3, 9, 9]
    assert reasoning_accuracy(truth, truth, 9).token_accuracy == 1.0
    assert reasoning_accuracy([1, 0, 3, 4, 4], truth, 9).token_accuracy == pytest.approx(2 / 3)
    assert reasoning_accuracy([1, 2], [9, 9], 9).token_accuracy is None
    with pytest.raises(ValidationError):
        reasoning_accuracy([1], [1, 2], 9)


def test_label_extraction():
    for label, text in REASONING_TEMPLATES.items():
        assert label_from_reasoning(text.split()) == label
    assert label_from_reasoning(["steers", "left", "right"]) is None
    assert label_from_reasoning([]) is None


def test_random_reasoning_matches_one_label_in_six():
    g = np.random.default_rng(0)
    n = 6000
    truth = g.choice(LABELS, size=n)
    guess = g.choice(LABELS, size=n)
    hits = [
        reasoning_accuracy([0], [0], 9, REASONING_TEMPLATES[p].split(), t).label_match for p, t in zip(guess, truth)
    ]
    assert abs(np.mean(hits) - 1 / 6) < 0.02


def test_planning_report():
    r = PlanningReport(L2Report({1.0: 0.1, 2.0: 0.2, 3.0: 0.3}, 0.2), 0.0, 3.0, 1.5, 0.9, None)
    row = r.row(include_wall=False)
    assert "wall_ms_per_decode" not in row and row["label_match"] == ""
    assert "1 s | 2 s | 3 s | Avg | FR" in r.table()
    with pytest.raises(ValidationError):
        PlanningReport(L2Report({1.0: -1.0}, 0.0), 0.0, 3.0, 0.0)
    with pytest.raises(ValidationError):
        PlanningReport(L2Report({1.0: 1.0}, 1.0), 1.5, 3.0, 0.0)
    text = rows_to_csv([r.row()])
    assert text.splitlines()[0].startswith("l2_1s,l2_2s,l2_3s,l2_avg,failure_rate")


def test_metrics_are_pure():
    p, t = np.random.default_rng(1).normal(size=(2, 6, 2))
    assert l2_at_horizons(p, t) == l2_at_horizons(p, t)


def test_latency_report_errors(tmp_path):
    with pytest.raises(ValidationError):
        latency_report({})
    with pytest.raises(ValidationError):
        latency_report({"action_priority": [{"kind": "step"}]})
    with pytest.raises(ValidationError):
        read_trace(tmp_path / "missing.jsonl")
