import csv
import math

import numpy as np
import pytest

from scanloc.evaluation import (
    QueryOutcome,
    aggregate,
    angle_error,
    evaluate,
    is_success,
    write_report,
)
from scanloc.geometry import ProjectionGeometry
from scanloc.localizer import GlobalLocalizer
from stubs import ZeroYaw

EPS = 1e-9


@pytest.mark.parametrize("dx,ok", [(1.5 - EPS, True), (1.5, False), (1.5 + EPS, False)])
def test_success_distance_threshold(dx, ok):
    assert is_success((dx, 0.0), (0.0, 0.0), 0.3, 0.3) is ok


@pytest.mark.parametrize("deg,ok", [(2.5 - 1e-7, True), (2.5 + 1e-7, False), (-2.5 + 1e-7, True)])
def test_success_yaw_threshold(deg, ok):
    assert is_success((0.0, 0.0), (0.0, 0.0), math.radians(deg), 0.0) is ok


def test_success_yaw_wraps():
    assert is_success((0, 0), (0, 0), math.pi - 0.01, -math.pi + 0.01)
    assert angle_error(3.0, -3.0) == pytest.approx(2 * math.pi - 6.0)


def _outcome(q, shift, rank, correct=None, yaw=1.0, final=0.5):
    correct = (rank == 1) if correct is None else correct
    return QueryOutcome(q, shift, [0], correct, rank, yaw, final, 0.0, True,
                        correct and final <= 2.5)


def test_aggregate_recall_at_k_is_monotone_and_exact():
    rng = np.random.default_rng(0)
    outcomes = []
    for shift in (0, 90, 180, 270):
        for q in range(20):
            r = int(rng.integers(1, 8))
            outcomes.append(_outcome(q, shift, r if r < 7 else None))
    rep = aggregate(outcomes, [0, 90, 180, 270], 6)
    recalls = [r for _, r, _ in rep.recall_at_k]
    assert all(b >= a for a, b in zip(recalls, recalls[1:]))
    by_shift = [np.mean([o.hit_rank == 1 for o in outcomes if o.shift_deg == s])
                for s in (0, 90, 180, 270)]
    assert rep.recall_at_k[0][1] == pytest.approx(np.mean(by_shift))
    assert rep.recall_at_k[0][2] == pytest.approx(np.std(by_shift))
    assert [r for _, r in rep.recall_vs_shift] == pytest.approx(by_shift)


def test_yaw_stats_use_correct_retrievals_only():
    outs = [_outcome(0, 0, 1, yaw=10.0), _outcome(1, 0, 1, yaw=20.0),
            _outcome(2, 0, None, correct=False, yaw=170.0)]
    rep = aggregate(outs, [0], 1)
    assert rep.yaw_mean_deg == pytest.approx(15.0)
    assert rep.yaw_std_deg == pytest.approx(5.0)
    assert rep.yaw_recall_pct == 100.0
    assert rep.icp_success_given_correct == 1.0


def test_report_files(tmp_path):
    outs = [_outcome(q, s, 1) for s in (0, 180) for q in range(3)]
    rep = aggregate(outs, [0, 180], 2, {"projection": [1.0, 2.0]})
    paths = write_report(rep, tmp_path)
    headers = {p.name: next(csv.reader(open(p))) for p in paths}
    assert headers["recall_vs_shift.csv"] == ["shift_deg", "recall"]
    assert headers["recall_at_k.csv"] == ["k", "recall", "stddev"]
    assert headers["yaw_stats.csv"] == ["mean_deg", "std_deg", "recall_pct"]
    assert headers["runtimes.csv"] == ["stage", "mean_ms"]
    rows = list(csv.reader(open(tmp_path / "recall_vs_shift.csv")))[1:]
    assert rows == [["0", "1.0"], ["180", "1.0"]]


def test_exact_copy_at_zero_shift_succeeds(line_records):
    est = ZeroYaw(ProjectionGeometry(), random_state=1).init_untrained()
    loc = GlobalLocalizer(est).fit(line_records)
    rep = evaluate(loc, line_records[:3], shift_step_deg=180, max_k=3)
    zero = [o for o in rep.outcomes if o.shift_deg == 0]
    assert all(o.success for o in zero)
    assert [s for s, _ in rep.recall_vs_shift] == [0, 180]
    assert set(rep.runtimes_ms) == {"projection", "descriptor", "retrieval", "yaw", "icp"}


def test_evaluate_rejects_bad_step(line_records):
    est = ZeroYaw(ProjectionGeometry(), random_state=1).init_untrained()
    loc = GlobalLocalizer(est).fit(line_records)
    with pytest.raises(ValueError):
        evaluate(loc, line_records[:1], shift_step_deg=7)
    with pytest.raises(ValueError):
        evaluate(loc, [])
