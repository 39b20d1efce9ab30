"""Rotated-query evaluation: recall vs. yaw shift, recall@k, yaw error and runtimes."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import normalize_angle, rotate_yaw
from .localizer import STAGES, GlobalLocalizer

PLACE_RADIUS = 1.5
YAW_THRESHOLD_DEG = 2.5


def angle_error(a: float, b: float) -> float:
    """Absolute wrapped difference of two headings, radians."""
    return abs(normalize_angle(a - b))


def is_correct_place(candidate_xy, true_xy, radius: float = PLACE_RADIUS) -> bool:
    return math.hypot(candidate_xy[0] - true_xy[0], candidate_xy[1] - true_xy[1]) < radius


def is_success(candidate_xy, true_xy, theta_est: float, theta_true: float,
               radius: float = PLACE_RADIUS, yaw_threshold_deg: float = YAW_THRESHOLD_DEG) -> bool:
    """Right place (strictly within ``radius``) and heading within the yaw threshold."""
    return (is_correct_place(candidate_xy, true_xy, radius)
            and math.degrees(angle_error(theta_est, theta_true)) <= yaw_threshold_deg)


@dataclass
class QueryOutcome:
    query_id: int
    shift_deg: int
    candidate_ids: list[int]
    correct: bool
    hit_rank: int | None
    yaw_error_deg: float
    final_yaw_error_deg: float
    position_error: float
    icp_converged: bool
    success: bool


@dataclass
class EvalReport:
    recall_vs_shift: list[tuple[int, float]]
    recall_at_k: list[tuple[int, float, float]]
    yaw_mean_deg: float
    yaw_std_deg: float
    yaw_recall_pct: float
    runtimes_ms: dict[str, float]
    icp_success_given_correct: float
    outcomes: list[QueryOutcome] = field(default_factory=list)

    @property
    def recall_spread(self) -> float:
        r = [x[1] for x in self.recall_vs_shift]
        return max(r) - min(r)

    @property
    def mean_recall(self) -> float:
        return float(np.mean([x[1] for x in self.recall_vs_shift]))

    def summary(self) -> dict[str, float]:
        return {"mean_recall_at_1": self.mean_recall,
                "recall_spread": self.recall_spread,
                "yaw_mean_deg": self.yaw_mean_deg,
                "yaw_std_deg": self.yaw_std_deg,
                "yaw_recall_pct": self.yaw_recall_pct,
                "icp_success_given_correct": self.icp_success_given_correct}


def evaluate(localizer: GlobalLocalizer, queries, shift_step_deg: int = 10, max_k: int = 10,
             radius: float = PLACE_RADIUS, yaw_threshold_deg: float = YAW_THRESHOLD_DEG,
             refine: bool = True) -> EvalReport:
    """Localize every query under every yaw shift in ``[0, 360)`` and aggregate.

    A shift of d rotates the query cloud by +d, which turns its true heading
    into ``theta - d``. Yaw errors are taken before ICP and only over queries
    whose top candidate is the right place; a heading estimate relative to a
    wrong place has no ground truth.
    """
    queries = list(queries)
    if not queries:
        raise ValueError("no queries to evaluate")
    if not 0 < shift_step_deg <= 360 or 360 % shift_step_deg:
        raise ValueError("shift step must divide 360")
    max_k = min(max_k, len(localizer.map_))
    shifts = list(range(0, 360, shift_step_deg))
    outcomes: list[QueryOutcome] = []
    timings = {s: [] for s in STAGES}
    warm = True
    saved_refine = localizer.refine
    localizer.refine = refine
    try:
        for shift in shifts:
            d = math.radians(shift)
            for q in queries:
                cloud = rotate_yaw(q.cloud, d) if shift else q.cloud
                theta_true = normalize_angle(q.gt_pose.theta - d)
                true_xy = (q.gt_pose.x, q.gt_pose.y)
                res = localizer.localize(cloud, k=max_k)
                if warm:
                    warm = False
                else:
                    for s in STAGES:
                        timings[s].append(res.timings_ms[s])
                ranks = [i for i, (cid, _) in enumerate(res.candidates)
                         if is_correct_place(localizer.map_.xy[localizer.map_.row(cid)],
                                             true_xy, radius)]
                correct = is_correct_place(res.candidate_xy, true_xy, radius)
                final = res.pose
                outcomes.append(QueryOutcome(
                    q.id, shift, [c[0] for c in res.candidates], correct,
                    ranks[0] + 1 if ranks else None,
                    math.degrees(angle_error(res.initial_pose.theta, theta_true)),
                    math.degrees(angle_error(final.theta, theta_true)),
                    math.hypot(final.x - true_xy[0], final.y - true_xy[1]),
                    res.icp_converged,
                    is_success(res.candidate_xy, true_xy, final.theta, theta_true, radius,
                               yaw_threshold_deg)))
    finally:
        localizer.refine = saved_refine
    return aggregate(outcomes, shifts, max_k, timings)


def aggregate(outcomes: list[QueryOutcome], shifts, max_k: int, timings=None) -> EvalReport:
    by_shift = {s: [o for o in outcomes if o.shift_deg == s] for s in shifts}
    recall_vs_shift = [(s, float(np.mean([o.correct for o in by_shift[s]]))) for s in shifts]
    recall_at_k = []
    for k in range(1, max_k + 1):
        per_shift = [np.mean([o.hit_rank is not None and o.hit_rank <= k for o in by_shift[s]])
                     for s in shifts]
        recall_at_k.append((k, float(np.mean(per_shift)), float(np.std(per_shift))))
    correct = [o for o in outcomes if o.correct]
    yaw = np.array([o.yaw_error_deg for o in correct])
    yaw_mean = float(yaw.mean()) if len(yaw) else float("nan")
    yaw_std = float(yaw.std()) if len(yaw) else float("nan")
    # an estimate is produced for every query by construction
    yaw_recall = 100.0 * sum(math.isfinite(o.yaw_error_deg) for o in outcomes) / len(outcomes)
    icp_ok = float(np.mean([o.success for o in correct])) if correct else float("nan")
    runtimes = {s: float(np.mean(v)) if v else float("nan")
                for s, v in (timings or {}).items()}
    return EvalReport(recall_vs_shift, recall_at_k, yaw_mean, yaw_std, yaw_recall, runtimes,
                      icp_ok, outcomes)


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x
                        for x in row])


REPORT_FILES = ("recall_vs_shift.csv", "recall_at_k.csv", "yaw_stats.csv",
                "localization_outcomes.csv")
RUNTIME_FILE = "runtimes.csv"


def write_report(report: EvalReport, out_dir) -> list[Path]:
    """Write one CSV per table plus per-query outcomes; returns the written paths.

    Everything except the runtime table is a pure function of the inputs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / n for n in REPORT_FILES] + [out / RUNTIME_FILE]
    _write_csv(paths[0], ["shift_deg", "recall"], report.recall_vs_shift)
    _write_csv(paths[1], ["k", "recall", "stddev"], report.recall_at_k)
    _write_csv(paths[2], ["mean_deg", "std_deg", "recall_pct"],
               [(report.yaw_mean_deg, report.yaw_std_deg, report.yaw_recall_pct)])
    _write_csv(paths[3], ["query_id", "shift_deg", "candidate_id", "correct", "hit_rank",
                          "yaw_error_deg", "final_yaw_error_deg", "position_error_m",
                          "icp_converged", "success"],
               [(o.query_id, o.shift_deg, o.candidate_ids[0], int(o.correct),
                 o.hit_rank if o.hit_rank is not None else "", o.yaw_error_deg,
                 o.final_yaw_error_deg, o.position_error, int(o.icp_converged), int(o.success))
                for o in report.outcomes])
    _write_csv(paths[4], ["stage", "mean_ms"], list(report.runtimes_ms.items()))
    return paths
