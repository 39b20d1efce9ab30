"""Command-line entry point: generate | train | build-map | localize | eval."""

from __future__ import annotations

import os

# single-threaded BLAS keeps floating-point reductions in a fixed order
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import math  # noqa: E402
import platform  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402
import scipy  # noqa: E402
import sklearn  # noqa: E402

from . import __version__  # noqa: E402
from .config import RunConfig, load_config  # noqa: E402
from .dataset import (ScanRecord, load_dataset, load_kitti_scan, write_manifest,  # noqa: E402
                      write_sequence)
from .descriptor import DescriptorExtractor, TrainingDiverged  # noqa: E402
from .evaluation import evaluate, write_report  # noqa: E402
from .localizer import DescriptorMap, GlobalLocalizer, build_map  # noqa: E402
from .synthworld import SensorConfig, generate_dataset, generate_scene, plan_survey  # noqa: E402

log = logging.getLogger("scanloc")


def write_metadata(cfg: RunConfig, command: str, extra: dict | None = None) -> Path:
    """Record config hash, seed and library versions under ``<out>/run_metadata.json``."""
    path = cfg.out / "run_metadata.json"
    meta = json.loads(path.read_text()) if path.is_file() else {}
    meta[command] = {"config_hash": cfg.hash(), "seed": cfg.seed, **(extra or {})}
    meta["versions"] = {"scanloc": __version__, "python": platform.python_version(),
                        "numpy": np.__version__, "scipy": scipy.__version__,
                        "scikit-learn": sklearn.__version__}
    meta["config"] = cfg.canonical()
    cfg.out.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def _require(path: Path, what: str):
    if not Path(path).exists():
        raise FileNotFoundError(f"missing {what}: {path}")


def cmd_generate(cfg: RunConfig) -> Path:
    w = cfg.world
    scene = generate_scene(w.scene_seed, w.extent, w.n_primitives)
    survey = plan_survey(scene, w.n_places, w.max_spacing, w.lateral_offset,
                         math.radians(w.heading_jitter_deg), cfg.sampling.similar_radius,
                         seed=w.scene_seed)
    sensor = SensorConfig(range_noise=w.range_noise)
    ts = survey.trajectory.timestamps
    n_lap = len(ts) // 2
    times = {"map": ts[:n_lap:survey.stride], "query": ts[n_lap::survey.stride]}
    # the extra training lap is driven after the two surveyed laps
    times["train"] = np.concatenate([ts[:n_lap], ts[-1] + 0.1 * np.arange(
        1, len(survey.train) - n_lap + 1)])
    root = cfg.dataset.parent
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"scene_seed": w.scene_seed, "extent": w.extent, "n_primitives": w.n_primitives,
                "n_places": w.n_places, "pose_frame": "lidar"}
    for split, poses in (("map", survey.map), ("query", survey.query), ("train", survey.train)):
        scans = generate_dataset(scene, poses, sensor)
        records = [ScanRecord(i, c, p, float(t)) for i, ((c, p), t)
                   in enumerate(zip(scans, times[split]))]
        write_sequence(root, split, f"{split}_poses.txt", records, f"{split}_times.txt")
        manifest.update({f"{split}_scans": split, f"{split}_poses": f"{split}_poses.txt",
                         f"{split}_times": f"{split}_times.txt"})
        log.info("wrote %d %s scans", len(records), split)
    for k, v in vars(cfg.sampling).items():
        manifest[k] = v
    write_manifest(cfg.dataset, manifest)
    write_metadata(cfg, "generate", {"dataset": str(cfg.dataset)})
    return cfg.dataset


def cmd_train(cfg: RunConfig) -> Path:
    _require(cfg.dataset, "dataset manifest")
    records = load_dataset(cfg.dataset, "train")
    s = cfg.sampling
    est = DescriptorExtractor(cfg.geometry, similar_radius=s.similar_radius,
                              hard_negative_min=s.hard_negative_min,
                              hard_negative_max=s.hard_negative_max, random_state=cfg.seed,
                              log_path=cfg.out / "loss_log.txt",
                              checkpoint_dir=cfg.out / "checkpoints", **cfg.train)
    cfg.out.mkdir(parents=True, exist_ok=True)
    est.fit(records)
    cfg.checkpoint.parent.mkdir(parents=True, exist_ok=True)
    est.save(cfg.checkpoint)
    trace = est.loss_trace_
    write_metadata(cfg, "train", {"checkpoint": str(cfg.checkpoint), "steps": len(trace),
                                  "initial_loss": trace[0][3], "final_loss": trace[-1][3]})
    return cfg.checkpoint


def cmd_build_map(cfg: RunConfig) -> Path:
    _require(cfg.dataset, "dataset manifest")
    _require(cfg.checkpoint, "checkpoint")
    est = DescriptorExtractor.load(cfg.checkpoint)
    dmap = build_map(load_dataset(cfg.dataset, "map"), est)
    cfg.map.parent.mkdir(parents=True, exist_ok=True)
    dmap.save(cfg.map)
    write_metadata(cfg, "build-map", {"map": str(cfg.map), "entries": len(dmap)})
    return cfg.map


def _localizer(cfg: RunConfig) -> tuple[GlobalLocalizer, list[ScanRecord]]:
    for path, what in ((cfg.dataset, "dataset manifest"), (cfg.checkpoint, "checkpoint"),
                       (cfg.map, "map file")):
        _require(path, what)
    est = DescriptorExtractor.load(cfg.checkpoint)
    dmap = DescriptorMap.load(cfg.map)
    loc = GlobalLocalizer(est, k=1, icp_config=cfg.icp, refine=cfg.eval.refine)
    loc.fit(load_dataset(cfg.dataset, "map"), descriptor_map=dmap)
    return loc, load_dataset(cfg.dataset, "query")


def cmd_localize(cfg: RunConfig, scan: Path, k: int = 1) -> dict:
    _require(scan, "scan file")
    loc, _ = _localizer(cfg)
    res = loc.localize(load_kitti_scan(scan), k=k)
    p = res.pose
    out = {"candidates": [[c, d] for c, d in res.candidates], "candidate_id": res.candidate_id,
           "delta_theta": res.delta_theta, "x": p.x, "y": p.y, "theta": p.theta,
           "icp_converged": res.icp_converged, "timings_ms": res.timings_ms}
    print(json.dumps(out))
    return out


def cmd_eval(cfg: RunConfig):
    loc, queries = _localizer(cfg)
    e = cfg.eval
    report = evaluate(loc, queries, e.shift_step_deg, e.max_k, e.place_radius,
                      e.yaw_threshold_deg, refine=e.refine)
    paths = write_report(report, cfg.out / "eval")
    summary = report.summary()
    write_metadata(cfg, "eval", {"reports": [str(p) for p in paths], "summary": summary})
    for key, value in summary.items():
        print(f"{key} {value:.4f}")
    return report


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects section.key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if args.seed is not None:
        out["run.seed"] = str(args.seed)
    if args.out is not None:
        out["run.out"] = args.out
    for name in ("dataset", "checkpoint", "map"):
        if getattr(args, name, None):
            out[f"paths.{name}"] = getattr(args, name)
    if getattr(args, "epochs", None) is not None:
        out["train.epochs"] = str(args.epochs)
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, help="run seed (default from config, else 0)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--dataset", help="dataset manifest path")
    common.add_argument("--checkpoint", help="network checkpoint path")
    common.add_argument("--map", help="descriptor map path")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override any config setting; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="scanloc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="simulate a synthetic dataset")
    tr = sub.add_parser("train", parents=[common], help="train the descriptor network")
    tr.add_argument("--epochs", type=int)
    sub.add_parser("build-map", parents=[common], help="describe map scans into a map file")
    lo = sub.add_parser("localize", parents=[common], help="localize one scan file")
    lo.add_argument("scan", type=Path, help="scan file (<id>.bin)")
    lo.add_argument("-k", type=int, default=1, help="candidates to report")
    sub.add_parser("eval", parents=[common], help="rotated-query evaluation and CSV reports")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "build-map":
            cmd_build_map(cfg)
        elif args.command == "localize":
            cmd_localize(cfg, args.scan, args.k)
        else:
            cmd_eval(cfg)
    except TrainingDiverged as exc:
        where = f" (last good checkpoint: {exc.last_good_checkpoint})" if exc.last_good_checkpoint else ""
        print(f"scanloc {args.command}: training diverged: {exc}{where}", file=sys.stderr)
        return 3
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"scanloc {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
