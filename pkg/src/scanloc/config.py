"""Run configuration: one INI file, overridable per key from the command line."""

from __future__ import annotations

import configparser
import hashlib
import json
import math
from dataclasses import dataclass, fields
from pathlib import Path

from .dataset import SamplingConfig
from .geometry import ProjectionGeometry
from .registration import IcpConfig

DEFAULTS = {
    "run": {"seed": "0", "out": "run"},
    "paths": {"dataset": "", "checkpoint": "", "map": ""},
    "world": {"scene_seed": "", "extent": "120", "n_primitives": "160", "n_places": "50",
              "lateral_offset": "0.6", "heading_jitter_deg": "5", "max_spacing": "1.0",
              "range_noise": "0"},
    "projection": {"height": "16", "width": "360", "zenith_min_deg": "-26",
                   "zenith_max_deg": "6", "max_range": "80", "quantize": "true"},
    "train": {"margin": "0.5", "epochs": "40", "steps_per_epoch": "50", "batch_size": "16",
              "learning_rate": "0.001", "stage_switch_epoch": "", "literal_triplet": "false"},
    "sampling": {"similar_radius": "1.5", "hard_negative_min": "2", "hard_negative_max": "5",
                 "query_spacing": "3"},
    "icp": {"max_iterations": "80", "max_correspondence_distance": "1.0",
            "initial_correspondence_distance": "8.0", "annealing_iterations": "20",
            "translation_tolerance": "1e-4", "rotation_tolerance": "1e-4",
            "normal_neighbors": "10", "min_correspondences": "10"},
    "eval": {"max_k": "10", "shift_step_deg": "10", "place_radius": "1.5",
             "yaw_threshold_deg": "2.5", "refine": "true"},
}


@dataclass(frozen=True)
class WorldConfig:
    scene_seed: int
    extent: float
    n_primitives: int
    n_places: int
    lateral_offset: float
    heading_jitter_deg: float
    max_spacing: float
    range_noise: float


@dataclass(frozen=True)
class EvalConfig:
    max_k: int
    shift_step_deg: int
    place_radius: float
    yaw_threshold_deg: float
    refine: bool


@dataclass(frozen=True)
class RunConfig:
    seed: int
    out: Path
    dataset: Path
    checkpoint: Path
    map: Path
    world: WorldConfig
    geometry: ProjectionGeometry
    train: dict
    sampling: SamplingConfig
    icp: IcpConfig
    eval: EvalConfig
    parser: configparser.ConfigParser

    def canonical(self) -> dict:
        """Every resolved setting as plain strings, sorted by section and key."""
        return {s: dict(sorted(self.parser[s].items())) for s in sorted(self.parser.sections())}

    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _cast(tp, raw: str, where: str):
    try:
        if tp is bool:
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        return tp(raw)
    except ValueError:
        raise ValueError(f"{where}: cannot read {raw!r} as {tp.__name__}") from None


def _section(parser, name, cls, cast=None):
    out = {}
    for fld in fields(cls):
        raw = parser.get(name, fld.name)
        tp = (cast or {}).get(fld.name) or {"int": int, "float": float, "bool": bool}.get(
            fld.type if isinstance(fld.type, str) else fld.type.__name__, float)
        out[fld.name] = _cast(tp, raw, f"[{name}] {fld.name}")
    return cls(**out)


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Read ``path`` (optional) over built-in defaults, then apply ``section.key`` overrides."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_dict(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        parser.read(path, encoding="utf-8")
    for key, value in (overrides or {}).items():
        if "." not in key:
            raise ValueError(f"override {key!r} must look like section.key")
        sec, opt = key.split(".", 1)
        if sec not in DEFAULTS or opt not in DEFAULTS[sec]:
            raise ValueError(f"unknown setting {key!r}")
        parser.set(sec, opt, str(value))
    for sec in parser.sections():
        unknown = set(parser[sec]) - set(DEFAULTS.get(sec, {}))
        if sec not in DEFAULTS or unknown:
            raise ValueError(f"unknown setting(s) in [{sec}]: {sorted(unknown) or sec}")

    seed = _cast(int, parser.get("run", "seed"), "[run] seed")
    if not parser.get("world", "scene_seed"):
        parser.set("world", "scene_seed", str(seed))
    out = Path(parser.get("run", "out"))
    defaults = {"dataset": out / "dataset" / "manifest.txt", "checkpoint": out / "model.ckpt",
                "map": out / "map.bin"}
    for key, default in defaults.items():
        if not parser.get("paths", key):
            parser.set("paths", key, str(default))

    p = parser["projection"]
    geometry = ProjectionGeometry(
        _cast(int, p["height"], "[projection] height"), _cast(int, p["width"], "[projection] width"),
        math.radians(_cast(float, p["zenith_min_deg"], "[projection] zenith_min_deg")),
        math.radians(_cast(float, p["zenith_max_deg"], "[projection] zenith_max_deg")),
        _cast(float, p["max_range"], "[projection] max_range"),
        _cast(bool, p["quantize"], "[projection] quantize"))
    t = parser["train"]
    train = {"margin": _cast(float, t["margin"], "[train] margin"),
             "epochs": _cast(int, t["epochs"], "[train] epochs"),
             "steps_per_epoch": _cast(int, t["steps_per_epoch"], "[train] steps_per_epoch"),
             "batch_size": _cast(int, t["batch_size"], "[train] batch_size"),
             "learning_rate": _cast(float, t["learning_rate"], "[train] learning_rate"),
             "stage_switch_epoch": (_cast(int, t["stage_switch_epoch"], "[train] stage_switch_epoch")
                                    if t["stage_switch_epoch"] else None),
             "literal_triplet": _cast(bool, t["literal_triplet"], "[train] literal_triplet")}
    return RunConfig(
        seed=seed, out=out,
        dataset=Path(parser.get("paths", "dataset")),
        checkpoint=Path(parser.get("paths", "checkpoint")),
        map=Path(parser.get("paths", "map")),
        world=_section(parser, "world", WorldConfig),
        geometry=geometry, train=train,
        sampling=_section(parser, "sampling", SamplingConfig),
        icp=_section(parser, "icp", IcpConfig),
        eval=_section(parser, "eval", EvalConfig),
        parser=parser)
