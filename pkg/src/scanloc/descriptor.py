"""Dual place/orientation descriptor network, its losses, and joint training.

The trunk maps a range image to 128 numbers split into a place descriptor
``v`` (first 64) and an orientation descriptor ``w`` (last 64). A small yaw
head maps ``concat(w_a, w_b)`` to a (cos, sin) estimate of the heading of
scan b relative to scan a.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .dataset import SamplingConfig, ScanRecord, sample_triplets
from .geometry import PointCloud, ProjectionGeometry, RangeImage, normalize_angle, rotate_yaw

log = logging.getLogger(__name__)

DESCRIPTOR_DIM = 64


def split_trunk_specs() -> list[ad.LayerSpec]:
    """Single sequential trunk whose 128 outputs are split into (v, w)."""
    return [
        ad.maxpool((4, 1)),
        ad.conv(16), ad.prelu(), ad.maxpool((2, 2)),
        ad.conv(32), ad.prelu(), ad.maxpool((2, 2)),
        ad.conv(64), ad.prelu(),
        ad.flatten(),
        ad.dense(256), ad.prelu(),
        ad.dense(2 * DESCRIPTOR_DIM),
    ]


def default_architecture(height: int, width: int) -> dict[str, list[ad.LayerSpec]]:
    """Shared conv trunk feeding a place branch and an orientation branch.

    The trunk downsamples azimuth by 8, so ``width`` must be divisible by 8.
    The place branch max-pools over the whole azimuth before its two fully
    connected layers; the orientation branch is one linear projection.
    """
    if width % 8:
        raise ValueError(f"image width must be divisible by 8, got {width}")
    return {
        "trunk": [
            ad.maxpool((1, 4)),
            ad.conv(16), ad.prelu(), ad.maxpool((2, 2)),
            ad.conv(32), ad.prelu(), ad.maxpool((2, 1)),
            ad.conv(64), ad.prelu(),
        ],
        "place_head": [ad.maxpool((1, width // 8)), ad.flatten(),
                       ad.dense(256), ad.prelu(), ad.dense(DESCRIPTOR_DIM)],
        "orientation_head": [ad.flatten(), ad.dense(DESCRIPTOR_DIM)],
        "yaw_head": default_yaw_specs(),
    }


def default_yaw_specs() -> list[ad.LayerSpec]:
    return [ad.dense(64), ad.prelu(), ad.dense(2)]


def harmonic_init(layer: ad.Dense, feature_shape, rng, harmonics=(1,)):
    """Initialise a linear map over (C, H, W) features as circular harmonics along W.

    Output pair j becomes ``sum u_j(c, h) * (cos, sin)(2 pi k col / W) * f(c, h, col)``,
    which rotates by ``k * 2 pi / W`` per column shift of the input.
    """
    c, h, w = feature_shape
    n_out = layer.weight.shape[0]
    col = np.arange(w)
    weights = np.zeros((n_out, c, h, w))
    std = math.sqrt(2.0 / (c * h * w))
    for j in range(n_out // 2):
        k = harmonics[j % len(harmonics)]
        u = rng.normal(0.0, std, size=(c, h, 1))
        weights[2 * j] = u * np.cos(2 * math.pi * k * col / w)
        weights[2 * j + 1] = u * np.sin(2 * math.pi * k * col / w)
    layer.weight.value = weights.reshape(n_out, -1)


# -- losses ------------------------------------------------------------------

def triplet_loss(v_a, v_s, v_d, margin: float, literal: bool = False):
    """Hinged triplet loss over squared Euclidean distances.

    Works on single vectors or batches (last axis = descriptor). Returns
    ``(loss, (g_a, g_s, g_d))`` with per-row loss values. ``literal`` evaluates
    ``dp**2 - dn**2 + m`` with squared distances and no hinge instead.
    """
    v_a, v_s, v_d = (np.asarray(v, dtype=np.float64) for v in (v_a, v_s, v_d))
    if not v_a.shape == v_s.shape == v_d.shape:
        raise ValueError(f"descriptor shapes differ: {v_a.shape}, {v_s.shape}, {v_d.shape}")
    ds = v_a - v_s
    dd = v_a - v_d
    dp = (ds * ds).sum(axis=-1)
    dn = (dd * dd).sum(axis=-1)
    if literal:
        loss = dp * dp - dn * dn + margin
        gp = (2.0 * dp)[..., None]
        gn = (2.0 * dn)[..., None]
    else:
        loss = np.maximum(0.0, dp - dn + margin)
        active = (dp - dn + margin > 0).astype(np.float64)[..., None]
        gp = gn = active
    g_s = -2.0 * ds * gp
    g_d = 2.0 * dd * gn
    g_a = -g_s - g_d
    return loss, (g_a, g_s, g_d)


def orientation_loss(y_yaw, delta_theta):
    """0.5 * ((y0 - cos d)^2 + (y1 - sin d)^2); returns (loss, d loss / d y)."""
    y = np.asarray(y_yaw, dtype=np.float64)
    d = np.asarray(delta_theta, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise ValueError("delta_theta must be finite")
    target = np.stack([np.cos(d), np.sin(d)], axis=-1)
    r = y - target
    # |target|^2 is 1 up to rounding; dividing by the computed value makes
    # y = (0, 0) give exactly 0.5
    norm2 = (target * target).sum(axis=-1)
    return 0.5 * (r * r).sum(axis=-1) / norm2, r / norm2[..., None]


def yaw_from_encoding(y_yaw) -> np.ndarray | float:
    y = np.asarray(y_yaw, dtype=np.float64)
    return normalize_angle(np.arctan2(y[..., 1], y[..., 0]))


def augmented_yaw_target(delta_theta_gt: float, delta_a: float, delta_s: float) -> float:
    """Yaw target after rotating the anchor cloud by ``delta_a`` and the similar by ``delta_s``.

    Rotating a scan's points by +d is the same as turning the sensor by -d, so
    the anchor heading becomes theta_a - delta_a and the similar theta_s - delta_s.
    """
    return normalize_angle(delta_theta_gt + delta_a - delta_s)


# -- model -------------------------------------------------------------------

@dataclass
class DescriptorPair:
    v: np.ndarray
    w: np.ndarray


class OrientedDescriptorNet:
    """Named sub-networks with joint forward/backward passes.

    Either ``trunk`` alone emits the 128 descriptor values (split layout), or
    ``trunk`` feeds ``place_head`` (v) and ``orientation_head`` (w). The
    ``yaw_head`` always maps ``concat(w_a, w_b)`` to a (cos, sin) pair.
    """

    def __init__(self, input_shape, architecture: dict | None = None, seed: int = 0,
                 harmonics=(1, 1, 2)):
        if architecture is None:
            architecture = default_architecture(input_shape[1], input_shape[2])
        rng = np.random.default_rng([seed, 17])
        self.networks: dict[str, ad.Sequential] = {}
        trunk = ad.Sequential(architecture["trunk"], input_shape, seed=seed)
        self.networks["trunk"] = trunk
        if "place_head" in architecture:
            self.networks["place_head"] = ad.Sequential(architecture["place_head"],
                                                        trunk.output_shape, seed=seed + 2)
            orient = ad.Sequential(architecture["orientation_head"], trunk.output_shape,
                                   seed=seed + 3)
            self.networks["orientation_head"] = orient
            first = orient.layers[1] if orient.specs[0].kind == "flatten" else None
            if (isinstance(first, ad.Dense) and len(orient.layers) == 2
                    and len(trunk.output_shape) == 3):
                harmonic_init(first, trunk.output_shape, rng, harmonics)
        self.networks["yaw_head"] = ad.Sequential(architecture.get("yaw_head",
                                                                   default_yaw_specs()),
                                                  (2 * DESCRIPTOR_DIM,), seed=seed + 1)
        self._check_shapes()

    @classmethod
    def from_networks(cls, networks: dict[str, ad.Sequential]) -> OrientedDescriptorNet:
        obj = cls.__new__(cls)
        obj.networks = dict(networks)
        obj._check_shapes()
        return obj

    def _check_shapes(self):
        nets = self.networks
        if "place_head" in nets:
            for name in ("place_head", "orientation_head"):
                if nets[name].output_shape != (DESCRIPTOR_DIM,):
                    raise ValueError(f"{name} must output {DESCRIPTOR_DIM} values, "
                                     f"got {nets[name].output_shape}")
        elif nets["trunk"].output_shape != (2 * DESCRIPTOR_DIM,):
            raise ValueError(f"trunk must output {2 * DESCRIPTOR_DIM} values, "
                             f"got {nets['trunk'].output_shape}")
        if nets["yaw_head"].output_shape != (2,):
            raise ValueError(f"yaw head must output 2 values, got {nets['yaw_head'].output_shape}")

    @property
    def branched(self) -> bool:
        return "place_head" in self.networks

    @property
    def input_shape(self):
        return self.networks["trunk"].input_shape

    @property
    def params(self):
        return [p for net in self.networks.values() for p in net.params]

    def zero_grad(self):
        for net in self.networks.values():
            net.zero_grad()

    def _forward(self, x):
        f = self.networks["trunk"].forward(x)
        if not self.branched:
            return f
        v = self.networks["place_head"].forward(f)
        w = self.networks["orientation_head"].forward(f)
        return np.concatenate([v, w], axis=1)

    def _backward(self, g_out):
        if self.branched:
            g = self.networks["place_head"].backward(g_out[:, :DESCRIPTOR_DIM])
            g = g + self.networks["orientation_head"].backward(g_out[:, DESCRIPTOR_DIM:])
        else:
            g = g_out
        return self.networks["trunk"].backward(g)

    def descriptors(self, images: np.ndarray) -> np.ndarray:
        """(N, H, W) or (N, 1, H, W) images -> (N, 128) descriptors."""
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 3:
            x = x[:, None]
        return self._forward(x)

    def yaw_encoding(self, w_a: np.ndarray, w_b: np.ndarray) -> np.ndarray:
        w_a = np.atleast_2d(w_a)
        w_b = np.atleast_2d(w_b)
        if w_a.shape[-1] != DESCRIPTOR_DIM or w_b.shape[-1] != DESCRIPTOR_DIM:
            raise ValueError(f"orientation descriptors must have length {DESCRIPTOR_DIM}")
        return self.networks["yaw_head"].forward(np.concatenate([w_a, w_b], axis=1))

    def joint_loss(self, img_a, img_s, img_d, delta_theta, margin: float,
                   literal: bool = False, backward: bool = True):
        """Batch means of (L_pr, L_theta); accumulates gradients of their sum when ``backward``."""
        b = len(img_a)
        x = np.concatenate([img_a, img_s, img_d])
        if x.ndim == 3:
            x = x[:, None]
        out = self._forward(x)
        v, w = out[:, :DESCRIPTOR_DIM], out[:, DESCRIPTOR_DIM:]
        l_pr, (g_a, g_s, g_d) = triplet_loss(v[:b], v[b:2 * b], v[2 * b:], margin, literal)
        y = self.networks["yaw_head"].forward(np.concatenate([w[:b], w[b:2 * b]], axis=1))
        l_th, g_y = orientation_loss(y, delta_theta)
        if backward:
            g_in = self.networks["yaw_head"].backward(g_y / b)
            g_out = np.zeros_like(out)
            g_out[:b, :DESCRIPTOR_DIM] = g_a / b
            g_out[b:2 * b, :DESCRIPTOR_DIM] = g_s / b
            g_out[2 * b:, :DESCRIPTOR_DIM] = g_d / b
            g_out[:b, DESCRIPTOR_DIM:] = g_in[:, :DESCRIPTOR_DIM]
            g_out[b:2 * b, DESCRIPTOR_DIM:] = g_in[:, DESCRIPTOR_DIM:]
            self._backward(g_out)
        return float(l_pr.mean()), float(l_th.mean())

    def save(self, path, metadata: dict | None = None):
        buf = io.BytesIO()
        ad.write_checkpoint(buf, self.networks, metadata)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> tuple[OrientedDescriptorNet, dict]:
        with open(path, "rb") as f:
            nets, meta = ad.read_checkpoint(f)
        if "trunk" not in nets or "yaw_head" not in nets:
            raise ValueError(f"{path}: expected trunk and yaw_head networks, got {sorted(nets)}")
        return cls.from_networks(nets), meta


# -- estimator ----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.5
    epochs: int = 20
    steps_per_epoch: int = 50
    batch_size: int = 16
    seed: int = 0
    stage_switch_epoch: int | None = None
    learning_rate: float = 1e-3
    literal_triplet: bool = False

    def __post_init__(self):
        if self.margin <= 0 or self.learning_rate <= 0:
            raise ValueError("margin and learning_rate must be positive")
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, steps_per_epoch and batch_size must be positive")

    @property
    def switch_epoch(self) -> int:
        return self.epochs // 2 if self.stage_switch_epoch is None else self.stage_switch_epoch


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good_checkpoint=None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint


def _as_images(X, geometry: ProjectionGeometry) -> np.ndarray:
    if isinstance(X, np.ndarray) and X.dtype != object:
        arr = np.asarray(X, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        return arr
    if isinstance(X, (PointCloud, RangeImage)):
        X = [X]
    out = []
    for item in X:
        if isinstance(item, ScanRecord):
            item = item.cloud
        if isinstance(item, PointCloud):
            item = geometry.project(item)
        if isinstance(item, RangeImage):
            item = item.data
        out.append(np.asarray(item, dtype=np.float64))
    return np.stack(out)


class DescriptorExtractor(TransformerMixin, BaseEstimator):
    """Learns place/orientation descriptors from scans with known planar poses.

    ``fit`` takes a list of :class:`ScanRecord`; ``transform`` maps scans,
    range images or an (N, H, W) array to (N, 128) descriptors whose first
    64 columns are the place descriptor and the rest the orientation descriptor.
    """

    def __init__(self, geometry: ProjectionGeometry = ProjectionGeometry(), margin: float = 0.5,
                 epochs: int = 20, steps_per_epoch: int = 50, batch_size: int = 16,
                 learning_rate: float = 1e-3, stage_switch_epoch: int | None = None,
                 similar_radius: float = 1.5, hard_negative_min: float = 2.0,
                 hard_negative_max: float = 5.0, literal_triplet: bool = False,
                 architecture: dict | None = None, random_state: int = 0,
                 log_path=None, checkpoint_dir=None):
        self.geometry = geometry
        self.margin = margin
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.stage_switch_epoch = stage_switch_epoch
        self.similar_radius = similar_radius
        self.hard_negative_min = hard_negative_min
        self.hard_negative_max = hard_negative_max
        self.literal_triplet = literal_triplet
        self.architecture = architecture
        self.random_state = random_state
        self.log_path = log_path
        self.checkpoint_dir = checkpoint_dir

    def _train_config(self) -> TrainConfig:
        return TrainConfig(self.margin, self.epochs, self.steps_per_epoch, self.batch_size,
                           self.random_state, self.stage_switch_epoch, self.learning_rate,
                           self.literal_triplet)

    def _sampling_config(self) -> SamplingConfig:
        return SamplingConfig(self.similar_radius, self.hard_negative_min,
                              self.hard_negative_max)

    def _new_network(self) -> OrientedDescriptorNet:
        g = self.geometry
        return OrientedDescriptorNet((1, g.height, g.width), self.architecture,
                                     seed=self.random_state)

    def fit(self, X, y=None):
        self.network_ = self._new_network()
        self.loss_trace_ = train(self.network_, list(X), self._train_config(),
                                 self._sampling_config(), self.geometry,
                                 log_path=self.log_path, checkpoint_dir=self.checkpoint_dir)
        return self

    def init_untrained(self):
        """Random-weight network, useful as a chance-level baseline."""
        self.network_ = self._new_network()
        self.loss_trace_ = []
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        imgs = _as_images(X, self.geometry)
        expected = self.network_.input_shape[1:]
        if imgs.shape[1:] != expected:
            raise ValueError(f"image shape {imgs.shape[1:]} does not match network input {expected}")
        # one image per pass: BLAS blocking depends on batch size, and a scan's
        # descriptor should not depend on what else is in the batch
        return np.concatenate([self.network_.descriptors(imgs[i:i + 1])
                               for i in range(len(imgs))])

    def extract(self, X) -> DescriptorPair:
        d = self.transform(X)[0]
        return DescriptorPair(d[:DESCRIPTOR_DIM].copy(), d[DESCRIPTOR_DIM:].copy())

    def estimate_yaw(self, w_a, w_b) -> np.ndarray | float:
        """Heading of scan b minus heading of scan a, in [-pi, pi)."""
        check_is_fitted(self, "network_")
        single = np.ndim(w_a) == 1
        y = self.network_.yaw_encoding(w_a, w_b)
        yaw = yaw_from_encoding(y)
        return float(yaw[0]) if single else yaw

    def save(self, path):
        check_is_fitted(self, "network_")
        g = self.geometry
        meta = {"geometry": [g.height, g.width, g.zenith_min, g.zenith_max, g.max_range,
                             int(g.quantize)],
                "margin": self.margin, "seed": self.random_state}
        self.network_.save(path, meta)

    @classmethod
    def load(cls, path) -> DescriptorExtractor:
        net, meta = OrientedDescriptorNet.load(path)
        h, w, zmin, zmax, rmax, q = meta["geometry"]
        est = cls(geometry=ProjectionGeometry(int(h), int(w), zmin, zmax, rmax, bool(q)),
                  margin=meta.get("margin", 0.5), random_state=meta.get("seed", 0),
                  architecture={k: n.specs for k, n in net.networks.items()})
        est.network_ = net
        est.loss_trace_ = []
        return est


# -- training -----------------------------------------------------------------

def train(net: OrientedDescriptorNet, records: list[ScanRecord], config: TrainConfig,
          sampling: SamplingConfig, geometry: ProjectionGeometry, log_path=None,
          checkpoint_dir=None, callback=None) -> list[tuple[int, float, float, float]]:
    """Joint triplet + orientation training with ADAM and two-stage negative mining.

    Every sample in a batch is projected after a fresh uniform random yaw
    rotation; the orientation target accounts for both rotations. Returns the
    per-step trace ``(step, L_pr, L_theta, L)``.
    """
    if any(r.cloud is None for r in records):
        raise ValueError("training records must carry point clouds")
    by_id = {r.id: r for r in records}
    opt = ad.Adam(net.params, lr=config.learning_rate)
    rng = np.random.default_rng([config.seed, 7919])
    trace = []
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    last_good = None
    step = 0
    try:
        for epoch in range(config.epochs):
            stage = 1 if epoch < config.switch_epoch else 2
            triplets = sample_triplets(records, sampling, stage,
                                       config.steps_per_epoch * config.batch_size,
                                       rng_seed=config.seed * 100003 + epoch)
            for b0 in range(0, len(triplets), config.batch_size):
                batch = triplets[b0:b0 + config.batch_size]
                rot = rng.uniform(-math.pi, math.pi, size=(len(batch), 3))
                imgs = [[geometry.project(rotate_yaw(by_id[i].cloud, rot[k, j])).data
                         for k, i in enumerate(ids)]
                        for j, ids in enumerate(zip(*[(t.anchor, t.similar, t.dissimilar)
                                                      for t in batch]))]
                target = np.array([augmented_yaw_target(t.delta_theta_gt, rot[k, 0], rot[k, 1])
                                   for k, t in enumerate(batch)])
                net.zero_grad()
                l_pr, l_th = net.joint_loss(np.stack(imgs[0]), np.stack(imgs[1]),
                                            np.stack(imgs[2]), target, config.margin,
                                            config.literal_triplet)
                total = l_pr + l_th
                if not math.isfinite(total):
                    raise TrainingDiverged(f"non-finite loss at step {step}", last_good)
                opt.step()
                trace.append((step, l_pr, l_th, total))
                if log_file:
                    log_file.write(f"{step} {l_pr!r} {l_th!r} {total!r}\n")
                step += 1
            if callback is not None:
                callback(epoch, trace)
            log.info("epoch %d stage %d mean loss %.4f", epoch, stage,
                     np.mean([t[3] for t in trace[-config.steps_per_epoch:]]))
            if ckpt_dir is not None:
                ckpt_dir.mkdir(parents=True, exist_ok=True)
                last_good = ckpt_dir / f"epoch_{epoch:03d}.ckpt"
                net.save(last_good, {"epoch": epoch, "step": step})
    except FloatingPointError as exc:
        raise TrainingDiverged(str(exc), last_good) from exc
    finally:
        if log_file:
            log_file.close()
    return trace
