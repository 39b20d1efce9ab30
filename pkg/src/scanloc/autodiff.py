"""Small dense-tensor engine: sequential layers with reverse-mode gradients and ADAM.

Activations flow as ``float64`` arrays in NCHW layout (NC for dense layers).
Each layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into :class:`Tensor.grad` during ``backward``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import BinaryIO

import numpy as np


class Tensor:
    """A parameter: value array plus a gradient buffer of identical shape."""

    def __init__(self, value, name: str = ""):
        value = np.array(value, dtype=np.float64)
        if value.size == 0 or any(s < 1 for s in value.shape):
            raise ValueError(f"tensor extents must be positive, got {value.shape}")
        self.value = value
        self.grad = np.zeros_like(value)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor({self.name!r}, shape={self.shape})"


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer.

    ``kind`` is one of conv2d, maxpool2d, fully_connected, prelu, flatten.
    """

    kind: str
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    out_channels: int = 0
    units: int = 0
    pool: tuple[int, int] = (2, 2)

    def __post_init__(self):
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        object.__setattr__(self, "pool", tuple(int(k) for k in self.pool))
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            if min(self.kernel) < 1 or self.stride < 1 or self.out_channels < 1:
                raise ValueError(f"invalid conv2d spec {self}")
        if self.kind == "maxpool2d" and min(self.pool) < 1:
            raise ValueError(f"invalid maxpool2d spec {self}")
        if self.kind == "fully_connected" and self.units < 1:
            raise ValueError(f"invalid fully_connected spec {self}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel"] = list(self.kernel)
        d["pool"] = list(self.pool)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> LayerSpec:
        return cls(**d)


def conv(out_channels: int, kernel=(3, 3), stride: int = 1) -> LayerSpec:
    return LayerSpec("conv2d", kernel=kernel, stride=stride, out_channels=out_channels)


def maxpool(pool=(2, 2)) -> LayerSpec:
    return LayerSpec("maxpool2d", pool=pool)


def dense(units: int) -> LayerSpec:
    return LayerSpec("fully_connected", units=units)


def prelu() -> LayerSpec:
    return LayerSpec("prelu")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


class Layer:
    spec: LayerSpec
    params: list[Tensor] = []

    def __init__(self, spec: LayerSpec, input_shape: tuple[int, ...]):
        self.spec = spec
        self.input_shape = tuple(input_shape)
        self.params = []
        self._cache = None

    def _check_input(self, x: np.ndarray):
        if x.shape[1:] != self.input_shape:
            raise ValueError(
                f"{self.spec.kind}: expected input shape (N, {', '.join(map(str, self.input_shape))})"
                f", got {x.shape}"
            )

    def _pop_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{self.spec.kind}: backward called before forward")
        cache, self._cache = self._cache, None
        return cache


class Conv2d(Layer):
    """Cross-correlation; zero padding along rows (zenith), circular along columns (azimuth)."""

    def __init__(self, spec, input_shape, rng):
        super().__init__(spec, input_shape)
        c, h, w = input_shape
        kh, kw = spec.kernel
        s = spec.stride
        self.pad = (kh // 2, kw // 2)
        self.output_shape = (spec.out_channels, (h + 2 * self.pad[0] - kh) // s + 1,
                             (w + 2 * self.pad[1] - kw) // s + 1)
        fan_in = c * kh * kw
        std = math.sqrt(2.0 / fan_in)
        self.weight = Tensor(rng.normal(0.0, std, size=(spec.out_channels, c, kh, kw)), "weight")
        self.bias = Tensor(np.zeros(spec.out_channels), "bias")
        self.params = [self.weight, self.bias]

    def _pad(self, x):
        ph, pw = self.pad
        if pw:
            x = np.concatenate([x[..., -pw:], x, x[..., :pw]], axis=3)
        if ph:
            x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (0, 0)))
        return x

    def forward(self, x):
        self._check_input(x)
        n = x.shape[0]
        kh, kw = self.spec.kernel
        s = self.spec.stride
        o, ho, wo = self.output_shape
        xp = self._pad(x)
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, ::s, ::s][:, :, :ho, :wo]
        # (N, Ho, Wo, C, kh, kw) -> rows of receptive fields
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
        wmat = self.weight.value.reshape(o, -1)
        out = cols @ wmat.T + self.bias.value
        self._cache = (cols, xp.shape)
        return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(self, grad):
        cols, xp_shape = self._pop_cache()
        n = grad.shape[0]
        o, ho, wo = self.output_shape
        c = self.input_shape[0]
        kh, kw = self.spec.kernel
        s = self.spec.stride
        g = grad.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        self.weight.grad += (g.T @ cols).reshape(self.weight.shape)
        self.bias.grad += g.sum(axis=0)
        dcols = (g @ self.weight.value.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros(xp_shape)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        ph, pw = self.pad
        h, w = self.input_shape[1:]
        dx = dxp[:, :, ph:ph + h, :]
        if pw:
            core = dx[..., pw:pw + w].copy()
            core[..., w - pw:] += dx[..., :pw]
            core[..., :pw] += dx[..., pw + w:]
            return core
        return dx.copy()


class MaxPool2d(Layer):
    """Non-overlapping max pooling (stride = window); trailing remainder dropped."""

    def __init__(self, spec, input_shape, rng=None):
        super().__init__(spec, input_shape)
        c, h, w = input_shape
        ph, pw = spec.pool
        if h < ph or w < pw:
            raise ValueError(f"maxpool2d window {spec.pool} larger than input {input_shape}")
        self.output_shape = (c, h // ph, w // pw)

    def forward(self, x):
        self._check_input(x)
        n = x.shape[0]
        c, ho, wo = self.output_shape
        ph, pw = self.spec.pool
        xr = x[:, :, :ho * ph, :wo * pw].reshape(n, c, ho, ph, wo, pw)
        xr = xr.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, ph * pw)
        idx = np.argmax(xr, axis=-1)[..., None]
        self._cache = idx
        return np.take_along_axis(xr, idx, axis=-1)[..., 0]

    def backward(self, grad):
        idx = self._pop_cache()
        n = grad.shape[0]
        c, ho, wo = self.output_shape
        ph, pw = self.spec.pool
        g = np.zeros((n, c, ho, wo, ph * pw))
        np.put_along_axis(g, idx, grad[..., None], axis=-1)
        g = g.reshape(n, c, ho, wo, ph, pw).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros((n,) + self.input_shape)
        dx[:, :, :ho * ph, :wo * pw] = g.reshape(n, c, ho * ph, wo * pw)
        return dx


class Dense(Layer):
    def __init__(self, spec, input_shape, rng):
        super().__init__(spec, input_shape)
        if len(input_shape) != 1:
            raise ValueError(f"fully_connected expects flat input, got shape {input_shape}")
        d = input_shape[0]
        self.output_shape = (spec.units,)
        self.weight = Tensor(rng.normal(0.0, math.sqrt(2.0 / d), size=(spec.units, d)), "weight")
        self.bias = Tensor(np.zeros(spec.units), "bias")
        self.params = [self.weight, self.bias]

    def forward(self, x):
        self._check_input(x)
        self._cache = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, grad):
        x = self._pop_cache()
        self.weight.grad += grad.T @ x
        self.bias.grad += grad.sum(axis=0)
        return grad @ self.weight.value


class PReLU(Layer):
    """x if x > 0 else a*x, one learned slope per channel (axis 1), initialised to 0.25."""

    def __init__(self, spec, input_shape, rng=None):
        super().__init__(spec, input_shape)
        self.output_shape = tuple(input_shape)
        self.slope = Tensor(np.full(input_shape[0], 0.25), "slope")
        self.params = [self.slope]

    def _bcast(self, a):
        return a.reshape((1, -1) + (1,) * (len(self.input_shape) - 1))

    def forward(self, x):
        self._check_input(x)
        self._cache = x
        return np.where(x > 0, x, self._bcast(self.slope.value) * x)

    def backward(self, grad):
        x = self._pop_cache()
        pos = x > 0
        axes = (0,) + tuple(range(2, x.ndim))
        self.slope.grad += np.where(pos, 0.0, grad * x).sum(axis=axes)
        return np.where(pos, grad, self._bcast(self.slope.value) * grad)


class Flatten(Layer):
    def __init__(self, spec, input_shape, rng=None):
        super().__init__(spec, input_shape)
        self.output_shape = (int(np.prod(input_shape)),)

    def forward(self, x):
        self._check_input(x)
        self._cache = True
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        self._pop_cache()
        return grad.reshape((grad.shape[0],) + self.input_shape)


LAYER_KINDS = {
    "conv2d": Conv2d,
    "maxpool2d": MaxPool2d,
    "fully_connected": Dense,
    "prelu": PReLU,
    "flatten": Flatten,
}


class Sequential:
    """A chain of layers built from specs for a fixed per-sample input shape."""

    def __init__(self, specs, input_shape, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.specs = list(specs)
        self.input_shape = tuple(input_shape)
        self.layers: list[Layer] = []
        shape = self.input_shape
        for spec in self.specs:
            layer = LAYER_KINDS[spec.kind](spec, shape, rng)
            self.layers.append(layer)
            shape = layer.output_shape
        self.output_shape = shape

    @property
    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self.params)


class Adam:
    """ADAM with bias-corrected moments; eps is added outside the square root."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in {p.name or 'parameter'}")
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.value -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def numerical_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - b| / max(|a|, |b|, floor), elementwise maximum."""
    a = np.asarray(a)
    b = np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


# -- checkpoint serialization ------------------------------------------------

MAGIC = b"SLNN"
VERSION = 1


def _write_str(f: BinaryIO, s: str):
    b = s.encode("utf-8")
    f.write(struct.pack("<I", len(b)))
    f.write(b)


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise ValueError(f"truncated checkpoint: wanted {n} bytes, got {len(b)}")
    return b


def _read_str(f: BinaryIO) -> str:
    (n,) = struct.unpack("<I", _read_exact(f, 4))
    return _read_exact(f, n).decode("utf-8")


def write_checkpoint(f: BinaryIO, networks: dict[str, Sequential], metadata: dict | None = None):
    """Serialize named networks; layout documented in docs/file_formats.md."""
    f.write(MAGIC)
    f.write(struct.pack("<I", VERSION))
    _write_str(f, json.dumps(metadata or {}, sort_keys=True))
    f.write(struct.pack("<I", len(networks)))
    for name, net in networks.items():
        _write_str(f, name)
        f.write(struct.pack("<I", len(net.input_shape)))
        f.write(struct.pack(f"<{len(net.input_shape)}I", *net.input_shape))
        f.write(struct.pack("<I", len(net.specs)))
        for spec in net.specs:
            _write_str(f, json.dumps(spec.to_dict(), sort_keys=True))
    for net in networks.values():
        for p in net.params:
            f.write(struct.pack("<I", p.value.ndim))
            f.write(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
            f.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def read_checkpoint(f: BinaryIO) -> tuple[dict[str, Sequential], dict]:
    if _read_exact(f, 4) != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", _read_exact(f, 4))
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    metadata = json.loads(_read_str(f))
    (n_nets,) = struct.unpack("<I", _read_exact(f, 4))
    networks = {}
    for _ in range(n_nets):
        name = _read_str(f)
        (nd,) = struct.unpack("<I", _read_exact(f, 4))
        shape = struct.unpack(f"<{nd}I", _read_exact(f, 4 * nd))
        (nl,) = struct.unpack("<I", _read_exact(f, 4))
        specs = [LayerSpec.from_dict(json.loads(_read_str(f))) for _ in range(nl)]
        networks[name] = Sequential(specs, shape)
    for name, net in networks.items():
        for p in net.params:
            (nd,) = struct.unpack("<I", _read_exact(f, 4))
            shape = struct.unpack(f"<{nd}I", _read_exact(f, 4 * nd))
            if tuple(shape) != p.shape:
                raise ValueError(f"{name}: parameter shape {shape} does not match {p.shape}")
            count = int(np.prod(shape))
            p.value = np.frombuffer(_read_exact(f, 8 * count), dtype="<f8").astype(
                np.float64).reshape(shape)
            p.grad = np.zeros_like(p.value)
    return networks, metadata
