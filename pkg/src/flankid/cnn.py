"""Minimal forward-pass engine for AlexNet-style convolutional feature taps.

Tensors are float64 arrays laid out ``(channels, height, width)``. Feature
vectors are flattened in that same (channel, row, column) order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .imaging import ImageBuffer
from .tensorio import load_tensors, save_tensors

CONV, RELU, LRN, MAXPOOL = "conv", "relu", "lrn", "maxpool"


class ShapeError(ValueError):
    pass


class WeightError(KeyError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    out_channels: int = 0
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0
    groups: int = 1
    local_size: int = 5
    alpha: float = 1e-4
    beta: float = 0.75
    k: float = 1.0
    rounding: str = "ceil"

    def __post_init__(self):
        if self.kind not in (CONV, RELU, LRN, MAXPOOL):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if isinstance(self.kernel, int):
            object.__setattr__(self, "kernel", (self.kernel, self.kernel))
        else:
            object.__setattr__(self, "kernel", tuple(self.kernel))
        if self.kind == CONV and (self.out_channels < 1 or self.out_channels % self.groups):
            raise ValueError(f"{self.name}: out_channels must be a positive multiple of groups")
        if self.kind == MAXPOOL and self.rounding not in ("ceil", "floor"):
            raise ValueError(f"{self.name}: rounding must be 'ceil' or 'floor'")
        if self.kind == LRN and self.local_size % 2 == 0:
            raise ValueError(f"{self.name}: LRN local_size must be odd")


@dataclass(frozen=True)
class ConvNetSpec:
    name: str
    input: tuple[int, int, int]  # (height, width, channels)
    mean: tuple[float, ...]
    layers: tuple[LayerSpec, ...]
    tap_point: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input", tuple(int(v) for v in self.input))
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        if not 0 <= self.tap_point < len(self.layers):
            raise ValueError(f"tap_point {self.tap_point} outside 0..{len(self.layers) - 1}")
        if len(self.mean) != self.input[2]:
            raise ValueError("need one mean value per input channel")

    def with_input(self, height: int, width: int) -> "ConvNetSpec":
        return replace(self, input=(height, width, self.input[2]))


@dataclass
class FeatureVector:
    values: np.ndarray
    shape: tuple[int, int, int]  # (channels, height, width) at the tap
    provenance: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return int(self.values.size)


WeightStore = dict  # name -> ndarray, e.g. "conv1.weight", "conv1.bias"


# ---------------------------------------------------------------------------
# shape arithmetic


def _pool_extent(n: int, kernel: int, stride: int, rounding: str) -> int:
    span = (n - kernel) / stride
    out = (math.ceil(span) if rounding == "ceil" else math.floor(span)) + 1
    if rounding == "ceil" and (out - 1) * stride >= n:
        out -= 1  # last window would start past the input
    return out


def layer_output_shape(layer: LayerSpec, shape: tuple[int, int, int]) -> tuple[int, int, int]:
    """``(c, h, w)`` after ``layer``; raises :class:`ShapeError` below 1."""
    c, h, w = shape
    kh, kw = layer.kernel
    if layer.kind == CONV:
        if c % layer.groups:
            raise ShapeError(f"{layer.name}: {c} input channels not divisible by {layer.groups} groups")
        h = (h + 2 * layer.padding - kh) // layer.stride + 1
        w = (w + 2 * layer.padding - kw) // layer.stride + 1
        c = layer.out_channels
    elif layer.kind == MAXPOOL:
        if h < kh or w < kw:
            raise ShapeError(f"{layer.name}: {h}x{w} input smaller than {kh}x{kw} pool")
        h = _pool_extent(h, kh, layer.stride, layer.rounding)
        w = _pool_extent(w, kw, layer.stride, layer.rounding)
    if h < 1 or w < 1:
        raise ShapeError(f"{layer.name}: spatial size collapsed to {h}x{w}")
    return c, h, w


def output_shape(spec: ConvNetSpec) -> tuple[int, int, int]:
    """``(height, width, channels)`` of the tap layer's output."""
    h, w, c = spec.input
    shape = (c, h, w)
    for layer in spec.layers[:spec.tap_point + 1]:
        shape = layer_output_shape(layer, shape)
    return shape[1], shape[2], shape[0]


def feature_dim(spec: ConvNetSpec) -> int:
    h, w, c = output_shape(spec)
    return h * w * c


# ---------------------------------------------------------------------------
# layers


def conv2d(x: np.ndarray, layer: LayerSpec, weights: WeightStore) -> np.ndarray:
    c, h, w = x.shape
    try:
        kernel = np.asarray(weights[f"{layer.name}.weight"], dtype=np.float64)
        bias = np.asarray(weights[f"{layer.name}.bias"], dtype=np.float64)
    except KeyError as exc:
        raise WeightError(f"missing weights for layer {layer.name!r}: {exc}") from None
    g = layer.groups
    kh, kw = layer.kernel
    expected = (layer.out_channels, c // g, kh, kw)
    if c % g or kernel.shape != expected or bias.shape != (layer.out_channels,):
        raise ShapeError(f"{layer.name}: weight {kernel.shape}/bias {bias.shape}, expected {expected}/({layer.out_channels},)")
    _, ho, wo = layer_output_shape(layer, (c, h, w))
    p, s = layer.padding, layer.stride
    padded = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
    win = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
    cg, og = c // g, layer.out_channels // g
    out = np.empty((layer.out_channels, ho, wo))
    for gi in range(g):
        cols = win[gi * cg:(gi + 1) * cg].transpose(1, 2, 0, 3, 4).reshape(ho * wo, cg * kh * kw)
        wmat = kernel[gi * og:(gi + 1) * og].reshape(og, cg * kh * kw)
        out[gi * og:(gi + 1) * og] = (cols @ wmat.T).T.reshape(og, ho, wo)
    return out + bias[:, None, None]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def lrn(x: np.ndarray, layer: LayerSpec) -> np.ndarray:
    """Across-channel LRN: ``x / (k + alpha/n * sum_window x^2) ** beta``."""
    n = layer.local_size
    if n % 2 == 0:
        raise ValueError("LRN local_size must be odd")
    half = n // 2
    sq = np.pad(x * x, ((half, half), (0, 0), (0, 0)))
    csum = np.concatenate([np.zeros((1,) + x.shape[1:]), np.cumsum(sq, axis=0)])
    window = csum[n:] - csum[:-n]
    return x / (layer.k + (layer.alpha / n) * window) ** layer.beta


def maxpool(x: np.ndarray, layer: LayerSpec) -> np.ndarray:
    c, h, w = x.shape
    kh, kw = layer.kernel
    s = layer.stride
    _, ho, wo = layer_output_shape(layer, x.shape)
    # pad with -inf so ceil-mode windows are clipped to the input
    ph = max((ho - 1) * s + kh - h, 0)
    pw = max((wo - 1) * s + kw - w, 0)
    padded = np.pad(x, ((0, 0), (0, ph), (0, pw)), constant_values=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
    return win.max(axis=(3, 4))


def apply_layer(x: np.ndarray, layer: LayerSpec, weights: WeightStore) -> np.ndarray:
    if layer.kind == CONV:
        return conv2d(x, layer, weights)
    if layer.kind == RELU:
        return relu(x)
    if layer.kind == LRN:
        return lrn(x, layer)
    return maxpool(x, layer)


def forward(x: np.ndarray, spec: ConvNetSpec, weights: WeightStore) -> np.ndarray:
    for layer in spec.layers[:spec.tap_point + 1]:
        x = apply_layer(x, layer, weights)
    return x


def preprocess(img: ImageBuffer, spec: ConvNetSpec) -> np.ndarray:
    h, w, c = spec.input
    if (img.height, img.width, img.channels) != (h, w, c):
        raise ShapeError(f"image is {img.width}x{img.height}x{img.channels}, net expects {w}x{h}x{c}")
    x = img.pixels.astype(np.float64) - np.asarray(spec.mean)
    return x.transpose(2, 0, 1)


def extract_features(img: ImageBuffer, spec: ConvNetSpec, weights: WeightStore) -> FeatureVector:
    out = forward(preprocess(img, spec), spec, weights)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite activations at the tap layer")
    return FeatureVector(
        values=out.reshape(-1),
        shape=out.shape,
        provenance={"net": spec.name, "tap": spec.layers[spec.tap_point].name or spec.tap_point,
                    "input": spec.input},
    )


# ---------------------------------------------------------------------------
# specs and weights


def alexnet_conv3(height: int = 227, width: int = 227, mean=(123.68, 116.78, 103.94)) -> ConvNetSpec:
    """The AlexNet stack up to conv3 (the ReLU after conv3 is the tap)."""
    layers = (
        LayerSpec(CONV, "conv1", out_channels=96, kernel=11, stride=4),
        LayerSpec(RELU, "relu1"),
        LayerSpec(LRN, "norm1", local_size=5, alpha=1e-4, beta=0.75, k=1.0),
        LayerSpec(MAXPOOL, "pool1", kernel=3, stride=2, rounding="ceil"),
        LayerSpec(CONV, "conv2", out_channels=256, kernel=5, padding=2, groups=2),
        LayerSpec(RELU, "relu2"),
        LayerSpec(LRN, "norm2", local_size=5, alpha=1e-4, beta=0.75, k=1.0),
        LayerSpec(MAXPOOL, "pool2", kernel=3, stride=2, rounding="ceil"),
        LayerSpec(CONV, "conv3", out_channels=384, kernel=3, padding=1),
        LayerSpec(RELU, "relu3"),
    )
    return ConvNetSpec("alexnet_conv3", (height, width, 3), mean, layers, tap_point=len(layers) - 1)


def conv_layers_with_inputs(spec: ConvNetSpec):
    """Yield ``(layer, in_channels)`` for each conv layer up to the tap."""
    h, w, c = spec.input
    shape = (c, h, w)
    for layer in spec.layers[:spec.tap_point + 1]:
        if layer.kind == CONV:
            yield layer, shape[0]
        shape = layer_output_shape(layer, shape)


def random_weights(spec: ConvNetSpec, seed: int = 0) -> WeightStore:
    """He-scaled Gaussian weights, zero biases (float32, as stored on disk)."""
    rng = np.random.default_rng(seed)
    store = {}
    for layer, cin in conv_layers_with_inputs(spec):
        kh, kw = layer.kernel
        fan_in = cin // layer.groups * kh * kw
        shape = (layer.out_channels, cin // layer.groups, kh, kw)
        store[f"{layer.name}.weight"] = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)
        store[f"{layer.name}.bias"] = np.zeros(layer.out_channels, dtype=np.float32)
    return store


def check_weights(spec: ConvNetSpec, weights: WeightStore) -> None:
    for layer, cin in conv_layers_with_inputs(spec):
        want = {f"{layer.name}.weight": (layer.out_channels, cin // layer.groups, *layer.kernel),
                f"{layer.name}.bias": (layer.out_channels,)}
        for name, shape in want.items():
            if name not in weights:
                raise WeightError(f"weight store lacks {name!r}")
            if tuple(weights[name].shape) != shape:
                raise ShapeError(f"{name}: stored shape {tuple(weights[name].shape)}, expected {shape}")


def load_weights(path: str | Path) -> WeightStore:
    return load_tensors(path)


def save_weights(weights: WeightStore, path: str | Path) -> None:
    save_tensors(path, weights, dtype="float32")


_LAYER_FIELDS = {"kind", "name", "out_channels", "kernel", "stride", "padding", "groups",
                 "local_size", "alpha", "beta", "k", "rounding"}


def spec_from_dict(d: dict) -> ConvNetSpec:
    layers = []
    for i, raw in enumerate(d["layers"]):
        unknown = set(raw) - _LAYER_FIELDS
        if unknown:
            raise ValueError(f"layer {i}: unknown fields {sorted(unknown)}")
        raw = dict(raw)
        raw.setdefault("name", f"{raw['kind']}{i}")
        layers.append(LayerSpec(**raw))
    tap = d.get("tap", len(layers) - 1)
    if isinstance(tap, str):
        names = [l.name for l in layers]
        if tap not in names:
            raise ValueError(f"tap layer {tap!r} not found")
        tap = names.index(tap)
    inp = d["input"]
    return ConvNetSpec(d.get("name", "net"), (inp["height"], inp["width"], inp.get("channels", 3)),
                       tuple(d.get("mean", [0.0] * inp.get("channels", 3))), tuple(layers), int(tap))


_KIND_FIELDS = {
    CONV: ("out_channels", "kernel", "stride", "padding", "groups"),
    LRN: ("local_size", "alpha", "beta", "k"),
    MAXPOOL: ("kernel", "stride", "rounding"),
    RELU: (),
}


def spec_to_dict(spec: ConvNetSpec) -> dict:
    layers = []
    for layer in spec.layers:
        entry = {"kind": layer.kind, "name": layer.name}
        for f in _KIND_FIELDS[layer.kind]:
            v = getattr(layer, f)
            if f == "kernel":
                v = v[0] if v[0] == v[1] else list(v)
            entry[f] = v
        layers.append(entry)
    h, w, c = spec.input
    tap = spec.layers[spec.tap_point].name or spec.tap_point
    return {"name": spec.name, "input": {"height": h, "width": w, "channels": c},
            "mean": list(spec.mean), "tap": tap, "layers": layers}


def load_spec(path: str | Path) -> ConvNetSpec:
    return spec_from_dict(yaml.safe_load(Path(path).read_text(encoding="utf-8")))


def save_spec(spec: ConvNetSpec, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(spec_to_dict(spec), sort_keys=False), encoding="utf-8")
