"""Declarative network stacks and their forward pass.

Every network is a flat list of :class:`LayerSpec` records interpreted by
:func:`forward` against a :class:`ParameterSet` of named tensors. PyTorch
supplies the reverse-mode differentiation; nothing here subclasses
``nn.Module`` so parameter sets stay plain, copyable dictionaries.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
import torch
import torch.nn.functional as F

REGRESSOR = "regressor"
GENERATOR_S2T = "generator_s2t"
GENERATOR_T2S = "generator_t2s"
DISCRIMINATOR_S2T = "discriminator_s2t"
DISCRIMINATOR_T2S = "discriminator_t2s"
DISCRIMINATOR_SHARED = "discriminator_shared"

ROLES = (
    REGRESSOR,
    GENERATOR_S2T,
    GENERATOR_T2S,
    DISCRIMINATOR_S2T,
    DISCRIMINATOR_T2S,
    DISCRIMINATOR_SHARED,
)
GENERATOR_ROLES = (GENERATOR_S2T, GENERATOR_T2S)
DISCRIMINATOR_ROLES = (DISCRIMINATOR_S2T, DISCRIMINATOR_T2S, DISCRIMINATOR_SHARED)

LAYER_KINDS = ("conv", "deconv", "maxpool", "unpool", "fully_connected", "batch_norm", "activation")
ACTIVATIONS = ("relu", "leaky_relu", "none")

DEFAULT_LEAKY_SLOPE = 0.2
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class ShapeError(ValueError):
    """Input does not fit the layer it reaches."""


@dataclass(frozen=True)
class TensorShape:
    batch: int
    channels: int
    height: int
    width: int

    def __post_init__(self):
        for name in ("batch", "channels", "height", "width"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"TensorShape.{name} must be >= 1, got {getattr(self, name)}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.batch, self.channels, self.height, self.width)


CANONICAL_SHAPE = TensorShape(1, 3, 80, 160)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    block: int
    channels_out: Optional[int] = None
    window: Optional[int] = None
    stride: int = 1
    activation_kind: str = "none"
    leaky_slope: float = 0.0
    pair: Optional[str] = None  # unpool only: name of the pooling layer whose indices it reuses

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.window is not None and self.window not in (2, 3, 5):
            raise ValueError(f"{self.name}: window must be 2, 3 or 5")
        if self.stride not in (1, 2):
            raise ValueError(f"{self.name}: stride must be 1 or 2")
        if self.activation_kind not in ACTIVATIONS:
            raise ValueError(f"{self.name}: unknown activation {self.activation_kind!r}")

    @property
    def learnable(self) -> bool:
        return self.kind in ("conv", "deconv", "fully_connected", "batch_norm")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class NetworkSpec:
    role: str
    layers: tuple[LayerSpec, ...]
    input_shape: TensorShape

    @property
    def blocks(self) -> int:
        return len({layer.block for layer in self.layers})

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def output_shape(self, batch: int = 1) -> tuple[int, ...]:
        return trace_shapes(self, batch)[-1][1]

    def to_dict(self) -> dict:
        return {
            "role": self.role,
            "input_shape": list(self.input_shape.as_tuple()),
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            role=d["role"],
            layers=tuple(LayerSpec(**layer) for layer in d["layers"]),
            input_shape=TensorShape(*d["input_shape"]),
        )


def _conv_block(block, kind, channels, window, act, slope, with_bn=True):
    layers = [LayerSpec(kind, f"b{block}_{kind}", block, channels_out=channels, window=window)]
    if with_bn:
        layers.append(LayerSpec("batch_norm", f"b{block}_bn", block))
    if act != "none":
        layers.append(LayerSpec("activation", f"b{block}_act", block, activation_kind=act, leaky_slope=slope))
    return layers


def _encoder(act, slope):
    layers = []
    for block, (channels, window, stride) in enumerate(((24, 5, 2), (48, 5, 2), (64, 3, 1)), start=1):
        layers += _conv_block(block, "conv", channels, window, act, slope)
        layers.append(LayerSpec("maxpool", f"b{block}_pool", block, window=2, stride=stride))
    return layers


def build_network(
    role: str,
    input_shape: TensorShape | tuple = CANONICAL_SHAPE,
    activation: Optional[str] = None,
    leaky_slope: float = DEFAULT_LEAKY_SLOPE,
) -> NetworkSpec:
    """Return the layer stack for ``role``.

    The regressor defaults to plain ReLU, the adversarial networks to leaky
    ReLU; pass ``activation`` to override (e.g. to rerun the ReLU-vs-leaky
    comparison).
    """
    if role not in ROLES:
        raise ValueError(f"unknown network role {role!r}; expected one of {', '.join(ROLES)}")
    if not isinstance(input_shape, TensorShape):
        input_shape = TensorShape(*input_shape)
    if activation is None:
        activation = "relu" if role == REGRESSOR else "leaky_relu"
    slope = leaky_slope if activation == "leaky_relu" else 0.0

    layers = _encoder(activation, slope)
    if role == REGRESSOR:
        layers.append(LayerSpec("fully_connected", "b4_fc", 4, channels_out=1))
    elif role in DISCRIMINATOR_ROLES:
        layers.append(LayerSpec("fully_connected", "b4_fc", 4, channels_out=100))
        layers.append(LayerSpec("activation", "b4_act", 4, activation_kind=activation, leaky_slope=slope))
        layers.append(LayerSpec("fully_connected", "b5_fc", 5, channels_out=2))
    else:
        decoder = ((4, 48, 3, 1, "b3_pool"), (5, 24, 5, 2, "b2_pool"), (6, 3, 3, 2, "b1_pool"))
        for block, channels, window, stride, pair in decoder:
            layers.append(LayerSpec("unpool", f"b{block}_unpool", block, window=2, stride=stride, pair=pair))
            last = block == 6
            # final deconv stays linear so outputs live in normalized-image space
            layers += _conv_block(
                block, "deconv", channels, window,
                "none" if last else activation, slope, with_bn=not last,
            )
    spec = NetworkSpec(role=role, layers=tuple(layers), input_shape=input_shape)
    trace_shapes(spec, 1)  # fail early on inputs too small for the stack
    return spec


def _pool_padding(size: int, stride: int) -> int:
    out = -(-size // stride)
    return max((out - 1) * stride + 2 - size, 0)


def trace_shapes(spec: NetworkSpec, batch: int) -> list[tuple[str, tuple[int, ...]]]:
    """Static shape trace: ``[(layer name, output shape), ...]``."""
    shape: tuple[int, ...] = (batch, spec.input_shape.channels, spec.input_shape.height, spec.input_shape.width)
    pooled: dict[str, tuple[int, ...]] = {}
    trace = [("input", shape)]
    for layer in spec.layers:
        if layer.kind in ("conv", "deconv"):
            shape = (batch, layer.channels_out, shape[2], shape[3])
        elif layer.kind == "maxpool":
            pooled[layer.name] = shape
            h, w = shape[2], shape[3]
            shape = (batch, shape[1], -(-h // layer.stride), -(-w // layer.stride))
        elif layer.kind == "unpool":
            if layer.pair in pooled:
                shape = (batch, shape[1], pooled[layer.pair][2], pooled[layer.pair][3])
            else:
                shape = (batch, shape[1], shape[2] * layer.stride, shape[3] * layer.stride)
        elif layer.kind == "fully_connected":
            shape = (batch, layer.channels_out)
        trace.append((layer.name, shape))
    return trace


@dataclass
class ParameterSet:
    """Named parameter and buffer tensors for one network."""

    entries: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.entries.values())).dtype

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.entries[name]

    def trainable_names(self) -> list[str]:
        return [n for n in self.entries if not n.endswith((".running_mean", ".running_var"))]

    def trainable(self) -> list[torch.Tensor]:
        return [self.entries[n] for n in self.trainable_names()]

    def clone(self) -> "ParameterSet":
        out = {}
        for name, t in self.entries.items():
            c = t.detach().clone()
            if t.requires_grad:
                c.requires_grad_(True)
            out[name] = c
        return ParameterSet(out)

    def to(self, dtype: torch.dtype) -> "ParameterSet":
        trainable = set(self.trainable_names())
        return ParameterSet({
            n: t.detach().to(dtype).requires_grad_(n in trainable) for n, t in self.entries.items()
        })

    def numpy(self) -> dict[str, np.ndarray]:
        return {n: t.detach().cpu().numpy() for n, t in self.entries.items()}

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.entries):
            h.update(name.encode())
            h.update(self.entries[name].detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.grad = None


def _xavier(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_parameters(spec: NetworkSpec, seed: int, dtype: torch.dtype = torch.float32) -> ParameterSet:
    """Glorot-uniform weights, zero biases, unit/zero batch-norm affine."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    trace = dict(trace_shapes(spec, 1))
    prev = "input"
    for layer in spec.layers:
        in_shape = trace[prev]
        if layer.kind in ("conv", "deconv"):
            c_in, c_out, k = in_shape[1], layer.channels_out, layer.window
            shape = (c_out, c_in, k, k) if layer.kind == "conv" else (c_in, c_out, k, k)
            arrays[f"{layer.name}.weight"] = _xavier(rng, shape, c_in * k * k, c_out * k * k)
            arrays[f"{layer.name}.bias"] = np.zeros(c_out)
        elif layer.kind == "fully_connected":
            fan_in = int(np.prod(in_shape[1:]))
            arrays[f"{layer.name}.weight"] = _xavier(rng, (layer.channels_out, fan_in), fan_in, layer.channels_out)
            arrays[f"{layer.name}.bias"] = np.zeros(layer.channels_out)
        elif layer.kind == "batch_norm":
            c = in_shape[1]
            arrays[f"{layer.name}.scale"] = np.ones(c)
            arrays[f"{layer.name}.shift"] = np.zeros(c)
            arrays[f"{layer.name}.running_mean"] = np.zeros(c)
            arrays[f"{layer.name}.running_var"] = np.ones(c)
        prev = layer.name
    params = ParameterSet({n: torch.from_numpy(a).to(dtype) for n, a in arrays.items()})
    for name in params.trainable_names():
        params.entries[name].requires_grad_(True)
    return params


def _max_pool(h: torch.Tensor, layer: LayerSpec):
    size = (h.shape[2], h.shape[3])
    ph, pw = _pool_padding(size[0], layer.stride), _pool_padding(size[1], layer.stride)
    if ph or pw:
        h = F.pad(h, (0, pw, 0, ph), value=float("-inf"))
    padded = (h.shape[2], h.shape[3])
    out, idx = F.max_pool2d(h, layer.window, layer.stride, return_indices=True)
    return out, (idx, padded, size)


def _max_unpool(h: torch.Tensor, layer: LayerSpec, record) -> torch.Tensor:
    if record is None:
        # no recorded indices: nearest-neighbour upsampling
        return F.interpolate(h, scale_factor=layer.stride, mode="nearest")
    idx, padded, size = record
    if idx.shape != h.shape:
        raise ShapeError(f"layer {layer.name}: input {tuple(h.shape)} does not match pooled indices {tuple(idx.shape)}")
    n, c = h.shape[:2]
    # scatter-add is the exact adjoint of the pooling selection, so overlapping
    # stride-1 windows that picked the same pixel accumulate instead of racing
    out = h.new_zeros(n, c, padded[0] * padded[1])
    out = out.scatter_add(2, idx.flatten(2), h.flatten(2))
    return out.view(n, c, padded[0], padded[1])[:, :, : size[0], : size[1]]


def forward(
    spec: NetworkSpec,
    params: ParameterSet,
    x: torch.Tensor,
    mode: str = "train",
    track_stats: bool = True,
) -> torch.Tensor:
    """Run ``spec`` on a ``(B, C, H, W)`` batch.

    ``train`` mode uses batch statistics and keeps the autograd graph; with
    ``track_stats`` it also updates batch-norm running statistics in place.
    ``eval`` mode uses running statistics under ``no_grad``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    expected = spec.input_shape.as_tuple()[1:]
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise ShapeError(
            f"layer {spec.layers[0].name}: {spec.role} expects (B, {', '.join(map(str, expected))}), "
            f"got {tuple(x.shape)}"
        )
    if x.dtype != params.dtype:
        x = x.to(params.dtype)
    if mode == "eval":
        with torch.no_grad():
            return _run(spec, params, x, training=False, track_stats=False)
    return _run(spec, params, x, training=True, track_stats=track_stats)


def _run(spec, params, h, training, track_stats):
    pools: dict[str, tuple] = {}
    p = params.entries
    for layer in spec.layers:
        name = layer.name
        if layer.kind in ("conv", "deconv"):
            w = p[f"{name}.weight"]
            c_in = w.shape[1] if layer.kind == "conv" else w.shape[0]
            if h.ndim != 4 or h.shape[1] != c_in:
                raise ShapeError(f"layer {name}: expected {c_in} input channels, got shape {tuple(h.shape)}")
            op = F.conv2d if layer.kind == "conv" else F.conv_transpose2d
            h = op(h, w, p[f"{name}.bias"], padding=layer.window // 2)
        elif layer.kind == "batch_norm":
            if training and not track_stats:
                h = F.batch_norm(h, None, None, p[f"{name}.scale"], p[f"{name}.shift"], True, 0.0, BN_EPS)
            else:
                h = F.batch_norm(
                    h, p[f"{name}.running_mean"], p[f"{name}.running_var"],
                    p[f"{name}.scale"], p[f"{name}.shift"], training, BN_MOMENTUM, BN_EPS,
                )
        elif layer.kind == "activation":
            if layer.activation_kind == "relu":
                h = F.relu(h)
            elif layer.activation_kind == "leaky_relu":
                h = F.leaky_relu(h, layer.leaky_slope)
        elif layer.kind == "maxpool":
            h, pools[name] = _max_pool(h, layer)
        elif layer.kind == "unpool":
            h = _max_unpool(h, layer, pools.get(layer.pair))
        elif layer.kind == "fully_connected":
            w = p[f"{name}.weight"]
            h = h.flatten(1)
            if h.shape[1] != w.shape[1]:
                raise ShapeError(f"layer {name}: expected {w.shape[1]} input features, got {h.shape[1]}")
            h = F.linear(h, w, p[f"{name}.bias"])
    return h


def build_and_init(role: str, seed: int, input_shape=CANONICAL_SHAPE, dtype=torch.float32, **kwargs):
    spec = build_network(role, input_shape, **kwargs)
    return spec, init_parameters(spec, seed, dtype)


def count_parameters(params: ParameterSet, names: Optional[Iterable[str]] = None) -> int:
    names = params.trainable_names() if names is None else names
    return sum(params.entries[n].numel() for n in names)
