"""Stateful layers, the shared parameter registry and C-filter blocks.

Weight tying is realized by name: a block built with a ``tie_key`` that is
already registered picks up the existing Parameter objects (and batch-norm
running statistics) instead of creating new ones. Two stacks built that way
share storage, so they stay identical through any number of updates.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .tensor import Parameter, Tensor, get_dtype

Shape = tuple[int, ...]

BN_MOMENTUM = 0.9
BN_EPS = 1e-5
ALPHA_INIT = 0.25


def default_pad(k: int) -> int:
    return 1 if k == 3 else 0


@dataclass(frozen=True)
class ConvSpec:
    """One C-filter: ``out_channels@kernel_h x kernel_w x in_channels``.

    Padding defaults to 1 on a side whose kernel length is 3 and 0 otherwise.
    """

    out_channels: int
    kernel_h: int
    kernel_w: int
    in_channels: int
    stride: int = 1
    pad_h: int | None = None
    pad_w: int | None = None

    def __post_init__(self):
        for f in ("out_channels", "kernel_h", "kernel_w", "in_channels", "stride"):
            v = getattr(self, f)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"ConvSpec.{f} must be a positive integer, got {v!r}")
        if self.pad_h is None:
            object.__setattr__(self, "pad_h", default_pad(self.kernel_h))
        if self.pad_w is None:
            object.__setattr__(self, "pad_w", default_pad(self.kernel_w))
        if self.pad_h < 0 or self.pad_w < 0:
            raise ConfigError(f"ConvSpec padding must be >= 0, got ({self.pad_h}, {self.pad_w})")

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel_h * self.kernel_w

    def label(self) -> str:
        star = "*" if self.stride == 2 else ""
        return f"{self.out_channels}@{self.kernel_h}x{self.kernel_w}x{self.in_channels} CF{star}"


class ParamRegistry:
    """Name-keyed store of Parameters and non-trainable buffers."""

    def __init__(self):
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.tie_specs: dict[str, object] = {}

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def parameter(self, name: str, shape: Sequence[int], kind: str, fan_in: int = 0) -> Parameter:
        p = self.params.get(name)
        if p is None:
            p = Parameter(name, shape, kind=kind, fan_in=fan_in)
            self.params[name] = p
        elif p.shape != tuple(shape):
            raise ConfigError(f"parameter {name!r} already registered with shape {p.shape}, requested {tuple(shape)}")
        return p

    def buffer(self, name: str, shape: Sequence[int], fill: float) -> np.ndarray:
        buf = self.buffers.get(name)
        if buf is None:
            buf = np.full(tuple(shape), fill, dtype=get_dtype())
            self.buffers[name] = buf
        return buf

    def claim(self, tie_key: str, spec) -> bool:
        """Register ``spec`` under ``tie_key``; True if it was already present."""
        prev = self.tie_specs.get(tie_key)
        if prev is None:
            self.tie_specs[tie_key] = spec
            return False
        if prev != spec:
            raise ConfigError(f"tie key {tie_key!r} reused with a different spec: {prev} vs {spec}")
        return True

    def astype(self, dtype) -> None:
        for p in self.params.values():
            p.astype(dtype)
        # layers look buffers up by key on every call, so replacing is safe
        for k, b in list(self.buffers.items()):
            self.buffers[k] = b.astype(dtype)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


class Layer:
    def forward(self, x: Tensor, training: bool) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return self.forward(x, training)

    def out_shape(self, shape: Shape) -> Shape:
        return shape

    def parameters(self) -> list[Parameter]:
        return []

    def describe(self) -> str:
        return type(self).__name__


class Conv2d(Layer):
    def __init__(self, spec: ConvSpec, registry: ParamRegistry, key: str):
        self.spec = spec
        self.weight = registry.parameter(
            f"{key}.weight", (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w),
            kind="weight", fan_in=spec.fan_in)
        self.bias = registry.parameter(f"{key}.bias", (spec.out_channels,), kind="bias")

    def forward(self, x, training):
        s = self.spec
        return ops.conv2d(x, self.weight, self.bias, s.stride, s.pad_h, s.pad_w)

    def out_shape(self, shape):
        N, C, H, W = shape
        s = self.spec
        if C != s.in_channels:
            raise ShapeError(f"{s.label()} expects {s.in_channels} input channels, got {C}")
        return (N, s.out_channels, ops.output_size(H, s.kernel_h, s.stride, s.pad_h),
                ops.output_size(W, s.kernel_w, s.stride, s.pad_w))

    def parameters(self):
        return [self.weight, self.bias]

    def describe(self):
        return self.spec.label()


class BatchNorm(Layer):
    """Batch norm for [N,C,H,W] or [N,F]; running statistics live in the registry."""

    def __init__(self, channels: int, registry: ParamRegistry, key: str):
        self.channels = channels
        self.gamma = registry.parameter(f"{key}.gamma", (channels,), kind="gamma")
        self.beta = registry.parameter(f"{key}.beta", (channels,), kind="beta")
        self.registry = registry
        self.mean_key = f"{key}.running_mean"
        self.var_key = f"{key}.running_var"
        registry.buffer(self.mean_key, (channels,), 0.0)
        registry.buffer(self.var_key, (channels,), 1.0)

    def forward(self, x, training):
        return ops.batch_norm(x, self.gamma, self.beta, self.registry.buffers[self.mean_key],
                              self.registry.buffers[self.var_key], training, BN_MOMENTUM, BN_EPS)

    def parameters(self):
        return [self.gamma, self.beta]

    def describe(self):
        return f"BN({self.channels})"


class ReLU(Layer):
    def forward(self, x, training):
        return ops.relu(x)


class MaxPool2d(Layer):
    def __init__(self, k: int, stride: int, pad: int):
        self.k, self.stride, self.pad = k, stride, pad

    def forward(self, x, training):
        return ops.max_pool2d(x, self.k, self.stride, self.pad)

    def out_shape(self, shape):
        N, C, H, W = shape
        return (N, C, ops.output_size(H, self.k, self.stride, self.pad),
                ops.output_size(W, self.k, self.stride, self.pad))

    def describe(self):
        star = "*" if self.stride == 2 else ""
        return f"1@{self.k}x{self.k} MF{star}"


class AvgPool2d(MaxPool2d):
    def forward(self, x, training):
        return ops.avg_pool2d(x, self.k, self.stride, self.pad)

    def describe(self):
        star = "*" if self.stride == 2 else ""
        return f"1@{self.k}x{self.k} AF{star}"


class Dropout(Layer):
    def __init__(self, p: float, seed: int = 0):
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout ratio must lie in [0, 1), got {p}")
        self.p = p
        self.rng = np.random.default_rng(seed)

    def forward(self, x, training):
        return ops.dropout(x, self.p, training, self.rng)

    def describe(self):
        return f"dropout({self.p})"


class Flatten(Layer):
    def forward(self, x, training):
        return ops.flatten(x)

    def out_shape(self, shape):
        return (shape[0], int(np.prod(shape[1:])))


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int, registry: ParamRegistry, key: str):
        self.in_features, self.out_features = in_features, out_features
        self.weight = registry.parameter(f"{key}.weight", (out_features, in_features),
                                         kind="weight", fan_in=in_features)
        self.bias = registry.parameter(f"{key}.bias", (out_features,), kind="bias")

    def forward(self, x, training):
        return ops.fully_connected(x, self.weight, self.bias)

    def out_shape(self, shape):
        if shape[1] != self.in_features:
            raise ShapeError(f"FC expects {self.in_features} inputs, got {shape[1]}")
        return (shape[0], self.out_features)

    def parameters(self):
        return [self.weight, self.bias]

    def describe(self):
        return f"FC {self.in_features}->{self.out_features}"


class LayerStack(Layer):
    """Sequential composition."""

    def __init__(self, layers: Sequence[Layer], name: str = ""):
        self.layers = list(layers)
        self.name = name

    def __iter__(self) -> Iterator[Layer]:
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def forward(self, x, training):
        for layer in self.layers:
            x = layer(x, training)
        return x

    def out_shape(self, shape):
        for layer in self.layers:
            shape = layer.out_shape(shape)
        return shape

    def parameters(self):
        return _unique(p for layer in self.layers for p in layer.parameters())

    def describe(self):
        return " - ".join(l.describe() for l in self.layers if not isinstance(l, (BatchNorm, ReLU)))


class Parallel(Layer):
    """Independent streams on one input; ``combine`` is "concat" or "list"."""

    def __init__(self, streams: Sequence[Layer], combine: str = "concat", name: str = ""):
        if combine not in ("concat", "list"):
            raise ConfigError(f"unknown combine mode {combine!r}")
        self.streams = list(streams)
        self.combine = combine
        self.name = name

    def forward(self, x, training):
        outs = [s(x, training) for s in self.streams]
        return ops.channel_concat(outs) if self.combine == "concat" else outs

    def stream_shapes(self, shape) -> list[Shape]:
        return [s.out_shape(shape) for s in self.streams]

    def out_shape(self, shape):
        shapes = self.stream_shapes(shape)
        if self.combine == "list":
            return shapes[0]
        ref = shapes[0]
        for s in shapes[1:]:
            if s[2:] != ref[2:]:
                raise ShapeError(f"{self.name}: stream outputs {shapes} cannot be concatenated")
        return (ref[0], sum(s[1] for s in shapes), *ref[2:])

    def parameters(self):
        return _unique(p for s in self.streams for p in s.parameters())


def _unique(params) -> list[Parameter]:
    seen: dict[int, Parameter] = {}
    for p in params:
        seen.setdefault(id(p), p)
    return list(seen.values())


def make_cfilter_block(spec: ConvSpec, registry: ParamRegistry, tie_key: str) -> LayerStack:
    """conv -> batch norm -> ReLU, reusing the registry entry for ``tie_key`` if present."""
    registry.claim(tie_key, spec)
    return LayerStack([
        Conv2d(spec, registry, f"{tie_key}.conv"),
        BatchNorm(spec.out_channels, registry, f"{tie_key}.bn"),
        ReLU(),
    ], name=tie_key)


def make_fc_block(in_features: int, out_features: int, registry: ParamRegistry, tie_key: str) -> LayerStack:
    """FC -> batch norm -> ReLU."""
    registry.claim(tie_key, ("fc", in_features, out_features))
    return LayerStack([
        Linear(in_features, out_features, registry, f"{tie_key}.fc"),
        BatchNorm(out_features, registry, f"{tie_key}.bn"),
        ReLU(),
    ], name=tie_key)


def init_parameters(registry: ParamRegistry, seed: int, names: Sequence[str] | None = None) -> None:
    """He-Gaussian weights, zero biases, unit BN scale, zero BN shift, alpha 0.25.

    Each parameter draws from its own generator keyed by (seed, crc32(name)),
    so re-initializing a subset leaves the rest of the model untouched.
    """
    dtype = get_dtype()
    targets = registry.params.values() if names is None else [registry.params[n] for n in names]
    for p in targets:
        if p.kind == "weight":
            rng = np.random.default_rng([seed, zlib.crc32(p.name.encode())])
            std = np.sqrt(2.0 / p.fan_in)
            arr = rng.normal(0.0, std, size=p.shape)
        elif p.kind in ("bias", "beta"):
            arr = np.zeros(p.shape)
        elif p.kind == "gamma":
            arr = np.ones(p.shape)
        elif p.kind == "alpha":
            arr = np.full(p.shape, ALPHA_INIT)
        else:
            raise ConfigError(f"no initializer for parameter kind {p.kind!r} ({p.name})")
        p.assign(arr.astype(dtype))
    if names is None:
        for k, buf in registry.buffers.items():
            buf[...] = 1.0 if k.endswith("running_var") else 0.0
    else:
        for n in names:
            stem = n.rsplit(".", 1)[0]
            for suffix, fill in ((".running_mean", 0.0), (".running_var", 1.0)):
                if stem + suffix in registry.buffers:
                    registry.buffers[stem + suffix][...] = fill
