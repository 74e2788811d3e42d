"""Two-branch multi-scale re-id network.

Both branches are built over one :class:`ParamRegistry` with identical tie
keys, so every convolution, batch norm, fusion weight and embedding layer is
a single shared Parameter referenced from two places. The Siamese forward
runs branch A and branch B as separate graph sites; the tape sums their
gradient contributions into the shared storage.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import NamedTuple, Sequence

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .layers import (AvgPool2d, ConvSpec, Dropout, Flatten, Layer, LayerStack, Linear,
                     MaxPool2d, Parallel, ParamRegistry, init_parameters, make_cfilter_block,
                     make_fc_block)
from .tensor import Parameter, Tensor, as_tensor

VARIANTS = ("mudeep", "inceptionA", "inceptionB", "inceptionAplusB")
DIFFERENCE_MODES = ("squared", "plain")
SAME, DIFFERENT = 1, 0


class Conv(NamedTuple):
    out: int
    kh: int
    kw: int
    stride: int = 1
    pad_h: int | None = None
    pad_w: int | None = None


class Pool(NamedTuple):
    kind: str  # "avg" | "max"
    k: int = 3
    stride: int = 1
    pad: int = 1


# Stream tables; channel counts are at full width and get multiplied by
# ModelConfig.channel_scale. Kernel input depth always follows the actual
# preceding layer.
PREPROCESS = (Conv(48, 3, 3, pad_h=0, pad_w=0), Conv(96, 3, 3, pad_h=0, pad_w=0), Pool("max", 3, 2, 1))

MULTISCALE_A = (
    (Pool("avg", 3, 1, 1), Conv(24, 1, 1)),
    (Conv(24, 1, 1),),
    (Conv(16, 1, 1), Conv(24, 3, 3)),
    (Conv(16, 1, 1), Conv(24, 3, 3), Conv(24, 3, 3)),
)

REDUCTION = (
    (Pool("max", 3, 2, 1),),
    (Conv(96, 3, 3, stride=2),),
    (Conv(48, 1, 1), Conv(56, 3, 3), Conv(64, 3, 3, stride=2)),
)

# the pooling stream keeps stride 1 so all four outputs stay 39x14
MULTISCALE_B = (
    (Conv(256, 1, 1),),
    (Conv(64, 1, 1), Conv(128, 1, 3), Conv(256, 3, 1)),
    (Conv(64, 1, 1), Conv(64, 1, 3), Conv(128, 3, 1), Conv(128, 1, 3), Conv(256, 3, 1)),
    (Pool("avg", 3, 1, 1), Conv(256, 1, 1)),
)

# Inception-v4 style baselines at MuDeep widths (channel proportions of the
# v4 modules scaled to this network's 96/256-channel budget).
INCEPTION_A = (
    (Pool("avg", 3, 1, 1), Conv(24, 1, 1)),
    (Conv(24, 1, 1),),
    (Conv(16, 1, 1), Conv(24, 3, 3)),
    (Conv(16, 1, 1), Conv(24, 3, 3), Conv(24, 3, 3)),
)

INCEPTION_B = (
    (Pool("avg", 3, 1, 1), Conv(32, 1, 1)),
    (Conv(96, 1, 1),),
    (Conv(48, 1, 1), Conv(56, 1, 7, pad_h=0, pad_w=3), Conv(64, 7, 1, pad_h=3, pad_w=0)),
    (Conv(48, 1, 1), Conv(48, 1, 7, pad_h=0, pad_w=3), Conv(56, 7, 1, pad_h=3, pad_w=0),
     Conv(56, 1, 7, pad_h=0, pad_w=3), Conv(64, 7, 1, pad_h=3, pad_w=0)),
)


def _as_fraction(v) -> Fraction:
    if isinstance(v, Fraction):
        return v
    if isinstance(v, str):
        return Fraction(v.strip())
    if isinstance(v, float):
        return Fraction(v).limit_denominator(1 << 16)
    return Fraction(v)


@dataclass
class ModelConfig:
    input_shape: tuple[int, int, int] = (3, 160, 60)
    channel_scale: Fraction = Fraction(1)
    embedding_dim: int = 4096
    verif_hidden: int = 512
    num_identities: int = 100
    difference_mode: str = "squared"
    use_fusion: bool = True
    use_classnet: bool = True
    stream_variant: str = "mudeep"
    reduction: str = "multiscale"
    dropout: float = 0.3

    def __post_init__(self):
        self.channel_scale = _as_fraction(self.channel_scale)
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (C, H, W) with positive entries, got {self.input_shape}")
        if not 0 < self.channel_scale <= 1:
            raise ConfigError(f"channel_scale must lie in (0, 1], got {self.channel_scale}")
        if self.embedding_dim < 1 or self.verif_hidden < 1:
            raise ConfigError("embedding_dim and verif_hidden must be positive")
        if self.difference_mode not in DIFFERENCE_MODES:
            raise ConfigError(f"difference_mode must be one of {DIFFERENCE_MODES}, got {self.difference_mode!r}")
        if self.stream_variant not in VARIANTS:
            raise ConfigError(f"stream_variant must be one of {VARIANTS}, got {self.stream_variant!r}")
        if self.reduction not in ("multiscale", "maxpool"):
            raise ConfigError(f"reduction must be 'multiscale' or 'maxpool', got {self.reduction!r}")
        if self.use_classnet and self.num_identities < 2:
            raise ConfigError("num_identities must be >= 2 when the classification subnet is enabled")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @classmethod
    def paper(cls, num_identities: int = 100) -> "ModelConfig":
        return cls(num_identities=num_identities)

    @classmethod
    def desk(cls, num_identities: int = 8, **kw) -> "ModelConfig":
        return cls(channel_scale=Fraction(1, 4), embedding_dim=256, num_identities=num_identities, **kw)

    def channels(self, n: int) -> int:
        scaled = self.channel_scale * n
        if scaled.denominator != 1 or scaled < 1:
            raise ConfigError(f"channel_scale {self.channel_scale} maps {n} channels to non-integer {float(scaled)}")
        return int(scaled)

    def replace(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


def _build_stream(steps: Sequence, in_ch: int, cfg: ModelConfig, registry: ParamRegistry,
                  key: str) -> tuple[LayerStack, int]:
    layers: list[Layer] = []
    c = in_ch
    for j, step in enumerate(steps):
        if isinstance(step, Conv):
            spec = ConvSpec(cfg.channels(step.out), step.kh, step.kw, c, step.stride, step.pad_h, step.pad_w)
            layers.append(make_cfilter_block(spec, registry, f"{key}.{j}"))
            c = spec.out_channels
        elif step.kind == "avg":
            layers.append(AvgPool2d(step.k, step.stride, step.pad))
        else:
            layers.append(MaxPool2d(step.k, step.stride, step.pad))
    return LayerStack(layers, name=key), c


def _build_parallel(table, in_ch, cfg, registry, key, combine="concat") -> tuple[Parallel, list[int]]:
    streams, widths = [], []
    for i, steps in enumerate(table, start=1):
        stack, c = _build_stream(steps, in_ch, cfg, registry, f"{key}.s{i}")
        streams.append(stack)
        widths.append(c)
    return Parallel(streams, combine=combine, name=key), widths


def build_preprocess(cfg: ModelConfig, registry: ParamRegistry) -> LayerStack:
    stack, _ = _build_stream(PREPROCESS, cfg.input_shape[0], cfg, registry, "pre")
    return stack


def build_multiscale_A(cfg: ModelConfig, registry: ParamRegistry, in_ch: int | None = None) -> Parallel:
    in_ch = cfg.channels(96) if in_ch is None else in_ch
    return _build_parallel(MULTISCALE_A, in_ch, cfg, registry, "msa")[0]


def build_reduction(cfg: ModelConfig, registry: ParamRegistry, in_ch: int | None = None) -> Parallel:
    in_ch = cfg.channels(96) if in_ch is None else in_ch
    if cfg.reduction == "maxpool":
        return Parallel([LayerStack([MaxPool2d(3, 2, 1)], name="red.s1")], name="red")
    return _build_parallel(REDUCTION, in_ch, cfg, registry, "red")[0]


def build_multiscale_B(cfg: ModelConfig, registry: ParamRegistry, in_ch: int | None = None) -> Parallel:
    in_ch = cfg.channels(256) if in_ch is None else in_ch
    return _build_parallel(MULTISCALE_B, in_ch, cfg, registry, "msb", combine="list")[0]


def saliency_fuse(streams: Sequence[Tensor], alpha: Tensor | None) -> Tensor:
    """Fused map G[:, j] = sum_i alpha[i, j] * F_i[:, j].

    ``alpha=None`` means a fixed unit weighting (plain stream sum).
    """
    streams = list(streams)
    ref = streams[0].shape
    for F in streams[1:]:
        if F.shape != ref:
            raise ShapeError(f"saliency_fuse: stream shapes differ: {[s.shape for s in streams]}")
    if alpha is not None and alpha.shape != (len(streams), ref[1]):
        raise ShapeError(f"saliency_fuse: alpha shape {alpha.shape}, expected {(len(streams), ref[1])}")
    G = None
    for i, F in enumerate(streams):
        term = F if alpha is None else ops.channel_scale(F, ops.select(alpha, i))
        G = term if G is None else ops.add(G, term)
    return G


class SaliencyFusion(Layer):
    def __init__(self, num_streams: int, channels: int, registry: ParamRegistry, learnable: bool = True):
        self.num_streams, self.channels = num_streams, channels
        self.alpha = registry.parameter("fusion.alpha", (num_streams, channels), kind="alpha") if learnable else None

    def forward(self, streams, training):
        return saliency_fuse(streams, self.alpha)

    def parameters(self):
        return [self.alpha] if self.alpha is not None else []

    def describe(self):
        kind = "learned alpha" if self.alpha is not None else "unit sum"
        return f"fusion {self.num_streams}x{self.channels} ({kind})"


def feature_difference(G1: Tensor, G2: Tensor, mode: str = "squared") -> Tensor:
    if G1.shape != G2.shape:
        raise ShapeError(f"feature_difference: shapes {G1.shape} and {G2.shape} differ")
    d = ops.sub(G1, G2)
    if mode == "squared":
        return ops.mul(d, d)
    if mode == "plain":
        return d
    raise ConfigError(f"unknown difference mode {mode!r}")


@dataclass
class BranchOutput:
    embedding: Tensor
    streams: list[Tensor] | None = None
    fused: Tensor | None = None
    stages: dict[str, Tensor] = field(default_factory=dict)


class Branch:
    """One tower: preprocess -> stream layers -> fusion -> embedding."""

    def __init__(self, cfg: ModelConfig, registry: ParamRegistry, dropout_seed: int = 0):
        self.cfg = cfg
        self.preprocess = build_preprocess(cfg, registry)
        c = cfg.channels(96)
        self.blocks: list[tuple[str, Parallel]] = []
        self.streams: Parallel | None = None
        self.fusion: SaliencyFusion | None = None
        v = cfg.stream_variant
        if v == "mudeep":
            self.blocks.append(("Multi-scale-A", build_multiscale_A(cfg, registry, c)))
            red = build_reduction(cfg, registry, c)
            self.blocks.append(("Reduction", red))
            c = _widths_after(red, c)
            self.streams = build_multiscale_B(cfg, registry, c)
            out_c = self.streams.streams[0].out_shape((1, c, 8, 8))[1]
            self.fusion = SaliencyFusion(len(self.streams.streams), out_c, registry, learnable=cfg.use_fusion)
            c = out_c
        else:
            if v in ("inceptionA", "inceptionAplusB"):
                blk, widths = _build_parallel(INCEPTION_A, c, cfg, registry, "incA")
                self.blocks.append(("Inception-A", blk))
                c = sum(widths)
            red = build_reduction(cfg, registry, c)
            self.blocks.append(("Reduction", red))
            c = _widths_after(red, c)
            if v in ("inceptionB", "inceptionAplusB"):
                blk, widths = _build_parallel(INCEPTION_B, c, cfg, registry, "incB")
                self.blocks.append(("Inception-B", blk))
                c = sum(widths)
        self.feature_channels = c
        H, W = self.feature_hw()
        flat = c * H * W
        self.embed = LayerStack([
            Flatten(),
            *make_fc_block(flat, cfg.embedding_dim, registry, "embed").layers,
            Dropout(cfg.dropout, seed=dropout_seed),
        ], name="embed")

    def feature_hw(self) -> tuple[int, int]:
        shape = (1, *self.cfg.input_shape)
        shape = self.preprocess.out_shape(shape)
        for _, blk in self.blocks:
            shape = blk.out_shape(shape)
        if self.streams is not None:
            shape = self.streams.out_shape(shape)
        return shape[2], shape[3]

    @property
    def dropout(self) -> Dropout:
        return self.embed.layers[-1]

    def forward(self, x: Tensor, training: bool = False) -> BranchOutput:
        stages: dict[str, Tensor] = {}
        h = self.preprocess(x, training)
        stages["preprocess"] = h
        for name, blk in self.blocks:
            h = blk(h, training)
            stages[name] = h
        streams = fused = None
        if self.streams is not None:
            streams = self.streams(h, training)
            fused = self.fusion(streams, training)
            stages["fusion"] = fused
            h = fused
        emb = self.embed(h, training)
        stages["embedding"] = emb
        return BranchOutput(emb, streams, fused, stages)

    __call__ = forward

    def parameters(self) -> list[Parameter]:
        layers: list[Layer] = [self.preprocess, *(b for _, b in self.blocks)]
        if self.streams is not None:
            layers += [self.streams, self.fusion]
        layers.append(self.embed)
        seen: dict[int, Parameter] = {}
        for l in layers:
            for p in l.parameters():
                seen.setdefault(id(p), p)
        return list(seen.values())


def _widths_after(block: Parallel, in_ch: int) -> int:
    return block.out_shape((1, in_ch, 16, 16))[1]


class VerificationHead(Layer):
    """Difference features -> FC(hidden) -> BN -> ReLU -> FC(2)."""

    def __init__(self, in_features: int, hidden: int, registry: ParamRegistry):
        self.hidden = make_fc_block(in_features, hidden, registry, "verif.hidden")
        self.out = Linear(hidden, 2, registry, "verif.out")

    def forward(self, d, training):
        return self.out(self.hidden(d, training), training)

    def parameters(self):
        return self.hidden.parameters() + self.out.parameters()


@dataclass
class PairOutput:
    ver_logits: Tensor
    emb_a: Tensor
    emb_b: Tensor
    cls_a: Tensor | None = None
    cls_b: Tensor | None = None
    streams_a: list[Tensor] | None = None
    streams_b: list[Tensor] | None = None
    fused_a: Tensor | None = None
    fused_b: Tensor | None = None
    alpha: np.ndarray | None = None

    def same_probability(self) -> np.ndarray:
        return ops.softmax(self.ver_logits.data)[:, SAME]


@dataclass
class TraceRow:
    section: str
    stream: str
    layers: str
    output_shape: tuple[int, ...]
    params: int

    def hwc(self) -> str:
        s = self.output_shape
        if len(s) == 4:
            return f"{s[2]}×{s[3]}×{s[1]}"
        return str(s[1])


class MuDeep:
    def __init__(self, cfg: ModelConfig, seed: int | None = 0):
        self.cfg = cfg
        self.registry = ParamRegistry()
        self.branch_a = Branch(cfg, self.registry, dropout_seed=0)
        self.branch_b = Branch(cfg, self.registry, dropout_seed=1)
        emb = cfg.embedding_dim
        self.verification = VerificationHead(emb, cfg.verif_hidden, self.registry)
        self.classifier = Linear(emb, cfg.num_identities, self.registry, "classifier") if cfg.use_classnet else None
        if seed is not None:
            self.initialize(seed)

    # parameters ------------------------------------------------------------

    def initialize(self, seed: int) -> None:
        init_parameters(self.registry, seed)
        self.reseed_dropout(seed)

    def reseed_dropout(self, seed: int) -> None:
        self.branch_a.dropout.rng = np.random.default_rng([seed, 0])
        self.branch_b.dropout.rng = np.random.default_rng([seed, 1])

    def parameters(self) -> list[Parameter]:
        return list(self.registry.params.values())

    def named_parameters(self) -> dict[str, Parameter]:
        return dict(self.registry.params)

    def classifier_parameters(self) -> list[Parameter]:
        return self.classifier.parameters() if self.classifier is not None else []

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return self.registry.num_parameters()

    def astype(self, dtype) -> None:
        self.registry.astype(dtype)

    # forward ---------------------------------------------------------------

    def embed(self, x, training: bool = False, branch: int = 0) -> BranchOutput:
        b = self.branch_a if branch == 0 else self.branch_b
        return b(as_tensor(x), training)

    def verification_logits(self, emb_a: Tensor, emb_b: Tensor, training: bool = False) -> Tensor:
        d = feature_difference(emb_a, emb_b, self.cfg.difference_mode)
        return self.verification(d, training)

    def classification_logits(self, emb: Tensor, training: bool = False) -> Tensor:
        if self.classifier is None:
            raise ConfigError("classification subnet is disabled in this configuration")
        return self.classifier(emb, training)

    def forward_pair(self, img_a, img_b, training: bool = False, with_cls: bool | None = None) -> PairOutput:
        if with_cls is None:
            with_cls = self.classifier is not None
        out_a = self.branch_a(as_tensor(img_a), training)
        out_b = self.branch_b(as_tensor(img_b), training)
        ver = self.verification_logits(out_a.embedding, out_b.embedding, training)
        cls_a = cls_b = None
        if with_cls:
            cls_a = self.classification_logits(out_a.embedding, training)
            cls_b = self.classification_logits(out_b.embedding, training)
        alpha = self.branch_a.fusion.alpha if self.branch_a.fusion is not None else None
        return PairOutput(ver, out_a.embedding, out_b.embedding, cls_a, cls_b,
                          out_a.streams, out_b.streams, out_a.fused, out_b.fused,
                          None if alpha is None else alpha.data)

    # shape bookkeeping ----------------------------------------------------

    def shape_trace(self, batch: int = 2) -> list[TraceRow]:
        """Symbolic layer-by-layer shapes of one branch plus the heads."""
        b = self.branch_a
        rows: list[TraceRow] = []
        shape = (batch, *self.cfg.input_shape)
        rows.append(TraceRow("input", "", "image", shape, 0))
        for layer in b.preprocess:
            shape = layer.out_shape(shape)
            rows.append(TraceRow("preprocess", "", layer.describe(), shape, _count(layer)))
        blocks = list(b.blocks)
        if b.streams is not None:
            blocks.append(("Multi-scale-B", b.streams))
        for name, blk in blocks:
            in_shape = shape
            for i, s in enumerate(blk.streams, start=1):
                rows.append(TraceRow(name, str(i), s.describe(), s.out_shape(in_shape), _count(s)))
            shape = blk.out_shape(in_shape)
            if blk.combine == "concat":
                rows.append(TraceRow(name, "concat", "channel concat", shape, 0))
        if b.fusion is not None:
            rows.append(TraceRow("fusion", "", b.fusion.describe(), shape, _count(b.fusion)))
        flat = b.embed.layers[0].out_shape(shape)
        emb = (batch, self.cfg.embedding_dim)
        rows.append(TraceRow("embedding", "", f"flatten {flat[1]} - FC - BN - ReLU - dropout({self.cfg.dropout})",
                             emb, _count(b.embed)))
        rows.append(TraceRow("difference", "", f"{self.cfg.difference_mode} difference", emb, 0))
        v = self.verification
        rows.append(TraceRow("verification", "", f"FC-{self.cfg.verif_hidden} - BN - ReLU",
                             (batch, self.cfg.verif_hidden), _count(v.hidden)))
        rows.append(TraceRow("verification", "", "FC-2 softmax", (batch, 2), _count(v.out)))
        if self.classifier is not None:
            rows.append(TraceRow("classification", "", f"FC-{self.cfg.num_identities} softmax",
                                 (batch, self.cfg.num_identities), _count(self.classifier)))
        return rows


def _count(layer: Layer) -> int:
    return sum(p.size for p in layer.parameters())


def parameter_group(name: str) -> str:
    return name.split(".", 1)[0]
