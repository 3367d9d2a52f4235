"""ResNet-style CIFAR classifiers with a pluggable spatial kernel.

Every model is a 3x3 stem followed by bottleneck blocks (1x1 reduce ->
spatial kernel -> 1x1 expand, output 4x the bottleneck width), global average
pooling and a linear head. The spatial kernel is one of: 3x3 convolution,
fixed-span local attention, or adaptive-span local attention; everything else
is identical across primitives. Downsampling lives on the 1x1 reduce (and the
projection shortcut), so the spatial kernel always runs at the block's output
resolution: 32x32 inputs shrink twice to a final 8x8 map.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .attention import AttentionLayer, AttentionLayerConfig
from .errors import InvalidChannelPlan, NotAdaptiveModel
from .mask import kernel_extent
from .nn import BatchNorm2d, Conv2d, Linear, Module
from .tensor import Tensor, add, avg_pool2d, relu, tensor_mean

__all__ = ["ModelConfig", "BottleneckBlock", "Model", "build_model",
           "report_learned_spans", "SpanReport", "SIZE_PLANS", "SIZE_STRIDES"]

PRIMITIVES = ("conv", "fixed", "adaptive")

# bottleneck widths per residual layer
SIZE_PLANS = {
    "small": [32, 64, 128],
    "medium": [32, 64, 128, 256],
    "large": [32, 64, 64, 64, 128, 128, 128, 128, 256],
}

# two 2x downsamples per model, final maps are 8x8
SIZE_STRIDES = {
    "small": [2, 1, 2],
    "medium": [1, 2, 1, 2],
    "large": [1, 2, 1, 1, 1, 2, 1, 1, 1],
}

EXPANSION = 4
STEM_CHANNELS = 32


@dataclass
class ModelConfig:
    primitive: str = "conv"
    size_class: str = "small"
    num_classes: int = 100
    heads: int = 4
    ramp: int = 2
    fixed_extent: int = 5
    conv_extent: int = 3
    init_span: float = 2.0
    input_size: int = 32
    in_channels: int = 3
    channel_plan: list[int] = field(default_factory=list)
    strides: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.primitive not in PRIMITIVES:
            raise InvalidChannelPlan(f"unknown primitive {self.primitive!r}")
        if self.size_class is not None:
            if self.size_class not in SIZE_PLANS:
                raise InvalidChannelPlan(f"unknown size class {self.size_class!r}")
            plan = SIZE_PLANS[self.size_class]
            strides = SIZE_STRIDES[self.size_class]
            if self.channel_plan and list(self.channel_plan) != plan:
                raise InvalidChannelPlan(
                    f"channel plan {self.channel_plan} does not match {self.size_class}: {plan}")
            self.channel_plan = list(plan)
            self.strides = list(self.strides) or list(strides)
        if not self.channel_plan:
            raise InvalidChannelPlan("empty channel plan")
        if any(c < 1 for c in self.channel_plan):
            raise InvalidChannelPlan(f"invalid channel plan {self.channel_plan}")
        if len(self.strides) != len(self.channel_plan):
            raise InvalidChannelPlan(
                f"{len(self.strides)} strides for {len(self.channel_plan)} blocks")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


class BottleneckBlock(Module):
    """1x1 reduce -> spatial kernel -> 1x1 expand with a residual shortcut.

    The block stride sits on the reduce conv (and the projection shortcut);
    the spatial kernel is always stride 1 at the output resolution.
    """

    def __init__(self, in_channels: int, width: int, stride: int, out_size: int,
                 config: ModelConfig, rng: np.random.Generator, dtype):
        super().__init__()
        out_channels = width * EXPANSION
        self.in_channels = in_channels
        self.width = width
        self.out_channels = out_channels
        self.stride = stride
        self.out_size = out_size

        self.reduce = Conv2d(in_channels, width, 1, stride=stride, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(width, dtype=dtype)
        if config.primitive == "conv":
            self.spatial = Conv2d(width, width, config.conv_extent, stride=1,
                                  padding=(config.conv_extent - 1) // 2, rng=rng, dtype=dtype)
        else:
            variant = "adaptive" if config.primitive == "adaptive" else "fixed"
            self.spatial = AttentionLayer(
                AttentionLayerConfig(
                    in_channels=width, out_channels=width, heads=config.heads,
                    stride=1, variant=variant, fixed_extent=config.fixed_extent,
                    ramp=config.ramp, input_size=out_size, init_span=config.init_span),
                rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(width, dtype=dtype)
        self.expand = Conv2d(width, out_channels, 1, rng=rng, dtype=dtype)
        self.bn3 = BatchNorm2d(out_channels, dtype=dtype)
        if in_channels != out_channels:
            self.shortcut = Conv2d(in_channels, out_channels, 1, stride=stride,
                                   rng=rng, dtype=dtype)
            self.shortcut_bn = BatchNorm2d(out_channels, dtype=dtype)
        else:
            # same-channel blocks never pay for a projection; a stride-2 one
            # downsamples the shortcut with a parameter-free average pool
            self.shortcut = None
            self.shortcut_bn = None

    def forward(self, x: Tensor) -> Tensor:
        y = relu(self.bn1(self.reduce(x)))
        y = relu(self.bn2(self.spatial(y)))
        y = self.bn3(self.expand(y))
        if self.shortcut is not None:
            sc = self.shortcut_bn(self.shortcut(x))
        elif self.stride != 1:
            sc = avg_pool2d(x, self.stride)
        else:
            sc = x
        return relu(add(y, sc))


class Model(Module):
    """Stem, bottleneck stack, global average pool, linear classifier."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype):
        super().__init__()
        self.config = config
        self.stem = Conv2d(config.in_channels, STEM_CHANNELS, 3, stride=1, padding=1,
                           rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm2d(STEM_CHANNELS, dtype=dtype)

        blocks = []
        in_ch = STEM_CHANNELS
        size = config.input_size
        for width, stride in zip(config.channel_plan, config.strides):
            size //= stride
            blocks.append(BottleneckBlock(in_ch, width, stride, size, config, rng, dtype))
            in_ch = width * EXPANSION
        self.blocks = blocks
        self.head = Linear(in_ch, config.num_classes, bias=True, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        y = relu(self.stem_bn(self.stem(x)))
        for block in self.blocks:
            y = block(y)
        pooled = tensor_mean(y, axis=(2, 3))
        return self.head(pooled)

    def attention_layers(self) -> list[AttentionLayer]:
        return [b.spatial for b in self.blocks if isinstance(b.spatial, AttentionLayer)]

    def parameter_groups(self) -> list[tuple[str, Tensor, bool]]:
        """(path, tensor, weight_decay_applies): spans and batch-norm affine
        parameters are excluded from weight decay."""
        groups = []
        for path, p in self.named_parameters():
            leaf = path.rsplit(".", 1)[-1]
            decay = leaf not in ("z", "gamma", "beta")
            groups.append((path, p, decay))
        return groups


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Deterministically initialize a model for the given configuration."""
    return Model(config, rng=np.random.default_rng(seed), dtype=dtype)


@dataclass
class SpanReport:
    block: int
    spans: list[float]
    max_size: int
    extent: int


def report_learned_spans(model: Model) -> list[SpanReport]:
    """Current per-head spans and the derived kernel extents, one entry per
    adaptive attention layer."""
    if model.config.primitive != "adaptive":
        raise NotAdaptiveModel(f"model primitive is {model.config.primitive!r}")
    reports = []
    for i, block in enumerate(model.blocks):
        layer = block.spatial
        zs = [sp.value for sp in layer.spans]
        extent = kernel_extent(zs, layer.config.ramp, layer.config.input_size)
        reports.append(SpanReport(block=i, spans=zs, max_size=(extent - 1) // 2, extent=extent))
    return reports
