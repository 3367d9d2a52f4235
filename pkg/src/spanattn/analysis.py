"""Parameter and FLOP accounting, plus plot-ready CSV export.

Conventions: one multiply-accumulate is 2 FLOPs; every conv runs at its
output resolution (strides sit on the 1x1 reduce); attention costs are the
three projections, the content-logit window pass, the relative-logit matmul,
and the weighted sum, each 2 FLOPs per MAC; batch norm, ReLU, residual adds,
pooling, softmax and masking count 1 FLOP per element. Adaptive extents are
read live from the model, so reports reflect the spans at call time.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .attention import AttentionLayer
from .errors import MissingRun
from .models import Model
from .nn import Conv2d

__all__ = ["LayerCost", "CostReport", "ScalingPoint", "count_params", "count_flops",
           "cost_report", "export_scaling_tables"]


@dataclass
class LayerCost:
    path: str
    params: int = 0
    mac_flops: int = 0          # 2 * multiply-accumulates
    elementwise_flops: int = 0

    @property
    def flops(self) -> int:
        return self.mac_flops + self.elementwise_flops


@dataclass
class CostReport:
    primitive: str
    size_class: str | None
    input_size: int
    layers: list[LayerCost] = field(default_factory=list)
    extents: list[int] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(l.params for l in self.layers)

    @property
    def total_mac_flops(self) -> int:
        return sum(l.mac_flops for l in self.layers)

    @property
    def total_flops(self) -> int:
        return sum(l.flops for l in self.layers)

    def to_dict(self) -> dict:
        return {
            "primitive": self.primitive,
            "size_class": self.size_class,
            "input_size": self.input_size,
            "extents": self.extents,
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "total_mac_flops": self.total_mac_flops,
            "layers": [{"path": l.path, "params": l.params, "mac_flops": l.mac_flops,
                        "elementwise_flops": l.elementwise_flops} for l in self.layers],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _param_count(module, prefix="") -> int:
    return sum(p.size for _, p in module.named_parameters(prefix))


def count_params(model: Model) -> CostReport:
    """Exact scalar parameter counts grouped by top-level component."""
    report = CostReport(primitive=model.config.primitive,
                        size_class=model.config.size_class,
                        input_size=model.config.input_size)
    report.layers.append(LayerCost("stem", params=_param_count(model.stem) + _param_count(model.stem_bn)))
    for i, block in enumerate(model.blocks):
        report.layers.append(LayerCost(f"blocks.{i}", params=_param_count(block)))
    report.layers.append(LayerCost("head", params=_param_count(model.head)))
    return report


def _conv_macs(layer: Conv2d, out_hw: int) -> int:
    k = layer.kernel_size
    return layer.in_channels * layer.out_channels * k * k * out_hw


def _attention_costs(layer: AttentionLayer, out_hw: int) -> tuple[int, int]:
    """(MACs, elementwise FLOPs) for one attention application."""
    cfg = layer.config
    w_in, w_out, heads = cfg.in_channels, cfg.out_channels, cfg.heads
    e2 = layer.current_extent() ** 2
    macs = 3 * w_in * w_out * out_hw          # q, k, v projections over all heads
    macs += w_out * e2 * out_hw               # content logits (window dot)
    macs += w_out * e2 * out_hw               # relative logits (q @ rel^T)
    macs += w_out * e2 * out_hw               # weighted value sum
    cells = heads * e2 * out_hw
    elem = 5 * cells                          # shift, exp, mask mul, denom adds, divide
    elem += cells                             # content + relative logit add
    elem += 3 * heads * e2                    # mask construction per head
    return macs, elem


def count_flops(model: Model, input_size: int | None = None) -> CostReport:
    """Closed-form FLOPs of one forward pass at batch 1.

    The MAC portion equals exactly 2x the multiplies executed by the
    implementation (see ``tensor.mac_counter``); elementwise terms are the
    1-FLOP-per-element charges listed in the module docstring.
    """
    cfg = model.config
    if input_size is not None and input_size != cfg.input_size:
        raise ValueError(f"model was built for input size {cfg.input_size}, got {input_size}")
    s = cfg.input_size
    report = CostReport(primitive=cfg.primitive, size_class=cfg.size_class, input_size=s)

    hw = s * s
    stem = LayerCost("stem")
    stem.mac_flops = 2 * _conv_macs(model.stem, hw)
    stem.elementwise_flops = 2 * model.stem.out_channels * hw  # BN + ReLU
    report.layers.append(stem)

    for i, block in enumerate(model.blocks):
        in_hw = hw
        hw = block.out_size ** 2
        cost = LayerCost(f"blocks.{i}")
        w, out_ch = block.width, block.out_channels

        cost.mac_flops += 2 * _conv_macs(block.reduce, hw)
        cost.elementwise_flops += 2 * w * hw                     # bn1 + relu

        if isinstance(block.spatial, AttentionLayer):
            macs, elem = _attention_costs(block.spatial, hw)
            cost.mac_flops += 2 * macs
            cost.elementwise_flops += elem
            report.extents.append(block.spatial.current_extent())
        else:
            cost.mac_flops += 2 * _conv_macs(block.spatial, hw)
        cost.elementwise_flops += 2 * w * hw                     # bn2 + relu

        cost.mac_flops += 2 * _conv_macs(block.expand, hw)
        cost.elementwise_flops += out_ch * hw                    # bn3

        if block.shortcut is not None:
            cost.mac_flops += 2 * _conv_macs(block.shortcut, hw)
            cost.elementwise_flops += out_ch * hw                # shortcut bn
        elif block.stride != 1:
            cost.elementwise_flops += block.in_channels * in_hw  # shortcut pool
        cost.elementwise_flops += 2 * out_ch * hw                # residual add + relu
        report.layers.append(cost)

    head = LayerCost("head")
    final_ch = model.blocks[-1].out_channels
    head.elementwise_flops = final_ch * hw                       # global average pool
    head.mac_flops = 2 * final_ch * model.config.num_classes
    head.elementwise_flops += model.config.num_classes           # bias add
    report.layers.append(head)
    return report


def cost_report(model: Model) -> CostReport:
    """Parameters and FLOPs merged into one report."""
    params = count_params(model)
    flops = count_flops(model)
    merged = CostReport(primitive=flops.primitive, size_class=flops.size_class,
                        input_size=flops.input_size, extents=list(flops.extents))
    for pl, fl in zip(params.layers, flops.layers):
        merged.layers.append(LayerCost(path=pl.path, params=pl.params,
                                       mac_flops=fl.mac_flops,
                                       elementwise_flops=fl.elementwise_flops))
    return merged


@dataclass
class ScalingPoint:
    """One completed run for the scaling tables."""
    primitive: str
    size_class: str
    params: int
    flops: int
    acc: float
    fraction: float = 1.0


def export_scaling_tables(points: list[ScalingPoint], out_dir: str | os.PathLike
                          ) -> tuple[str, str]:
    """Write the accuracy-vs-cost and accuracy-vs-fraction CSVs."""
    if not points:
        raise MissingRun("no completed runs to export")
    os.makedirs(out_dir, exist_ok=True)
    size_path = os.path.join(out_dir, "scaling_size.csv")
    frac_path = os.path.join(out_dir, "scaling_fraction.csv")
    with open(size_path, "w") as fh:
        fh.write("params,flops,acc,primitive,size_class\n")
        for p in points:
            fh.write(f"{p.params},{p.flops},{p.acc:.6f},{p.primitive},{p.size_class}\n")
    with open(frac_path, "w") as fh:
        fh.write("fraction,acc,primitive\n")
        for p in points:
            fh.write(f"{p.fraction:.4f},{p.acc:.6f},{p.primitive}\n")
    return size_path, frac_path
