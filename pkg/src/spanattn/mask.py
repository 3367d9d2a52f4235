"""Soft 2D attention masks driven by a learnable span.

Each attention head owns a span ``z`` (in pixels) and a fixed ramp length
``R``. The mask over a square window is ``clamp((R + z - d) / R, 0, 1)`` where
``d`` is the Chebyshev distance from the window center: 1 out to distance z,
a linear ramp of width R, then exactly 0. The window extent a layer must
compute is ``2 * ceil(clamp(max_z + R, 0, input_size)) + 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptySpanList, EvenExtent, ExtentTooSmall
from .tensor import Tensor, clamp, mul, add

__all__ = ["SpanParam", "MaskGrid", "kernel_extent", "create_adaptive_mask", "head_masks"]


class SpanParam:
    """Learnable attention span z plus its fixed ramp length R."""

    def __init__(self, z: float = 2.0, ramp: int = 2, dtype=np.float64):
        if ramp < 1:
            raise ValueError(f"ramp length must be >= 1, got {ramp}")
        self.z = Tensor(np.asarray(float(z), dtype=dtype), requires_grad=True)
        self.ramp = int(ramp)

    @property
    def value(self) -> float:
        return float(self.z.data)

    def project_(self, input_size: int) -> None:
        """Clamp the stored span into [0, input_size] in place (projection,
        applied after optimizer steps and at the start of every forward)."""
        self.z.data[...] = np.clip(self.z.data, 0.0, float(input_size))

    def named_parameters(self, prefix: str = ""):
        yield (f"{prefix}.z" if prefix else "z"), self.z

    def __repr__(self):
        return f"SpanParam(z={self.value:.4f}, ramp={self.ramp})"


@dataclass
class MaskGrid:
    """Square mask with values in [0,1], differentiable with respect to z."""

    side: int
    values: Tensor

    @property
    def flat(self) -> Tensor:
        return self.values.reshape((self.side * self.side,))


def _chebyshev_grid(extent: int, dtype) -> np.ndarray:
    c = (extent - 1) // 2
    idx = np.arange(extent) - c
    return np.maximum(np.abs(idx)[:, None], np.abs(idx)[None, :]).astype(dtype)


def kernel_extent(z_values: Sequence[float], ramp: int, input_size: int) -> int:
    """Odd window side length for a layer: 2 * max_size + 1, where max_size is
    ceil of (max span + ramp) clamped into [0, input_size]."""
    z_values = list(z_values)
    if not z_values:
        raise EmptySpanList("at least one span value is required")
    if input_size < 1:
        raise ValueError(f"input_size must be >= 1, got {input_size}")
    reach = max(float(z) for z in z_values) + ramp
    max_size = math.ceil(min(max(reach, 0.0), float(input_size)))
    return 2 * max_size + 1


def create_adaptive_mask(extent: int, span: SpanParam) -> MaskGrid:
    """Build the soft square mask for one head on the given odd extent.

    M(r, s) = clamp((R + z - d) / R, 0, 1) with d the Chebyshev distance from
    the center cell. dM/dz is 1/R on the ramp (0 < M < 1) and 0 elsewhere.
    """
    if extent < 1 or extent % 2 == 0:
        raise EvenExtent(f"mask extent must be odd and >= 1, got {extent}")
    d = _chebyshev_grid(extent, span.z.dtype)
    ramp = float(span.ramp)
    # (z + (R - d)) / R, clamped; tensor ops keep the z gradient path alive
    pre = mul(add(span.z, Tensor(ramp - d)), 1.0 / ramp)
    return MaskGrid(side=extent, values=clamp(pre, 0.0, 1.0))


def head_masks(spans: Sequence[SpanParam], shared_extent: int,
               input_size: int | None = None) -> list[MaskGrid]:
    """One mask per head, all on the layer's shared extent.

    Heads with smaller spans simply get wider zero borders. The shared extent
    must cover every head's reach (after the optional input_size clamp, which
    mirrors how the layer derives its extent).
    """
    if shared_extent < 1 or shared_extent % 2 == 0:
        raise EvenExtent(f"shared extent must be odd and >= 1, got {shared_extent}")
    half = (shared_extent - 1) // 2
    for i, sp in enumerate(spans):
        reach = sp.value + sp.ramp
        if input_size is not None:
            reach = min(reach, float(input_size))
        if math.ceil(max(reach, 0.0)) > half:
            raise ExtentTooSmall(
                f"extent {shared_extent} cannot hold head {i} with z={sp.value}, R={sp.ramp}")
    return [create_adaptive_mask(shared_extent, sp) for sp in spans]
