"""Multi-head local self-attention over square pixel neighborhoods.

Each output pixel attends to the k x k window around it. Keys carry relative
positional embeddings (width offsets on the first half of the key dimensions,
height offsets on the second half), and attention weights are soft-masked per
head. Two variants: ``adaptive`` re-derives the window extent every forward
from the learnable spans; ``fixed`` uses a constant extent and an all-ones
mask. A literal per-pixel loop implementation is provided as the correctness
oracle for the vectorized layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ChannelMismatch, ExtentExceedsTable, ShapeMismatch
from .mask import SpanParam, head_masks, kernel_extent
from .nn import Module
from .tensor import (
    Tensor,
    add,
    avg_pool2d,
    broadcast_to,
    concat,
    custom_op,
    matmul,
    narrow,
    pad2d,
    reshape,
    softmax_masked,
    stack,
    transpose,
    _count_macs,
)

__all__ = [
    "AttentionLayerConfig",
    "AttentionLayer",
    "slice_relative_embeddings",
    "add_relative_embeddings",
    "relative_matrix",
    "window_dot",
    "window_gather",
    "attention_forward",
    "attention_forward_naive",
]

MASK_EPS = 1e-12


@dataclass
class AttentionLayerConfig:
    in_channels: int
    out_channels: int
    heads: int = 4
    stride: int = 1
    variant: str = "adaptive"          # "adaptive" | "fixed"
    fixed_extent: int = 5
    ramp: int = 2
    input_size: int = 32
    init_span: float = 2.0

    def __post_init__(self):
        if self.variant not in ("adaptive", "fixed"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.out_channels % self.heads:
            raise ValueError(f"out_channels {self.out_channels} not divisible by heads {self.heads}")
        if (self.out_channels // self.heads) % 2:
            raise ValueError("per-head dimension must be even to split width/height embeddings")
        if self.variant == "fixed":
            if self.fixed_extent % 2 == 0 or self.fixed_extent < 1:
                raise ValueError(f"fixed_extent must be odd, got {self.fixed_extent}")
            if self.fixed_extent > 2 * self.input_size - 1:
                raise ValueError(
                    f"fixed_extent {self.fixed_extent} exceeds embedding coverage "
                    f"{2 * self.input_size - 1}")

    @property
    def d_head(self) -> int:
        return self.out_channels // self.heads


# ---------------------------------------------------------------------------
# relative positional embeddings
# ---------------------------------------------------------------------------

def slice_relative_embeddings(h_table: Tensor, w_table: Tensor, extent: int):
    """Centered ``extent`` rows of each table; the middle row of the slice is
    always relative offset 0. Tables have 2*S-1 rows covering every offset in
    [-(S-1), S-1]."""
    table_len = h_table.shape[0]
    if extent > table_len:
        raise ExtentExceedsTable(f"extent {extent} exceeds table length {table_len}")
    start = (table_len - extent) // 2
    return (narrow(h_table, 0, start, extent), narrow(w_table, 0, start, extent))


def relative_matrix(rel_h: Tensor, rel_w: Tensor) -> Tensor:
    """Per-cell embedding vectors: row r*extent+s is concat(rel_w[s], rel_h[r])."""
    e, dh = rel_h.shape
    w_part = broadcast_to(reshape(rel_w, (1, e, dh)), (e, e, dh))
    h_part = broadcast_to(reshape(rel_h, (e, 1, dh)), (e, e, dh))
    return reshape(concat([w_part, h_part], axis=2), (e * e, 2 * dh))


def add_relative_embeddings(keys: Tensor, rel_h: Tensor, rel_w: Tensor) -> Tensor:
    """Add per-cell relative embeddings to key vectors of shape (..., extent^2, d).

    Cell (r, s) gets rel_w[s] on the first d/2 dimensions and rel_h[r] on the
    last d/2, shared across heads and query positions.
    """
    e, dh = rel_h.shape
    if keys.shape[-1] != 2 * dh or keys.shape[-2] != e * e:
        raise ShapeMismatch(
            f"keys {keys.shape} incompatible with extent {e}, half-dim {dh}")
    return add(keys, relative_matrix(rel_h, rel_w))


# ---------------------------------------------------------------------------
# fused window primitives (memory-light: never materialize unfolded windows)
# ---------------------------------------------------------------------------

def window_dot(q: Tensor, k_pad: Tensor, extent: int) -> Tensor:
    """Per-pixel dot products against every window cell.

    q: (B,H,D,S,S); k_pad: (B,H,D,S+e-1,S+e-1) zero-padded maps.
    Returns logits (B,H,e^2,S,S) with cell index r*e+s.
    """
    b, h, d, s1, s2 = q.shape
    if k_pad.shape[:3] != (b, h, d) or k_pad.shape[3] != s1 + extent - 1:
        raise ShapeMismatch(f"window_dot shapes {q.shape} vs {k_pad.shape}, extent {extent}")
    qd, kd = q.data, k_pad.data
    out = np.empty((b, h, extent * extent, s1, s2), dtype=qd.dtype)
    for r in range(extent):
        for s in range(extent):
            out[:, :, r * extent + s] = np.einsum(
                "bhdij,bhdij->bhij", qd, kd[:, :, :, r:r + s1, s:s + s2], optimize=True)
    _count_macs(b * h * d * extent * extent * s1 * s2)

    def bwd(g):
        dq = dk = None
        if q.requires_grad:
            dq = np.zeros_like(qd)
            for r in range(extent):
                for s in range(extent):
                    dq += g[:, :, r * extent + s, None] * kd[:, :, :, r:r + s1, s:s + s2]
        if k_pad.requires_grad:
            dk = np.zeros_like(kd)
            for r in range(extent):
                for s in range(extent):
                    dk[:, :, :, r:r + s1, s:s + s2] += g[:, :, r * extent + s, None] * qd
        return dq, dk

    return custom_op(out, (q, k_pad), bwd)


def window_gather(weights: Tensor, v_pad: Tensor, extent: int) -> Tensor:
    """Weighted sum of window cells: (B,H,e^2,S,S) weights over padded value
    maps (B,H,D,S+e-1,S+e-1) -> (B,H,D,S,S)."""
    b, h, e2, s1, s2 = weights.shape
    if e2 != extent * extent or v_pad.shape[3] != s1 + extent - 1:
        raise ShapeMismatch(f"window_gather shapes {weights.shape} vs {v_pad.shape}")
    d = v_pad.shape[2]
    wd, vd = weights.data, v_pad.data
    out = np.zeros((b, h, d, s1, s2), dtype=vd.dtype)
    for r in range(extent):
        for s in range(extent):
            out += wd[:, :, r * extent + s, None] * vd[:, :, :, r:r + s1, s:s + s2]
    _count_macs(b * h * d * extent * extent * s1 * s2)

    def bwd(g):
        dw = dv = None
        if weights.requires_grad:
            dw = np.empty_like(wd)
            for r in range(extent):
                for s in range(extent):
                    dw[:, :, r * extent + s] = np.einsum(
                        "bhdij,bhdij->bhij", g, vd[:, :, :, r:r + s1, s:s + s2], optimize=True)
        if v_pad.requires_grad:
            dv = np.zeros_like(vd)
            for r in range(extent):
                for s in range(extent):
                    dv[:, :, :, r:r + s1, s:s + s2] += wd[:, :, r * extent + s, None] * g
        return dw, dv

    return custom_op(out, (weights, v_pad), bwd)


# ---------------------------------------------------------------------------
# the layer
# ---------------------------------------------------------------------------

class AttentionLayer(Module):
    """Local self-attention with per-head projections and shared relative
    height/width embedding tables.

    Logits use the factorized form q.(k + rel) = q.k + q.rel, computed as a
    windowed content term plus one embedding matmul; the two are algebraically
    identical and the naive oracle checks the summed form.
    """

    def __init__(self, config: AttentionLayerConfig,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng()
        self.config = config
        cin, dh = config.in_channels, config.d_head
        table_len = 2 * config.input_size - 1
        std = 1.0 / np.sqrt(cin)

        def proj():
            return Tensor((rng.standard_normal((dh, cin)) * std).astype(dtype),
                          requires_grad=True)

        self.q = [proj() for _ in range(config.heads)]
        self.k = [proj() for _ in range(config.heads)]
        self.v = [proj() for _ in range(config.heads)]
        self.h_table = Tensor((rng.standard_normal((table_len, dh // 2)) * 0.1).astype(dtype),
                              requires_grad=True)
        self.w_table = Tensor((rng.standard_normal((table_len, dh // 2)) * 0.1).astype(dtype),
                              requires_grad=True)
        if config.variant == "adaptive":
            self.spans = [SpanParam(config.init_span, config.ramp, dtype=dtype)
                          for _ in range(config.heads)]
        else:
            self.spans = []

    def current_extent(self) -> int:
        """Working window extent; adaptive extents are capped at the embedding
        coverage 2*S-1 (cells past offset S-1 can never touch a real pixel)."""
        cfg = self.config
        if cfg.variant == "fixed":
            return cfg.fixed_extent
        extent = kernel_extent([sp.value for sp in self.spans], cfg.ramp, cfg.input_size)
        return min(extent, 2 * cfg.input_size - 1)

    def _masks(self, extent: int) -> Tensor:
        """(heads, 1, e^2) mask stack broadcastable over (B,H,S^2,e^2) logits."""
        cfg = self.config
        if cfg.variant == "fixed":
            return Tensor(np.ones((1, 1, extent * extent),
                                  dtype=self.q[0].dtype))
        grids = head_masks(self.spans, extent, input_size=(extent - 1) // 2)
        flat = stack([g.flat for g in grids], axis=0)
        return reshape(flat, (cfg.heads, 1, extent * extent))

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ChannelMismatch(
                f"expected (B,{cfg.in_channels},S,S), got {tuple(x.shape)}")
        if x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
            raise ShapeMismatch(
                f"layer built for {cfg.input_size}x{cfg.input_size} inputs, got {x.shape[2:]}")
        for sp in self.spans:
            sp.project_(cfg.input_size)

        b, _, s, _ = x.shape
        heads, dh = cfg.heads, cfg.d_head
        e = self.current_extent()
        pad = (e - 1) // 2

        x_flat = reshape(x, (b, cfg.in_channels, s * s))
        q = stack([matmul(w, x_flat) for w in self.q], axis=1)   # (B,H,dh,S^2)
        k = stack([matmul(w, x_flat) for w in self.k], axis=1)
        v = stack([matmul(w, x_flat) for w in self.v], axis=1)

        q5 = reshape(q, (b, heads, dh, s, s))
        k_pad = pad2d(reshape(k, (b, heads, dh, s, s)), pad)
        v_pad = pad2d(reshape(v, (b, heads, dh, s, s)), pad)

        content = window_dot(q5, k_pad, e)                       # (B,H,e^2,S,S)

        rel_h, rel_w = slice_relative_embeddings(self.h_table, self.w_table, e)
        rel = relative_matrix(rel_h, rel_w)                      # (e^2, dh)
        qt = transpose(q, (0, 1, 3, 2))                          # (B,H,S^2,dh)
        rel_logits = matmul(qt, transpose(rel, (1, 0)))          # (B,H,S^2,e^2)

        logits = add(transpose(reshape(content, (b, heads, e * e, s * s)),
                               (0, 1, 3, 2)), rel_logits)
        weights = softmax_masked(logits, self._masks(e), eps=MASK_EPS)
        w5 = reshape(transpose(weights, (0, 1, 3, 2)), (b, heads, e * e, s, s))

        y = window_gather(w5, v_pad, e)                          # (B,H,dh,S,S)
        out = reshape(y, (b, heads * dh, s, s))
        if cfg.stride == 2:
            out = avg_pool2d(out, 2)
        return out


def attention_forward(x: Tensor, layer: AttentionLayer) -> Tensor:
    """Vectorized layer application (see :class:`AttentionLayer`)."""
    return layer(x)


def attention_forward_naive(x: Tensor, layer: AttentionLayer) -> Tensor:
    """Literal per-pixel, per-head, per-cell transcription of the attention
    sum, in plain numpy. Semantics (zero padding, epsilon, max-shift) match
    the vectorized path exactly; used as its correctness oracle."""
    cfg = layer.config
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    if xd.ndim != 4 or xd.shape[1] != cfg.in_channels:
        raise ChannelMismatch(f"expected (B,{cfg.in_channels},S,S), got {xd.shape}")
    b, cin, s, _ = xd.shape
    heads, dh = cfg.heads, cfg.d_head

    if cfg.variant == "adaptive":
        zs = [min(max(sp.value, 0.0), float(cfg.input_size)) for sp in layer.spans]
        extent = min(kernel_extent(zs, cfg.ramp, cfg.input_size), 2 * cfg.input_size - 1)
    else:
        zs = []
        extent = cfg.fixed_extent
    half = (extent - 1) // 2

    table_len = layer.h_table.shape[0]
    start = (table_len - extent) // 2
    rel_h = layer.h_table.data[start:start + extent]
    rel_w = layer.w_table.data[start:start + extent]

    masks = np.ones((heads, extent, extent), dtype=xd.dtype)
    if cfg.variant == "adaptive":
        c = half
        d = np.maximum(np.abs(np.arange(extent) - c)[:, None],
                       np.abs(np.arange(extent) - c)[None, :])
        for hi, z in enumerate(zs):
            masks[hi] = np.clip((cfg.ramp + z - d) / cfg.ramp, 0.0, 1.0)

    out = np.zeros((b, heads * dh, s, s), dtype=xd.dtype)
    zero_pix = np.zeros(cin, dtype=xd.dtype)
    for bi in range(b):
        for hi in range(heads):
            wq = layer.q[hi].data
            wk = layer.k[hi].data
            wv = layer.v[hi].data
            for i in range(s):
                for j in range(s):
                    qvec = wq @ xd[bi, :, i, j]
                    logits = np.empty(extent * extent, dtype=xd.dtype)
                    vals = np.empty((extent * extent, dh), dtype=xd.dtype)
                    for r in range(extent):
                        for t in range(extent):
                            ri, tj = i + r - half, j + t - half
                            pix = xd[bi, :, ri, tj] if 0 <= ri < s and 0 <= tj < s else zero_pix
                            kvec = wk @ pix + np.concatenate([rel_w[t], rel_h[r]])
                            logits[r * extent + t] = qvec @ kvec
                            vals[r * extent + t] = wv @ pix
                    u = np.exp(logits - logits.max()) * masks[hi].reshape(-1)
                    wgt = u / (u.sum() + MASK_EPS)
                    out[bi, hi * dh:(hi + 1) * dh, i, j] = wgt @ vals
    if cfg.stride == 2:
        out = out.reshape(b, heads * dh, s // 2, 2, s // 2, 2).mean(axis=(3, 5))
    return Tensor(out)
