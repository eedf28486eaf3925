"""Proposal feature extraction and cross-modal fusion.

Both modality streams produce one feature map per image; for every proposal
the map region is max-pooled onto an S×S grid (local cube) and the whole map
onto a K×K grid (global cube). Streams are fused by channel concatenation
(RGB first), then two independent 1×1 embeddings map the fused channel count
to D for the attention modules.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, record_op, max_pool_window
from .errors import ContractError, DimensionError
from .instrumentation import counters


class Box:
    """Axis-aligned box in image pixel coordinates, x1 <= x2 and y1 <= y2."""

    __slots__ = ("x1", "y1", "x2", "y2")

    def __init__(self, x1: float, y1: float, x2: float, y2: float):
        if x2 < x1 or y2 < y1:
            raise ContractError(f"box corners out of order: ({x1},{y1},{x2},{y2})")
        self.x1, self.y1, self.x2, self.y2 = float(x1), float(y1), float(x2), float(y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def clip(self, width: float, height: float) -> "Box":
        return Box(min(max(self.x1, 0.0), width), min(max(self.y1, 0.0), height),
                   min(max(self.x2, 0.0), width), min(max(self.y2, 0.0), height))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def __repr__(self):
        return f"Box({self.x1:g}, {self.y1:g}, {self.x2:g}, {self.y2:g})"

    def __eq__(self, other):
        return isinstance(other, Box) and self.as_tuple() == other.as_tuple()


@dataclass
class FusedFeatures:
    """Per-proposal feature bundle consumed by the attention modules.

    ``global_slices`` holds the embedded global cube as a [K*K, D] matrix whose
    row i is the channel fiber at row-major spatial cell i; ``z`` is the
    global-average-pooled local embedding.
    """
    local: Tensor            # fused local cube, pre-embedding
    global_: Tensor          # fused global cube, pre-embedding
    local_embedded: Tensor   # [D, S, S]
    global_slices: Tensor    # [K*K, D]
    z: Tensor                # [D]


def roi_cells(roi: Box, spatial_scale: float, h: int, w: int) -> tuple[int, int, int, int]:
    """Map an image-space box to an inclusive-start/exclusive-stop cell span.

    floor on the near corner, ceil on the far corner, clipped to the map. A
    scaled roi covering less than one cell of area collapses to the single
    cell containing its center; empty spans widen to one cell.
    """
    sx1, sy1 = roi.x1 * spatial_scale, roi.y1 * spatial_scale
    sx2, sy2 = roi.x2 * spatial_scale, roi.y2 * spatial_scale
    if (sx2 - sx1) * (sy2 - sy1) < 1.0:
        cx = min(max(int(np.floor((sx1 + sx2) / 2.0)), 0), w - 1)
        cy = min(max(int(np.floor((sy1 + sy2) / 2.0)), 0), h - 1)
        return cy, cy + 1, cx, cx + 1
    x1 = min(max(int(np.floor(sx1)), 0), w - 1)
    y1 = min(max(int(np.floor(sy1)), 0), h - 1)
    x2 = min(max(int(np.ceil(sx2)), x1 + 1), w)
    y2 = min(max(int(np.ceil(sy2)), y1 + 1), h)
    return y1, y2, x1, x2


def roi_pool_batch(feature: Tensor, rois: list[Box], spatial_scale: float,
                   out_size: int) -> Tensor:
    """Pool every roi of one image in a single tape node -> [B, C, S, S]."""
    c, h, w = feature.data.shape
    n = len(rois)
    vals = np.empty((n, c, out_size, out_size))
    flat = np.empty((n, c, out_size, out_size), dtype=np.int64)
    for b, roi in enumerate(rois):
        y1, y2, x1, x2 = roi_cells(roi, spatial_scale, h, w)
        v, f = max_pool_window(feature.data[:, y1:y2, x1:x2], out_size, out_size)
        rw = x2 - x1
        vals[b] = v
        flat[b] = (y1 + f // rw) * w + (x1 + f % rw)
    cidx = np.arange(c)[None, :, None, None]

    def bwd(g):
        df = np.zeros((c, h * w))
        np.add.at(df, (cidx, flat), g)
        return (df.reshape(c, h, w),)

    return record_op((feature,), vals, bwd)


def roi_pool(feature: Tensor, roi: Box, spatial_scale: float, out_size: int) -> Tensor:
    """Max-pool one proposal's map region onto an S×S grid -> [C, S, S]."""
    out = roi_pool_batch(feature, [roi], spatial_scale, out_size)
    return ad.reshape(out, out.data.shape[1:])


def pool_global(feature: Tensor, k: int) -> Tensor:
    """Whole-map adaptive max pool to K×K."""
    _, h, w = feature.data.shape
    if k > min(h, w):
        raise DimensionError(f"pool_global: K={k} exceeds map extent ({h},{w})")
    return ad.adaptive_max_pool(feature, k, k)


def fuse(rgb: Tensor | None, depth: Tensor | None) -> Tensor:
    """Channel-concatenate modality features, RGB channels first.

    Either stream may be absent (None or zero channels); the other passes
    through unchanged. Works on [C,H,W] and batched [B,C,H,W] cubes.
    """
    parts = []
    for t in (rgb, depth):
        if t is not None and t.data.shape[t.data.ndim - 3] > 0:
            parts.append(t)
    if not parts:
        raise ContractError("fuse: both streams absent")
    if len(parts) == 1:
        return parts[0]
    a, b = parts
    if a.data.shape[-2:] != b.data.shape[-2:] or a.data.ndim != b.data.ndim:
        raise DimensionError(
            f"fuse: spatial extents differ, {a.data.shape} vs {b.data.shape}")
    counters.fusion_calls += 1
    return ad.concat(parts, axis=a.data.ndim - 3)


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """1×1 convolution as a channel matmul; weight is [C_in, C_out].

    Accepts [C,H,W] or [B,C,H,W]; spatial extents pass through.
    """
    shp = x.data.shape
    cin = weight.data.shape[0]
    if shp[x.data.ndim - 3] != cin:
        raise DimensionError(f"conv1x1: input channels {shp} vs weight {weight.data.shape}")
    cout = weight.data.shape[1]
    if x.data.ndim == 3:
        c, h, w = shp
        flat = ad.transpose(ad.reshape(x, (c, h * w)), (1, 0))       # [HW, C]
        out = ad.add(ad.matmul(flat, weight), bias)                  # [HW, D]
        return ad.reshape(ad.transpose(out, (1, 0)), (cout, h, w))
    b, c, h, w = shp
    flat = ad.reshape(ad.transpose(ad.reshape(x, (b, c, h * w)), (0, 2, 1)),
                      (b * h * w, c))
    out = ad.add(ad.matmul(flat, weight), bias)
    return ad.reshape(ad.transpose(ad.reshape(out, (b, h * w, cout)), (0, 2, 1)),
                      (b, cout, h, w))


def slice_features(cube: Tensor) -> Tensor:
    """Unroll a [D,K,K] cube into a [K*K, D] matrix of row-major cell fibers."""
    d, kh, kw = cube.data.shape
    return ad.transpose(ad.reshape(cube, (d, kh * kw)), (1, 0))


def unslice_features(slices: Tensor, k: int) -> Tensor:
    """Inverse of slice_features (round-trip helper)."""
    n, d = slices.data.shape
    return ad.reshape(ad.transpose(slices, (1, 0)), (d, k, k))


def embed_context(global_fused: Tensor, local_fused: Tensor,
                  w_global: Tensor, b_global: Tensor,
                  w_local: Tensor, b_local: Tensor) -> FusedFeatures:
    """Embed both fused cubes to D channels and derive slices and z.

    Separate 1×1 embeddings for the global and local paths; z is the
    global average pool of the embedded local cube.
    """
    global_embedded = conv1x1(global_fused, w_global, b_global)
    local_embedded = conv1x1(local_fused, w_local, b_local)
    z = ad.mean_axes(local_embedded, (1, 2))
    return FusedFeatures(local=local_fused, global_=global_fused,
                         local_embedded=local_embedded,
                         global_slices=slice_features(global_embedded), z=z)
