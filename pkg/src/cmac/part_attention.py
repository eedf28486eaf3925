"""Part attention: parallel restricted-affine spatial transformers.

Each transformer predicts a translation from the pooled proposal feature,
resamples a half-scale window of the proposal map at that offset, and the
normalized part windows are concatenated with the proposal map itself and
reduced to the enhanced local descriptor F_L.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError
from .fusion import conv1x1
from .instrumentation import counters, margin_probe

# the sampling window is fixed at half scale; bounding |t| by 0.5 then keeps
# every support pixel inside the source map
WINDOW_SCALE = 0.5
T_BOUND = 0.5


@dataclass
class StnParams:
    """Localization MLP of one transformer: pooled feature -> raw (t_x, t_y)."""
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class LocalAssemblyParams:
    reduce_w: Tensor  # [(N+1)*D, D] channel mix applied per spatial cell
    reduce_b: Tensor
    fc1_w: Tensor     # [D*S*S, d_fc]
    fc1_b: Tensor
    fc2_w: Tensor     # [d_fc, d_fc]
    fc2_b: Tensor


@dataclass
class SampleGrid:
    """Normalized source coordinates, one (x, y) pair per output cell."""
    xs: Tensor  # [B, S, S]
    ys: Tensor  # [B, S, S]


def _promote(x: Tensor) -> tuple[Tensor, bool]:
    if x.data.ndim == 4:
        return x, True
    if x.data.ndim == 3:
        return ad.reshape(x, (1,) + x.data.shape), False
    raise DimensionError(f"expected [D,S,S] or [B,D,S,S], got shape {x.data.shape}")


def localize(local_embedded: Tensor, params: StnParams) -> Tensor:
    """Predict one transformer's window translation from the proposal map.

    Returns [B, 2] rows (t_x, t_y) = 0.5 * tanh(mlp(v)) with v the spatial
    average of the map, so translations always stay within +-0.5.
    """
    x, _ = _promote(local_embedded)
    v = ad.mean_axes(x, (2, 3))
    h = ad.tanh(ad.add(ad.matmul(v, params.w1), params.b1))
    raw = ad.add(ad.matmul(h, params.w2), params.b2)
    return ad.scale(ad.tanh(raw), T_BOUND)


def lattice(s: int) -> np.ndarray:
    """S normalized target coordinates spanning [-1, 1]; a single cell sits at 0."""
    if s < 1:
        raise ContractError(f"lattice size must be >= 1, got {s}")
    if s == 1:
        return np.zeros(1)
    return np.linspace(-1.0, 1.0, s)


def build_affine_grid(t: Tensor, s: int, window_scale: float = WINDOW_SCALE) -> SampleGrid:
    """Map the S x S target lattice through [[scale, 0, t_x], [0, scale, t_y]].

    t holds [B, 2] translations with |t| <= 0.5. window_scale is fixed at 0.5
    in the model; other values exist only for tests (1.0 with t = 0 is the
    identity grid).
    """
    if t.data.ndim != 2 or t.data.shape[1] != 2:
        raise DimensionError(f"translations must be [B, 2], got {t.data.shape}")
    if np.abs(t.data).max(initial=0.0) > T_BOUND + 1e-12:
        raise ContractError(
            f"translation magnitude {np.abs(t.data).max():.6g} exceeds {T_BOUND}")
    b = t.data.shape[0]
    lat = lattice(s)
    base_x = ad.const(np.broadcast_to(lat[None, :] * window_scale, (s, s)).copy())
    base_y = ad.const(np.broadcast_to(lat[:, None] * window_scale, (s, s)).copy())
    tx = ad.reshape(ad.slice_last(t, 0, 1), (b, 1, 1))
    ty = ad.reshape(ad.slice_last(t, 1, 2), (b, 1, 1))
    return SampleGrid(xs=ad.add(base_x, tx), ys=ad.add(base_y, ty))


def bilinear_sample(u: Tensor, grid: SampleGrid) -> Tensor:
    """Sample u at the grid's normalized coordinates with bilinear weights.

    Coordinates map to pixel space as p = (coord + 1)/2 * (size - 1).  A
    corner falling outside the map contributes with weight zero rather than
    being clamped, so a coordinate of exactly +1 reads only the edge pixel.
    Differentiable in both the map and the grid (hence in the translations).
    """
    uu, batched = _promote(u)
    xs, ys = grid.xs, grid.ys
    gx, gy = xs.data, ys.data
    for c in (gx, gy):
        if c.size and (c.min() < -1.0 or c.max() > 1.0):
            raise ContractError(
                f"grid coordinate outside [-1, 1]: min {c.min():.6g} max {c.max():.6g}")
    b, d, hh, ww = uu.data.shape
    if gx.shape != gy.shape or gx.ndim != 3 or gx.shape[0] != b:
        raise DimensionError(
            f"grid shape {gx.shape}/{gy.shape} does not match batch {b}")

    px = (gx + 1.0) * (0.5 * (ww - 1))
    py = (gy + 1.0) * (0.5 * (hh - 1))
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    if margin_probe.active and px.size:
        fr = np.concatenate([(px - x0).ravel(), (py - y0).ravel()])
        margin_probe.add("bilinear", float(np.minimum(fr, 1.0 - fr).min()))
        margin_probe.branch("bilinear", np.concatenate([x0.ravel(), y0.ravel()]))
    fx, fy = px - x0, py - y0
    xc, wx = (x0, x0 + 1), (1.0 - fx, fx)
    yc, wy = (y0, y0 + 1), (1.0 - fy, fy)
    xv = tuple((c >= 0) & (c < ww) for c in xc)
    yv = tuple((c >= 0) & (c < hh) for c in yc)
    xsafe = tuple(np.clip(c, 0, ww - 1) for c in xc)
    ysafe = tuple(np.clip(c, 0, hh - 1) for c in yc)

    ut = uu.data.transpose(0, 2, 3, 1)  # [B, H, W, D] for pointwise gathers
    bi = np.arange(b)[:, None, None]
    val = [[ut[bi, ysafe[iy], xsafe[ix]] * (yv[iy] & xv[ix])[..., None]
            for ix in range(2)] for iy in range(2)]
    out_t = (wy[0] * wx[0])[..., None] * val[0][0] + (wy[0] * wx[1])[..., None] * val[0][1] \
        + (wy[1] * wx[0])[..., None] * val[1][0] + (wy[1] * wx[1])[..., None] * val[1][1]
    counters.stn_transforms += 1

    def bwd(g):
        gt = g.transpose(0, 2, 3, 1)
        dut = np.zeros_like(ut)
        for iy in range(2):
            for ix in range(2):
                w = wy[iy] * wx[ix] * (yv[iy] & xv[ix])
                np.add.at(dut, (bi, ysafe[iy], xsafe[ix]), gt * w[..., None])
        dv_dpx = wy[0][..., None] * (val[0][1] - val[0][0]) \
            + wy[1][..., None] * (val[1][1] - val[1][0])
        dv_dpy = wx[0][..., None] * (val[1][0] - val[0][0]) \
            + wx[1][..., None] * (val[1][1] - val[0][1])
        dgx = (gt * dv_dpx).sum(axis=3) * (0.5 * (ww - 1))
        dgy = (gt * dv_dpy).sum(axis=3) * (0.5 * (hh - 1))
        return dut.transpose(0, 3, 1, 2), dgx, dgy

    out = ad.record_op((uu, xs, ys), np.ascontiguousarray(out_t.transpose(0, 3, 1, 2)), bwd)
    if not batched:
        return ad.reshape(out, out.data.shape[1:])
    return out


def normalize_parts(tensors: list[Tensor], eps: float = 1e-8) -> list[Tensor]:
    """Scale each tensor to unit L2 norm (per proposal when batched)."""
    return [ad.l2_normalize(t, eps) if t.data.ndim == 3 else ad.l2_normalize_rows(t, eps)
            for t in tensors]


def assemble_local(local_embedded: Tensor, parts: list[Tensor],
                   params: LocalAssemblyParams) -> Tensor:
    """Build F_L: normalize, channel-concat, 1x1-reduce, flatten, two fc+relu.

    Accepts zero parts (attention disabled), in which case F_L is computed
    from the proposal map alone.
    """
    x, batched = _promote(local_embedded)
    promoted = [x]
    for p in parts:
        pp, _ = _promote(p)
        if pp.data.shape != x.data.shape:
            raise DimensionError(
                f"part shape {pp.data.shape} != local shape {x.data.shape}")
        promoted.append(pp)
    normed = normalize_parts(promoted)
    mid = normed[0] if len(normed) == 1 else ad.concat(normed, axis=1)
    reduced = conv1x1(mid, params.reduce_w, params.reduce_b)
    b, d, s1, s2 = reduced.data.shape
    flat = ad.reshape(reduced, (b, d * s1 * s2))
    h1 = ad.relu(ad.add(ad.matmul(flat, params.fc1_w), params.fc1_b))
    out = ad.relu(ad.add(ad.matmul(h1, params.fc2_w), params.fc2_b))
    if not batched:
        return ad.reshape(out, (out.data.shape[1],))
    return out


def run_part_attention(local_embedded: Tensor, stns: list[StnParams],
                       assembly: LocalAssemblyParams) -> tuple[Tensor, list[Tensor]]:
    """Full local branch over a proposal batch.

    Returns (F_L, translations); translations[i] is transformer i's [B, 2]
    output, kept as tape tensors so window positions stay inspectable.
    """
    x, batched = _promote(local_embedded)
    s = x.data.shape[-1]
    parts, ts = [], []
    for p in stns:
        t = localize(x, p)
        grid = build_affine_grid(t, s)
        parts.append(bilinear_sample(x, grid))
        ts.append(t)
    f_l = assemble_local(x, parts, assembly)
    if not batched:
        f_l = ad.reshape(f_l, (f_l.data.shape[1],))
    return f_l, ts
