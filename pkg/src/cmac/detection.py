"""Detection heads: class scores, box regression, targets, loss, ROI sampling.

Classification sees both the local descriptor F_L and the global context
descriptor F_G; box regression deliberately sees only F_L, so no regression
gradient ever reaches the global branch.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, SamplingError
from .fusion import Box

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
FG_IOU = 0.5
BG_IOU_LO = 0.1


@dataclass
class HeadParams:
    cls_w: Tensor  # [2*d_fc, C+1]
    cls_b: Tensor
    loc_w: Tensor  # [d_fc, 4*C]
    loc_b: Tensor


@dataclass
class RoiSample:
    """One sampled training ROI: label u (0 = background) and, for
    foreground, the regression target v against its matched ground truth."""
    box: Box
    u: int
    v: np.ndarray | None
    is_foreground: bool


def _rows(x: Tensor) -> tuple[Tensor, bool]:
    if x.data.ndim == 2:
        return x, True
    if x.data.ndim == 1:
        return ad.reshape(x, (1, x.data.shape[0])), False
    raise ContractError(f"expected a vector or row batch, got shape {x.data.shape}")


def classify(f_l: Tensor, f_g: Tensor | None, params: HeadParams) -> Tensor:
    """Per-class probabilities from one affine layer over [F_L; F_G] + softmax.

    f_g may be None (global path disabled); the affine then reads F_L alone
    and cls_w must be sized accordingly.
    """
    a, batched = _rows(f_l)
    if f_g is not None:
        a = ad.concat([a, _rows(f_g)[0]], axis=1)
    logits = ad.add(ad.matmul(a, params.cls_w), params.cls_b)
    p = ad.softmax(logits)
    return p if batched else ad.reshape(p, (p.data.shape[1],))


def regress(f_l: Tensor, params: HeadParams) -> Tensor:
    """Class-specific offsets, 4 per foreground class, from F_L alone."""
    a, batched = _rows(f_l)
    t = ad.add(ad.matmul(a, params.loc_w), params.loc_b)
    return t if batched else ad.reshape(t, (t.data.shape[1],))


def _center_size(box: Box) -> tuple[float, float, float, float]:
    cx, cy = box.center()
    return cx, cy, box.width, box.height


def encode_targets(proposal: Box, gt: Box) -> np.ndarray:
    """Regression target (dx, dy, dw, dh) of gt relative to the proposal."""
    for name, b in (("proposal", proposal), ("gt", gt)):
        if b.width <= 0.0 or b.height <= 0.0:
            raise ContractError(f"encode_targets: {name} box has nonpositive size "
                                f"{b.width} x {b.height}")
    px, py, pw, ph = _center_size(proposal)
    gx, gy, gw, gh = _center_size(gt)
    return np.array([(gx - px) / pw, (gy - py) / ph, np.log(gw / pw), np.log(gh / ph)])


def decode_box(proposal: Box, offsets) -> Box:
    """Inverse of encode_targets; the caller clips to image bounds if needed."""
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.shape != (4,) or not np.all(np.isfinite(offsets)):
        raise ContractError(f"decode_box: need 4 finite offsets, got {offsets}")
    px, py, pw, ph = _center_size(proposal)
    cx = px + offsets[0] * pw
    cy = py + offsets[1] * ph
    w = pw * np.exp(offsets[2])
    h = ph * np.exp(offsets[3])
    return Box(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)


def class_nll(p: Tensor, u: int) -> Tensor:
    """-ln p_u with the probability floored at 1e-12 before the log."""
    row, _ = _rows(p)
    if not 0 <= u < row.data.shape[1]:
        raise ContractError(f"label {u} outside 0..{row.data.shape[1] - 1}")
    pu = ad.slice_last(row, u, u + 1)
    if float(pu.data[0, 0]) < PROB_FLOOR:
        log.warning("class probability %.3g clamped to %.0e before log",
                    float(pu.data[0, 0]), PROB_FLOOR)
    return ad.scale(ad.sum_all(ad.log(ad.clamp_min(pu, PROB_FLOOR))), -1.0)


def multitask_loss(p: Tensor, u: int, t_u: Tensor | None, v) -> Tensor:
    """Per-ROI loss: -ln p_u, plus the smooth-L1 box term when u >= 1.

    A background ROI takes exactly the class_nll code path, so its loss is
    bitwise equal to plain cross-entropy.
    """
    l_cls = class_nll(p, u)
    if u == 0:
        return l_cls
    if t_u is None or v is None:
        raise ContractError("foreground loss needs t_u and v")
    diff = ad.sub(ad.reshape(t_u, (4,)), ad.const(np.asarray(v, dtype=np.float64)))
    return ad.add(l_cls, ad.sum_all(ad.smooth_l1(diff)))


def select_class_offsets(t_star: Tensor, labels) -> Tensor:
    """Pick each row's 4-offset block for its (foreground) class label."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.size != t_star.data.shape[0]:
        raise ContractError(f"labels shape {labels.shape} does not match "
                            f"{t_star.data.shape[0]} rows")
    if labels.size and labels.min() < 1:
        raise ContractError("select_class_offsets: background label has no offsets")
    cols = (labels[:, None] - 1) * 4 + np.arange(4)[None, :]
    return ad.gather_last(t_star, cols)


def detection_loss(probs: Tensor, labels, t_star: Tensor, targets) -> tuple[Tensor, float, float]:
    """Minibatch loss: mean over ROIs of the per-ROI multi-task loss.

    targets rows are consulted only where labels >= 1.  Returns the scalar
    loss tensor plus float class/box components for logging.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    if probs.data.shape[0] != n or t_star.data.shape[0] != n:
        raise ContractError(f"batch size mismatch: {probs.data.shape[0]} probs, "
                            f"{t_star.data.shape[0]} offsets, {n} labels")
    pu = ad.gather_last(probs, labels[:, None])
    low = int((pu.data < PROB_FLOOR).sum())
    if low:
        log.warning("%d class probabilities clamped to %.0e before log", low, PROB_FLOOR)
    l_cls = ad.scale(ad.sum_all(ad.log(ad.clamp_min(pu, PROB_FLOOR))), -1.0 / n)

    fg = np.flatnonzero(labels >= 1)
    if fg.size == 0:
        return l_cls, float(l_cls.data), 0.0
    t_u = select_class_offsets(ad.take_rows(t_star, fg), labels[fg])
    v = np.asarray(targets, dtype=np.float64)[fg]
    l_loc = ad.scale(ad.sum_all(ad.smooth_l1(ad.sub(t_u, ad.const(v)))), 1.0 / n)
    total = ad.add(l_cls, l_loc)
    return total, float(l_cls.data), float(l_loc.data)


# ---------------------------------------------------------------------------
# ROI sampling
# ---------------------------------------------------------------------------

def _boxes_array(boxes) -> np.ndarray:
    return np.array([[b.x1, b.y1, b.x2, b.y2] for b in boxes], dtype=np.float64)


def _iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    iw = np.maximum(ix2 - ix1, 0.0)
    ih = np.maximum(iy2 - iy1, 0.0)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0.0, inter / np.maximum(union, 1e-300), 0.0)


def split_pools(proposals, gts) -> tuple[list[RoiSample], list[RoiSample]]:
    """Assign each proposal to the foreground or background candidate pool.

    gts is a sequence of (Box, class) pairs with class >= 1.  A foreground
    proposal takes the class of its argmax-IoU ground truth (first on ties)
    and an encoded regression target against it; proposals below the
    background floor fall out entirely.
    """
    if not proposals or not gts:
        return [], []
    iou = _iou_matrix(_boxes_array(proposals), _boxes_array([g[0] for g in gts]))
    best = iou.argmax(axis=1)
    best_iou = iou[np.arange(len(proposals)), best]
    fg, bg = [], []
    for i, p in enumerate(proposals):
        if best_iou[i] >= FG_IOU:
            gt_box, gt_cls = gts[best[i]]
            if gt_cls < 1:
                raise ContractError(f"ground-truth class {gt_cls} is not a foreground label")
            fg.append(RoiSample(box=p, u=int(gt_cls),
                                v=encode_targets(p, gt_box), is_foreground=True))
        elif best_iou[i] >= BG_IOU_LO:
            bg.append(RoiSample(box=p, u=0, v=None, is_foreground=False))
    return fg, bg


def _draw(pool: list, quota: int, rng, repeat: bool) -> list:
    if quota <= 0 or not pool:
        return []
    if len(pool) >= quota:
        idx = rng.choice(len(pool), size=quota, replace=False)
        return [pool[i] for i in idx]
    if not repeat:
        return list(pool)
    extra = rng.choice(len(pool), size=quota - len(pool), replace=True)
    return list(pool) + [pool[i] for i in extra]


def sample_rois(proposals, gts, batch_size: int, fg_fraction: float, rng,
                image_id: str = "?") -> list[RoiSample]:
    """Draw one image's training ROIs: fg quota first, background fills the rest.

    A short foreground pool is topped up by repeat-sampling; a short
    background pool shrinks the batch instead of mislabeling foreground.
    """
    quota = batch_size * fg_fraction
    n_fg = int(round(quota))
    if abs(quota - n_fg) > 1e-9:
        raise ContractError(f"batch_size*fg_fraction = {quota} is not an integer")
    fg_pool, bg_pool = split_pools(proposals, gts)
    if not fg_pool and not bg_pool:
        raise SamplingError(f"image {image_id}: no proposal overlaps any ground truth "
                            f"above the background floor {BG_IOU_LO}")
    fg = _draw(fg_pool, n_fg, rng, repeat=True)
    bg = _draw(bg_pool, batch_size - len(fg), rng, repeat=False)
    if len(fg) + len(bg) < batch_size:
        log.info("image %s: batch shrunk to %d (fg pool %d, bg pool %d)",
                 image_id, len(fg) + len(bg), len(fg_pool), len(bg_pool))
    return fg + bg


def sample_training_batch(per_image, batch_size: int, fg_fraction: float,
                          rng) -> list[tuple[int, RoiSample]]:
    """Pool candidates across the images of one iteration and draw the batch.

    per_image is a list of (proposals, gts) pairs.  The foreground quota is
    filled across the pooled candidates (repeat-sampled when scarce, an error
    when empty); background fills the remainder without replacement, capped
    per image at batch_size // len(per_image) so one crowded image cannot
    dominate.  Returns (image_index, sample) pairs.
    """
    if not per_image:
        raise SamplingError("no images to sample from")
    quota = batch_size * fg_fraction
    n_fg = int(round(quota))
    if abs(quota - n_fg) > 1e-9:
        raise ContractError(f"batch_size*fg_fraction = {quota} is not an integer")
    fg_pool: list[tuple[int, RoiSample]] = []
    bg_pool: list[tuple[int, RoiSample]] = []
    for idx, (proposals, gts) in enumerate(per_image):
        fg, bg = split_pools(proposals, gts)
        fg_pool.extend((idx, s) for s in fg)
        bg_pool.extend((idx, s) for s in bg)
    if not fg_pool:
        raise SamplingError(f"no foreground candidates in any of {len(per_image)} images")

    fg = _draw(fg_pool, n_fg, rng, repeat=True)
    cap = max(1, batch_size // len(per_image))
    counts = np.zeros(len(per_image), dtype=np.int64)
    for idx, _ in fg:
        counts[idx] += 1

    bg: list[tuple[int, RoiSample]] = []
    want = batch_size - len(fg)
    for j in rng.permutation(len(bg_pool)):
        if len(bg) >= want:
            break
        idx, s = bg_pool[j]
        if counts[idx] >= cap:
            continue
        counts[idx] += 1
        bg.append((idx, s))
    if len(fg) + len(bg) < batch_size:
        log.info("batch shrunk to %d (fg pool %d, bg pool %d, cap %d)",
                 len(fg) + len(bg), len(fg_pool), len(bg_pool), cap)
    return fg + bg
