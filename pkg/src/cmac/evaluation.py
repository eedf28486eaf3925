"""Detection metrics (IoU, NMS, AP/mAP) and inspection exports.

AP follows the PASCAL greedy-matching protocol: detections sorted by
descending score each claim their argmax-IoU ground truth; a already-claimed
or under-threshold match counts as a false positive.  The default AP variant
integrates the monotone precision envelope over all points; the 11-point
variant is available behind the ``variant`` switch.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, EvaluationError
from .fusion import Box

log = logging.getLogger(__name__)

AP_VARIANTS = ("all", "voc07")


@dataclass
class Detection:
    box: Box
    cls: int
    score: float


def iou(a: Box, b: Box) -> float:
    """Intersection over union with (x2-x1)*(y2-y1) areas; 0 when disjoint."""
    if a.area <= 0.0 or b.area <= 0.0:
        log.warning("iou of zero-area box %s / %s -> 0", a, b)
        return 0.0
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def nms(dets: list[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy per-class suppression.

    Score ties keep the earlier input index, so the result is independent of
    any stable pre-ordering of the input.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ContractError(f"nms threshold must be in (0,1), got {iou_thresh}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    keep: list[int] = []
    for i in order:
        d = dets[i]
        if all(dets[j].cls != d.cls or iou(dets[j].box, d.box) <= iou_thresh
               for j in keep):
            keep.append(i)
    return [dets[i] for i in sorted(keep)]


def _match_flags(dets: list[Detection], gt_boxes: list[Box],
                 iou_thresh: float) -> tuple[np.ndarray, np.ndarray]:
    """Greedy TP/FP flags for one class in one image namespace."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    scores = np.array([dets[i].score for i in order])
    tp = np.zeros(len(order), dtype=bool)
    claimed = [False] * len(gt_boxes)
    for rank, i in enumerate(order):
        if not gt_boxes:
            continue
        overlaps = [iou(dets[i].box, g) for g in gt_boxes]
        j = int(np.argmax(overlaps))
        if overlaps[j] >= iou_thresh and not claimed[j]:
            claimed[j] = True
            tp[rank] = True
    return scores, tp


def _ap_from_counts(scores: np.ndarray, tp: np.ndarray, n_gt: int,
                    variant: str) -> float:
    if variant not in AP_VARIANTS:
        raise ContractError(f"unknown AP variant {variant!r}; options {AP_VARIANTS}")
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = tp[order]
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(~tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)
    if variant == "voc07":
        ap = 0.0
        for r in np.linspace(0.0, 1.0, 11):
            mask = recall >= r - 1e-12
            ap += (precision[mask].max() if mask.any() else 0.0) / 11.0
        return float(ap)
    # monotone envelope over all points
    env = np.maximum.accumulate(precision[::-1])[::-1]
    r_prev = 0.0
    ap = 0.0
    for k in range(len(env)):
        ap += (recall[k] - r_prev) * env[k]
        r_prev = recall[k]
    return float(ap)


def average_precision(dets: list[Detection], gts, cls: int,
                      iou_thresh: float = 0.5, variant: str = "all") -> float | None:
    """AP of one class over one image namespace; None when no gt defines it.

    dets may hold any classes (others are ignored); gts is a sequence of
    (Box, class) pairs.
    """
    gt_boxes = [b for b, c in gts if c == cls]
    if not gt_boxes:
        log.warning("AP undefined for class %d: no ground truth", cls)
        return None
    mine = [d for d in dets if d.cls == cls]
    scores, tp = _match_flags(mine, gt_boxes, iou_thresh)
    return _ap_from_counts(scores, tp, len(gt_boxes), variant)


def dataset_average_precision(dets_per_image: list[list[Detection]],
                              gts_per_image, cls: int, iou_thresh: float = 0.5,
                              variant: str = "all") -> float | None:
    """AP of one class pooled over a dataset (matching stays per image)."""
    n_gt = sum(sum(1 for _, c in gts if c == cls) for gts in gts_per_image)
    if n_gt == 0:
        log.warning("AP undefined for class %d: no ground truth in dataset", cls)
        return None
    all_scores, all_tp = [], []
    for dets, gts in zip(dets_per_image, gts_per_image):
        mine = [d for d in dets if d.cls == cls]
        scores, tp = _match_flags(mine, [b for b, c in gts if c == cls], iou_thresh)
        all_scores.append(scores)
        all_tp.append(tp)
    return _ap_from_counts(np.concatenate(all_scores), np.concatenate(all_tp),
                           n_gt, variant)


def mean_ap(per_class_ap: dict) -> float:
    """Arithmetic mean over classes whose AP is defined."""
    defined = {c: ap for c, ap in per_class_ap.items() if ap is not None}
    skipped = sorted(set(per_class_ap) - set(defined))
    if skipped:
        log.warning("mAP excludes classes with undefined AP: %s", skipped)
    if not defined:
        raise EvaluationError("mAP undefined: no class has any ground truth")
    return float(np.mean(list(defined.values())))


def evaluate(dets_per_image, gts_per_image, num_classes: int,
             iou_thresh: float = 0.5, variant: str = "all") -> tuple[dict, float]:
    """Per-class dataset AP plus mAP for classes 1..num_classes."""
    per_class = {c: dataset_average_precision(dets_per_image, gts_per_image, c,
                                              iou_thresh, variant)
                 for c in range(1, num_classes + 1)}
    return per_class, mean_ap(per_class)


# ---------------------------------------------------------------------------
# inspection exports
# ---------------------------------------------------------------------------

def attention_to_gray(alpha: np.ndarray, image_size: int) -> np.ndarray:
    """K^2 attention weights -> 8-bit grayscale image, nearest upsampling.

    Quantization is q = round(255 * alpha): weights live in [0, 1], so the
    gray level encodes absolute attention mass, not a per-image rescale.
    """
    alpha = np.asarray(alpha, dtype=np.float64).ravel()
    k = int(round(np.sqrt(alpha.size)))
    if k * k != alpha.size or k < 1:
        raise ContractError(f"attention vector length {alpha.size} is not square")
    grid = alpha.reshape(k, k)
    idx = (np.arange(image_size) * k) // image_size
    up = grid[np.ix_(idx, idx)]
    return np.clip(np.round(255.0 * up), 0, 255).astype(np.uint8)


def export_attention_map(trace, image_size: int, path, parts=None, roi: Box | None = None,
                         row: int = 0) -> None:
    """Write the final-step attention map as a binary P5 graymap.

    trace is the recurrence trace of one proposal batch; ``row`` picks the
    proposal.  When ``parts`` (per-transformer [B,2] translations) and the
    proposal's image-space box are given, the sampled part windows go to a
    ``<path>.parts`` sidecar as ``index x1 y1 x2 y2`` lines.
    """
    if not getattr(trace, "alphas", None):
        raise ContractError("attention trace is empty")
    alpha = np.asarray(trace.alphas[-1])
    if alpha.ndim != 2 or not 0 <= row < alpha.shape[0]:
        raise ContractError(f"trace row {row} out of range for {alpha.shape}")
    gray = attention_to_gray(alpha[row], image_size)
    header = f"P5\n{image_size} {image_size}\n255\n".encode("ascii")
    try:
        with open(path, "wb") as f:
            f.write(header + gray.tobytes())
        if parts is not None and roi is not None:
            with open(f"{path}.parts", "w") as f:
                for i, t in enumerate(parts):
                    arr = t.data if hasattr(t, "data") else np.asarray(t)
                    r = _window_in_image(roi, float(arr[row, 0]), float(arr[row, 1]))
                    f.write(f"{i} {r.x1!r} {r.y1!r} {r.x2!r} {r.y2!r}\n")
    except OSError as e:
        raise EvaluationError(f"cannot write attention map to {path}: {e}") from None


def _window_in_image(roi: Box, t_x: float, t_y: float,
                     window_scale: float = 0.5) -> Box:
    """Image-space rectangle a transformer window covers.

    Normalized ROI coords span [-1,1] over the box, so an offset t moves the
    window center by t * half_extent and the window half-width is
    window_scale * half_extent.
    """
    def span(lo, hi, t):
        c, half = (lo + hi) / 2.0, (hi - lo) / 2.0
        center = c + t * half
        return center - window_scale * half, center + window_scale * half

    x1, x2 = span(roi.x1, roi.x2, t_x)
    y1, y2 = span(roi.y1, roi.y2, t_y)
    return Box(x1, y1, x2, y2)


def read_graymap(path) -> np.ndarray:
    """Read back a binary P5 file written by export_attention_map."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        dims = f.readline().split()
        maxval = f.readline().strip()
        if magic != b"P5" or len(dims) != 2 or maxval != b"255":
            raise ContractError(f"{path} is not a P5/255 graymap")
        w, h = int(dims[0]), int(dims[1])
        data = f.read(w * h)
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def dump_detections(dets_per_image: dict, path) -> None:
    """Text dump, one line per detection: image_id class score x1 y1 x2 y2."""
    try:
        with open(path, "w") as f:
            for image_id in sorted(dets_per_image):
                for d in dets_per_image[image_id]:
                    b = d.box
                    f.write(f"{image_id} {d.cls} {d.score!r} "
                            f"{b.x1!r} {b.y1!r} {b.x2!r} {b.y2!r}\n")
    except OSError as e:
        raise EvaluationError(f"cannot write detections to {path}: {e}") from None


def format_report(per_class_ap: dict, map_value: float,
                  class_names: dict | None = None) -> str:
    """Fixed-width per-class AP table plus the mAP line."""
    lines = ["class                     AP", "-" * 30]
    for c in sorted(per_class_ap):
        name = (class_names or {}).get(c, f"class-{c}")
        ap = per_class_ap[c]
        lines.append(f"{name:<20} {'undefined' if ap is None else f'{ap:9.4f}'}")
    lines.append("-" * 30)
    lines.append(f"{'mAP':<20} {map_value:9.4f}")
    return "\n".join(lines) + "\n"
