"""Independent brute-force reference implementations used as test oracles.

Everything here is written the slow, obvious way (nested python loops, no
vectorization, no shared code with the package) so that agreement with the
fast implementations is meaningful.
"""
import itertools

import numpy as np


def rel_err(a: np.ndarray, b: np.ndarray, tiny: float = 1e-30) -> float:
    """max_i |a_i - b_i| / max(||a||_inf, ||b||_inf, tiny), over a flat group."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), tiny)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def conv2d_loops(x, k, bias=None, stride=1, pad=0):
    """Nested-loop 2-D cross-correlation."""
    cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.zeros((cin, h + 2 * pad, w + 2 * pad))
    xp[:, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(cin):
                    for u in range(kh):
                        for v in range(kw):
                            acc += k[o, c, u, v] * xp[c, i * stride + u, j * stride + v]
                out[o, i, j] = acc + (bias[o] if bias is not None else 0.0)
    return out


def pool_window_bounds(extent, cells):
    out = []
    for i in range(cells):
        lo = (i * extent) // cells
        hi = -((-(i + 1) * extent) // cells)  # ceil
        out.append((lo, hi))
    return out


def max_pool_loops(data, oh, ow):
    """Adaptive window max with first-occurrence (row-major scan) tie rule."""
    c, h, w = data.shape
    vals = np.zeros((c, oh, ow))
    idx = np.zeros((c, oh, ow), dtype=np.int64)
    for ch in range(c):
        for i, (y0, y1) in enumerate(pool_window_bounds(h, oh)):
            for j, (x0, x1) in enumerate(pool_window_bounds(w, ow)):
                best = None
                arg = None
                for y in range(y0, y1):
                    for x in range(x0, x1):
                        v = data[ch, y, x]
                        if best is None or v > best:
                            best = v
                            arg = y * w + x
                vals[ch, i, j] = best
                idx[ch, i, j] = arg
    return vals, idx


def roi_pool_loops(fmap, roi_xyxy, spatial_scale, out_size):
    """Reference ROI max pooling.

    Image-coordinate box -> feature cells by floor(scale*x1), floor(scale*y1)
    as the inclusive start and ceil(scale*x2), ceil(scale*y2) as the exclusive
    stop, clipped to the map. A scaled roi of area < 1 cell collapses to the
    single cell containing its center; empty spans widen to one cell.
    """
    c, h, w = fmap.shape
    x1, y1, x2, y2 = roi_xyxy
    sx1, sy1 = x1 * spatial_scale, y1 * spatial_scale
    sx2, sy2 = x2 * spatial_scale, y2 * spatial_scale
    if (sx2 - sx1) * (sy2 - sy1) < 1.0:
        cx = min(max(int(np.floor((sx1 + sx2) / 2.0)), 0), w - 1)
        cy = min(max(int(np.floor((sy1 + sy2) / 2.0)), 0), h - 1)
        fx1, fy1, fx2, fy2 = cx, cy, cx + 1, cy + 1
    else:
        fx1 = min(max(int(np.floor(sx1)), 0), w - 1)
        fy1 = min(max(int(np.floor(sy1)), 0), h - 1)
        fx2 = min(max(int(np.ceil(sx2)), fx1 + 1), w)
        fy2 = min(max(int(np.ceil(sy2)), fy1 + 1), h)
    region = fmap[:, fy1:fy2, fx1:fx2]
    vals, idx = max_pool_loops(region, out_size, out_size)
    rw = fx2 - fx1
    ry, rx = idx // rw, idx % rw
    return vals, (fy1 + ry) * w + (fx1 + rx)


def bilinear_loops(u, gx, gy):
    """Per-point bilinear lookup of u [D,S,S] at normalized coords in [-1,1].

    Corner weights follow p = (coord + 1)/2 * (S - 1); a neighbor at index S
    contributes weight zero rather than being clamped.
    """
    d, s, _ = u.shape
    oh, ow = gx.shape
    out = np.zeros((d, oh, ow))
    for i in range(oh):
        for j in range(ow):
            px = (gx[i, j] + 1.0) / 2.0 * (s - 1)
            py = (gy[i, j] + 1.0) / 2.0 * (s - 1)
            x0, y0 = int(np.floor(px)), int(np.floor(py))
            fx, fy = px - x0, py - y0
            for dy in (0, 1):
                for dx in (0, 1):
                    xx, yy = x0 + dx, y0 + dy
                    wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
                    if xx > s - 1 or yy > s - 1 or xx < 0 or yy < 0:
                        continue  # zero-weight guard off the grid
                    out[:, i, j] += wgt * u[:, yy, xx]
    return out


def iou_xyxy(a, b):
    """Intersection over union with the (x2-x1)*(y2-y1) area convention."""
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0.0, ix2 - ix1), max(0.0, iy2 - iy1)
    inter = iw * ih
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def ap_all_point_oracle(scored, n_gt):
    """All-point interpolated AP for one class by direct enumeration.

    ``scored`` is a list of (score, is_tp) already matched; ranking is by
    descending score with ties broken by list order.
    """
    order = sorted(range(len(scored)), key=lambda i: (-scored[i][0], i))
    tp = fp = 0
    recalls, precisions = [], []
    for i in order:
        if scored[i][1]:
            tp += 1
        else:
            fp += 1
        recalls.append(tp / n_gt if n_gt else 0.0)
        precisions.append(tp / (tp + fp))
    ap = 0.0
    prev_r = 0.0
    for i, r in enumerate(recalls):
        p_max = max(precisions[i:], default=0.0)
        ap += (r - prev_r) * p_max
        prev_r = r
    return ap


def best_assignment_ap(dets, gts, iou_thresh=0.5):
    """Exhaustive-assignment check helper: greedy matching oracle for <=4 boxes.

    Detections (score, box) are matched in descending score order to the
    unmatched ground truth with the highest IoU above the threshold.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][0], i))
    taken = [False] * len(gts)
    scored = []
    for i in order:
        box = dets[i][1]
        best, arg = 0.0, -1
        for j, g in enumerate(gts):
            v = iou_xyxy(box, g)
            if v > best:
                best, arg = v, j
        if arg >= 0 and best >= iou_thresh and not taken[arg]:
            taken[arg] = True
            scored.append((dets[i][0], True))
        else:
            scored.append((dets[i][0], False))
    return ap_all_point_oracle(scored, len(gts))


def nms_loops(boxes, scores, thresh):
    """Greedy NMS: descending score, ties by lower index, suppress IoU > thresh."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep, dead = [], set()
    for i in order:
        if i in dead:
            continue
        keep.append(i)
        for j in order:
            if j != i and j not in dead and iou_xyxy(boxes[i], boxes[j]) > thresh:
                dead.add(j)
    return keep


def lstm_step_scalar(h_prev, c_prev, x, z, t_mat, t_bias):
    """One recurrent step computed entry by entry with python floats."""
    d = len(h_prev)
    stacked = list(h_prev) + list(x) + list(z)
    pre = []
    for col in range(4 * d):
        acc = t_bias[col]
        for row, s in enumerate(stacked):
            acc += s * t_mat[row][col]
        pre.append(acc)

    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    i = [sig(pre[k]) for k in range(d)]
    f = [sig(pre[d + k]) for k in range(d)]
    o = [sig(pre[2 * d + k]) for k in range(d)]
    g = [np.tanh(pre[3 * d + k]) for k in range(d)]
    c = [f[k] * c_prev[k] + i[k] * g[k] for k in range(d)]
    h = [o[k] * np.tanh(c[k]) for k in range(d)]
    return np.array(h), np.array(c)


def softmax_scalar(v):
    m = max(v)
    e = [np.exp(x - m) for x in v]
    s = sum(e)
    return np.array([x / s for x in e])


def room_height_oracle(n, fx, fy, cx, cy, floor_y, wall_z):
    """Analytic height-above-floor for the empty floor+wall room.

    Pure plane geometry per pixel: a floor point sits at height zero by
    definition; a wall point's height follows from intersecting the pixel
    ray with the wall plane.  Never touches a rendered depth map.
    """
    out = np.zeros((n, n))
    for v in range(n):
        ry = (v - cy) / fy
        floor_depth = floor_y / ry if ry > 0 else np.inf
        for u in range(n):
            if floor_depth <= wall_z:
                out[v, u] = 0.0
            else:
                out[v, u] = floor_y - wall_z * ry
    return out
