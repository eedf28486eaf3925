"""Synthetic RGB-D scenes: textured shapes over a floor+wall room.

Classes are (shape, texture, depth-structure) archetypes.  One pair of
classes always shares shape and texture and differs only in depth structure,
so color alone cannot separate them.  Scenes may also contain an unlabeled
striped triangle distractor that shares the ambiguous pair's texture.

On top of the class design, each instance draws a visibility regime:
some render at low RGB contrast against the backdrop (extent invisible to
the color stream), some flat-structure instances sit depth-flush against
the room surface behind them (extent invisible to the geometry stream),
and the rest are crisp in both.  No instance is camouflaged in both
modalities, so a model that combines the two streams at the feature level
can localize everything, while a single-modality model is blind to the
extent of a random subset — which is what makes decision-level score
averaging of two streams measurably worse than early fusion here.

Determinism: generation uses numpy's PCG64 generator and elementary float
arithmetic plus np.log/np.exp/np.arccos/np.sqrt, so datasets are
bit-reproducible wherever those libm entry points agree.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .checkpoint import load_tensor_file, save_tensor_file
from .errors import ContractError, DatasetError, FormatError
from .fusion import Box

COORD_GRID = 256.0  # box coords snap to 1/256 px so horizontal flips invert exactly


@dataclass(frozen=True)
class ClassArchetype:
    shape: str            # rectangle | ellipse | triangle
    texture: str          # striped | solid
    depth_structure: str  # flat | ramp
    color_a: tuple
    color_b: tuple        # second stripe color; unused for solid


def default_archetypes(c: int) -> tuple:
    """Class list with a guaranteed texture-sharing, depth-differing pair.

    Class 1 and class c are the ambiguous twins (same striped rectangle,
    flat vs ramped); remaining classes get visually distinct archetypes.
    """
    if c < 2:
        raise ContractError(f"need at least 2 classes, got {c}")
    stripe = ((0.85, 0.25, 0.20), (0.95, 0.85, 0.30))
    twin_flat = ClassArchetype("rectangle", "striped", "flat", *stripe)
    twin_ramp = ClassArchetype("rectangle", "striped", "ramp", *stripe)
    fillers = [
        ClassArchetype("ellipse", "solid", "flat", (0.20, 0.45, 0.85), (0, 0, 0)),
        ClassArchetype("triangle", "solid", "flat", (0.25, 0.75, 0.35), (0, 0, 0)),
        ClassArchetype("ellipse", "striped", "flat", (0.60, 0.30, 0.75), (0.9, 0.9, 0.9)),
        ClassArchetype("triangle", "striped", "ramp", (0.95, 0.55, 0.15), (0.3, 0.2, 0.5)),
    ]
    mids = [fillers[i % len(fillers)] for i in range(c - 2)]
    return tuple([twin_flat] + mids + [twin_ramp])


@dataclass
class SceneSpec:
    image_size: int = 64
    num_classes: int = 3
    archetypes: tuple = ()
    min_objects: int = 2
    max_objects: int = 6
    occlusion_prob: float = 0.5
    depth_range: tuple = (1.5, 5.0)
    fx: float = 64.0
    fy: float = 64.0
    cx: float = 31.5
    cy: float = 28.0
    gravity: tuple = (0.0, 1.0, 0.0)
    floor_y: float = 1.2     # camera height above the floor (y points down)
    wall_z: float = 6.5
    distractor_prob: float = 0.6
    ramp_depth: float = 0.9  # how far a ramped object leans toward the camera
    rgb_camouflage_prob: float = 0.35    # low-contrast render, extent hidden from color
    depth_camouflage_prob: float = 0.35  # flush against the room surface, hidden from depth

    def __post_init__(self):
        if not self.archetypes:
            self.archetypes = default_archetypes(self.num_classes)
        if self.num_classes < 2:
            raise ContractError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.archetypes) != self.num_classes:
            raise ContractError(f"{len(self.archetypes)} archetypes for "
                                f"{self.num_classes} classes")
        if self.image_size < 16:
            raise ContractError(f"image_size too small: {self.image_size}")
        if not (0.0 < self.depth_range[0] < self.depth_range[1] < self.wall_z):
            raise ContractError(f"bad depth range {self.depth_range} for wall at "
                                f"{self.wall_z}")
        g = np.asarray(self.gravity, dtype=np.float64)
        if abs(np.sqrt((g * g).sum()) - 1.0) > 1e-9:
            raise ContractError(f"gravity must be a unit vector, got {self.gravity}")
        pr, pd = self.rgb_camouflage_prob, self.depth_camouflage_prob
        if not (0.0 <= pr <= 1.0 and 0.0 <= pd <= 1.0 and pr + pd <= 1.0):
            raise ContractError(f"camouflage probabilities ({pr}, {pd}) must be in "
                                f"[0,1] and sum to at most 1")


@dataclass
class DetectionSample:
    rgb: np.ndarray   # [3, H, W] in [0, 1]
    geo: np.ndarray   # [3, H, W] disparity / height / gravity-angle, in [0, 1]
    gts: list         # of (Box, class >= 1)

    def __post_init__(self):
        if self.rgb.shape != self.geo.shape or self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise ContractError(f"bad sample shapes rgb {self.rgb.shape} geo {self.geo.shape}")
        if not np.all(np.isfinite(self.geo)):
            raise ContractError("geo channels contain non-finite values")
        for b, cls in self.gts:
            if b.area < 4.0:
                raise ContractError(f"gt box area {b.area} < 4 px")
            if cls < 1:
                raise ContractError(f"gt class {cls} is not a foreground label")


def snap(x: float) -> float:
    return round(x * COORD_GRID) / COORD_GRID


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def two_plane_depth(spec: SceneSpec) -> np.ndarray:
    """Depth of the empty room: the nearer of the floor and the back wall."""
    n = spec.image_size
    v = np.arange(n, dtype=np.float64)[:, None]
    ry = (v - spec.cy) / spec.fy           # per-row ray slope toward the floor
    wall = np.full((n, n), spec.wall_z)
    with np.errstate(divide="ignore"):
        t = np.where(ry > 0.0, spec.floor_y / np.where(ry > 0.0, ry, 1.0), np.inf)
    floor = np.broadcast_to(t, (n, n))
    return np.minimum(wall, floor)


def backproject(depth: np.ndarray, spec: SceneSpec) -> np.ndarray:
    """Per-pixel camera-frame points [3, H, W] for a pinhole camera."""
    h, w = depth.shape
    u = np.arange(w, dtype=np.float64)[None, :]
    v = np.arange(h, dtype=np.float64)[:, None]
    x = depth * (u - spec.cx) / spec.fx
    y = depth * (v - spec.cy) / spec.fy
    return np.stack([np.broadcast_to(x, depth.shape),
                     np.broadcast_to(y, depth.shape), depth])


def geocentric_channels(depth: np.ndarray, spec: SceneSpec) -> np.ndarray:
    """Raw disparity / height-above-floor / angle-to-gravity channels.

    Heights come from back-projecting the depth map against the known floor
    plane; normals come from central differences of the point map (one-sided
    at borders), flipped to face the camera.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim == 3:
        if depth.shape[0] != 1:
            raise ContractError(f"depth must be [H,W] or [1,H,W], got {depth.shape}")
        depth = depth[0]
    if depth.ndim != 2:
        raise ContractError(f"depth must be [H,W] or [1,H,W], got shape {depth.shape}")
    if depth.min(initial=np.inf) <= 0.0 or not np.all(np.isfinite(depth)):
        raise ContractError("depth must be positive and finite everywhere")

    disparity = 1.0 / depth
    points = backproject(depth, spec)
    height = spec.floor_y - points[1]

    dv = np.gradient(points, axis=1)  # along rows (image v)
    du = np.gradient(points, axis=2)  # along columns (image u)
    normal = np.cross(dv.transpose(1, 2, 0), du.transpose(1, 2, 0)).transpose(2, 0, 1)
    norm = np.sqrt((normal * normal).sum(axis=0))
    normal = normal / np.maximum(norm, 1e-12)
    # orient normals toward the camera (rays leave the origin through +z)
    facing = (normal * points).sum(axis=0)
    normal = np.where(facing > 0.0, -normal, normal)
    g = np.asarray(spec.gravity, dtype=np.float64).reshape(3, 1, 1)
    cosang = np.clip((normal * g).sum(axis=0), -1.0, 1.0)
    angle = np.arccos(cosang)
    return np.stack([disparity, height, angle])


def _minmax(c: np.ndarray) -> np.ndarray:
    lo, hi = c.min(), c.max()
    if hi - lo <= 0.0:
        return np.zeros_like(c)
    return (c - lo) / (hi - lo)


def geocentric_encode(depth: np.ndarray, spec: SceneSpec) -> np.ndarray:
    """Geocentric channels, each min-max normalized to [0, 1] per image."""
    raw = geocentric_channels(depth, spec)
    return np.stack([_minmax(raw[i]) for i in range(3)])


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _shape_mask(shape: str, cx, cy, hw, hh, n) -> np.ndarray:
    u = np.arange(n, dtype=np.float64)[None, :] + 0.5
    v = np.arange(n, dtype=np.float64)[:, None] + 0.5
    if shape == "rectangle":
        return (np.abs(u - cx) <= hw) & (np.abs(v - cy) <= hh)
    if shape == "ellipse":
        return ((u - cx) / hw) ** 2 + ((v - cy) / hh) ** 2 <= 1.0
    if shape == "triangle":
        below_apex = v - (cy - hh)
        half_width = hw * np.clip(below_apex / (2.0 * hh), 0.0, 1.0)
        return (np.abs(u - cx) <= half_width) & (below_apex >= 0.0) & (v <= cy + hh)
    raise ContractError(f"unknown shape {shape!r}")


def _texture(arch: ClassArchetype, n: int, rng) -> np.ndarray:
    base = np.empty((3, n, n))
    if arch.texture == "striped":
        u = np.arange(n)[None, :]
        stripe = (u // 3) % 2 == 0
        for k in range(3):
            base[k] = np.where(stripe, arch.color_a[k], arch.color_b[k])
    else:
        for k in range(3):
            base[k] = arch.color_a[k]
    return np.clip(base + rng.uniform(-0.05, 0.05), 0.0, 1.0)


def _iou_tuple(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / area if area > 0.0 else 0.0


def _place(rng, n, hw, hh, placed, occlude_with=None):
    """Pick a center; reject IoU >= 0.3 against placed boxes (shrinking on
    repeated failure) or, for an occluder, overlap the target on purpose."""
    if occlude_with is not None:
        tx1, ty1, tx2, ty2 = occlude_with
        tw, th = tx2 - tx1, ty2 - ty1
        hw, hh = tw / 2.0, th / 2.0  # clone the target's size
        side = 1.0 if (tx1 + tx2) / 2.0 < n / 2.0 else -1.0
        cx = (tx1 + tx2) / 2.0 + side * 0.45 * tw
        cy = (ty1 + ty2) / 2.0
        cx = min(max(cx, hw + 1.0), n - hw - 1.0)
        cy = min(max(cy, hh + 1.0), n - hh - 1.0)
        return cx, cy, hw, hh
    for _ in range(400):
        cx = rng.uniform(hw + 1.0, n - hw - 1.0)
        cy = rng.uniform(hh + 1.0, n - hh - 1.0)
        box = (cx - hw, cy - hh, cx + hw, cy + hh)
        if all(_iou_tuple(box, p) < 0.3 for p in placed):
            return cx, cy, hw, hh
        if hw > 4.0:
            hw, hh = hw * 0.93, hh * 0.93
    raise ContractError("could not place an object without overlap")


def generate_scene(spec: SceneSpec, seed: int) -> DetectionSample:
    """Render one deterministic scene: room planes, class objects, distractor.

    Each object also draws a visibility regime — crisp in both modalities,
    low-contrast in RGB, or (flat objects only) depth-flush against the room
    surface — never hidden from both streams at once.
    """
    rng = np.random.default_rng(seed)
    n = spec.image_size
    room = two_plane_depth(spec)
    depth = room.copy()

    rgb = np.full((3, n, n), 0.62)  # wall
    floor_mask = room < spec.wall_z
    below = np.broadcast_to(np.arange(n, dtype=np.float64)[:, None], (n, n))
    shade = 0.40 + 0.10 * (below / max(n - 1, 1))
    for k in range(3):
        rgb[k] = np.where(floor_mask, shade, rgb[k])

    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    lo, hi = spec.depth_range
    planes = rng.permutation(np.linspace(lo + 0.15, hi - 0.15, count))
    planes = planes + rng.uniform(-0.05, 0.05, size=count)

    occlude = rng.uniform() < spec.occlusion_prob
    classes = [int(rng.integers(1, spec.num_classes + 1)) for _ in range(count)]

    placed: list[tuple] = []
    objs = []
    for i in range(count):
        hw = rng.uniform(5.0, 10.0)
        hh = rng.uniform(5.0, 10.0)
        if occlude and i == count - 1 and placed:
            target = placed[int(rng.integers(0, len(placed)))]
            cx, cy, hw, hh = _place(rng, n, hw, hh, placed, occlude_with=target)
        else:
            cx, cy, hw, hh = _place(rng, n, hw, hh, placed)
        box = (cx - hw, cy - hh, cx + hw, cy + hh)
        placed.append(box)
        arch = spec.archetypes[classes[i] - 1]
        u = rng.uniform()
        # ramped objects keep their lean (it is the class signature), so only
        # flat ones may hide from the depth stream
        if u < spec.depth_camouflage_prob and arch.depth_structure == "flat":
            regime = "depth_cam"
        elif u < spec.depth_camouflage_prob + spec.rgb_camouflage_prob:
            regime = "rgb_cam"
        else:
            regime = "visible"
        plane = spec.wall_z if regime == "depth_cam" else float(planes[i])
        objs.append((classes[i], plane, cx, cy, hw, hh, regime))

    gts = []
    order = sorted(range(count), key=lambda i: -objs[i][1])  # far to near
    for i in order:
        cls, plane, cx, cy, hw, hh, regime = objs[i]
        arch = spec.archetypes[cls - 1]
        mask = _shape_mask(arch.shape, cx, cy, hw, hh, n)
        tex = _texture(arch, n, rng)
        if regime == "rgb_cam":
            contrast = rng.uniform(0.04, 0.10)
            backdrop = rgb[:, mask].mean(axis=1)
            for k in range(3):
                rgb[k] = np.where(mask, backdrop[k] + contrast * (tex[k] - backdrop[k]),
                                  rgb[k])
        else:
            for k in range(3):
                rgb[k] = np.where(mask, tex[k], rgb[k])
        if regime == "depth_cam":
            obj_depth = room - rng.uniform(0.03, 0.08)  # hug the surface behind
        elif arch.depth_structure == "ramp":
            v = np.arange(n, dtype=np.float64)[:, None] + 0.5
            lean = np.clip((cy + hh - v) / (2.0 * hh), 0.0, 1.0) * spec.ramp_depth
            obj_depth = plane - lean * np.ones((1, n))
        else:
            obj_depth = np.full((n, n), plane)
        depth = np.where(mask, obj_depth, depth)
    for i in range(count):  # gt order independent of paste order
        cls, _, cx, cy, hw, hh, _ = objs[i]
        gts.append((Box(snap(cx - hw), snap(cy - hh), snap(cx + hw), snap(cy + hh)), cls))

    if rng.uniform() < spec.distractor_prob:
        hw, hh = rng.uniform(4.0, 7.0, size=2)
        try:
            cx, cy, hw, hh = _place(rng, n, hw, hh, placed)
        except ContractError:
            cx = cy = None
        if cx is not None:
            twin = spec.archetypes[0]
            arch = ClassArchetype("triangle", "striped", "flat",
                                  twin.color_a, twin.color_b)
            mask = _shape_mask("triangle", cx, cy, hw, hh, n)
            tex = _texture(arch, n, rng)
            d = rng.uniform(lo, hi)
            for k in range(3):
                rgb[k] = np.where(mask & (d < depth), tex[k], rgb[k])
            depth = np.where(mask & (d < depth), d, depth)

    rgb = np.clip(rgb + rng.normal(0.0, 0.01, size=rgb.shape), 0.0, 1.0)
    geo = geocentric_encode(depth, spec)
    return DetectionSample(rgb=rgb, geo=geo, gts=gts)


# ---------------------------------------------------------------------------
# proposals and augmentation
# ---------------------------------------------------------------------------

DEFAULT_JITTER = (0.25, 1.3)


def make_proposals(gts, n_per_gt: int, jitter=DEFAULT_JITTER, n_background: int = 8,
                   seed: int = 0, image_size: float | None = None) -> list:
    """Jittered copies of each gt box plus random background boxes.

    jitter = (max center shift as a fraction of the box size, max scale
    factor applied log-symmetrically).  (0, 1.0) reproduces the gts exactly.
    """
    if n_per_gt < 1:
        raise ContractError(f"n_per_gt must be >= 1, got {n_per_gt}")
    shift_frac, max_scale = jitter
    if max_scale < 1.0:
        raise ContractError(f"max scale factor must be >= 1, got {max_scale}")
    rng = np.random.default_rng(seed)
    out = []
    for gt, _cls in gts:
        for _ in range(n_per_gt):
            cx, cy = gt.center()
            w, h = gt.width, gt.height
            cx += rng.uniform(-shift_frac, shift_frac) * w
            cy += rng.uniform(-shift_frac, shift_frac) * h
            ls = np.log(max_scale)
            w *= np.exp(rng.uniform(-ls, ls))
            h *= np.exp(rng.uniform(-ls, ls))
            b = (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
            if image_size is not None:
                b = (min(max(b[0], 0.0), image_size), min(max(b[1], 0.0), image_size),
                     min(max(b[2], 0.0), image_size), min(max(b[3], 0.0), image_size))
            if b[2] - b[0] >= 2.0 and b[3] - b[1] >= 2.0:
                out.append(Box(snap(b[0]), snap(b[1]), snap(b[2]), snap(b[3])))
            else:
                out.append(Box(snap(gt.x1), snap(gt.y1), snap(gt.x2), snap(gt.y2)))
    size = image_size if image_size is not None else 64.0
    for _ in range(n_background):
        x = np.sort(rng.uniform(0.0, size, size=2))
        y = np.sort(rng.uniform(0.0, size, size=2))
        if x[1] - x[0] < 4.0:
            x[1] = min(x[0] + 4.0, size)
            x[0] = x[1] - 4.0
        if y[1] - y[0] < 4.0:
            y[1] = min(y[0] + 4.0, size)
            y[0] = y[1] - 4.0
        out.append(Box(snap(x[0]), snap(y[0]), snap(x[1]), snap(y[1])))
    return out


def flip_box(b: Box, width: float) -> Box:
    return Box(width - b.x2, b.y1, width - b.x1, b.y2)


def flip_augment(sample: DetectionSample, proposals, prob: float, rng):
    """Mirror the sample and boxes horizontally with the given probability.

    Returns (sample, proposals, flipped).  Always consumes one uniform draw
    so the random stream does not depend on prob.  Box coordinates sit on a
    1/256 px grid, which makes W - x exact and the flip a true involution.
    """
    if not 0.0 <= prob <= 1.0:
        raise ContractError(f"flip probability {prob} outside [0, 1]")
    if rng.uniform() >= prob:
        return sample, proposals, False
    w = float(sample.rgb.shape[2])
    flipped = DetectionSample(
        rgb=sample.rgb[:, :, ::-1].copy(),
        geo=sample.geo[:, :, ::-1].copy(),
        gts=[(flip_box(b, w), cls) for b, cls in sample.gts])
    return flipped, [flip_box(b, w) for b in proposals], True


# ---------------------------------------------------------------------------
# on-disk dataset
# ---------------------------------------------------------------------------

def save_dataset(samples, directory) -> None:
    """Write manifest + per-sample .rgb/.geo tensor records and .boxes text."""
    os.makedirs(directory, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        sid = f"{i:06d}"
        lines.append(f"{sid} {len(s.gts)}\n")
        save_tensor_file(os.path.join(directory, sid + ".rgb"), "rgb", s.rgb)
        save_tensor_file(os.path.join(directory, sid + ".geo"), "geo", s.geo)
        with open(os.path.join(directory, sid + ".boxes"), "w") as f:
            for b, cls in s.gts:
                f.write(f"{cls} {b.x1!r} {b.y1!r} {b.x2!r} {b.y2!r}\n")
    with open(os.path.join(directory, "manifest"), "w") as f:
        f.writelines(lines)


def _parse_boxes(path, expected: int) -> list:
    boxes = []
    offset = 0
    with open(path, "rb") as f:
        for raw in f:
            text = raw.decode("utf-8", errors="replace").strip()
            if text:
                parts = text.split()
                if len(parts) != 5:
                    raise FormatError(f"{os.path.basename(path)}: expected "
                                      f"'class x1 y1 x2 y2', got {text!r}", offset)
                try:
                    cls = int(parts[0])
                    vals = [float(p) for p in parts[1:]]
                    boxes.append((Box(*vals), cls))
                except (ValueError, ContractError) as e:
                    raise FormatError(f"{os.path.basename(path)}: {e}", offset) from None
            offset += len(raw)
    if len(boxes) != expected:
        raise FormatError(f"{os.path.basename(path)}: manifest promises {expected} "
                          f"boxes, file holds {len(boxes)}", offset)
    return boxes


def load_dataset(directory) -> list:
    """Read a dataset directory back; round trips are bit-exact."""
    manifest = os.path.join(directory, "manifest")
    if not os.path.isfile(manifest):
        raise DatasetError(f"no manifest in {directory}")
    samples = []
    offset = 0
    with open(manifest, "rb") as f:
        for raw in f:
            text = raw.decode("utf-8", errors="replace").strip()
            if text:
                parts = text.split()
                if len(parts) != 2 or not parts[1].isdigit():
                    raise FormatError(f"manifest: expected 'id count', got {text!r}",
                                      offset)
                sid, count = parts[0], int(parts[1])
                for ext in (".rgb", ".geo", ".boxes"):
                    if not os.path.isfile(os.path.join(directory, sid + ext)):
                        raise DatasetError(f"sample {sid}: missing {sid + ext}")
                _, rgb = load_tensor_file(os.path.join(directory, sid + ".rgb"))
                _, geo = load_tensor_file(os.path.join(directory, sid + ".geo"))
                gts = _parse_boxes(os.path.join(directory, sid + ".boxes"), count)
                samples.append(DetectionSample(rgb=rgb, geo=geo, gts=gts))
            offset += len(raw)
    return samples
