"""End-to-end gradient verification of the assembled model.

One synthetic two-image proposal batch is pushed through the full forward and
the multi-task loss; the tape's gradients are then compared against central
finite differences, group by group.

The network contains kinked ops (relu, max pools, smooth-L1 breakpoints,
clamp floors, bilinear cell edges) whose derivative is ill-defined exactly on
the boundary, and a difference quotient that straddles a boundary measures
two different smooth pieces at once, so it says nothing about the gradient.
The check handles this in two layers:

- the check point is made generic: biases get a small nonzero jitter for the
  check draw only (at zero bias, conv outputs over constant-zero patches sit
  exactly on the relu boundary across whole regions), and a draw is redrawn
  on a deterministic seed chain (seed + 1000, + 2000, ...) when any margin
  sits below a structural floor. Max-pool gaps of exactly zero are exempt
  from the floor: they come from values identical by construction
  (relu-pinned zeros or duplicated expressions), which either move
  coherently under any smooth perturbation or carry no gradient through
  relu', so no eps step can split them.
- every finite-difference evaluation records a branch signature (relu sign
  masks, pool argmax cells, bilinear cell indices, piece selectors). A
  coordinate whose +/-eps evaluations left the center's branch pattern
  crossed a kink: its quotient is invalid by construction and is excluded
  from the comparison, and the count of such exclusions is reported. Across
  a whole model a few coordinates per thousand cross at eps = 1e-3; every
  remaining coordinate must match the tape gradient tightly.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .detection import detection_loss, sample_training_batch
from .errors import CheckFailure
from .instrumentation import margin_probe
from .model import CmacModel, init_params
from .synthdata import SceneSpec, generate_scene, make_proposals

log = logging.getLogger(__name__)

# Structural-boundary guard. At a generic check point no margin is exactly
# zero, so the floor only has to catch values pinned on a kink by
# construction; whether the surviving near-kinks disturb the differences is
# judged by the relative-error tolerance itself.
MARGIN_FLOOR = 2e-6
CHECK_BATCH_SIZE = 8   # 2 fg + 6 bg at the default fg fraction
REL_TINY = 1e-30


@dataclass
class CheckBatch:
    """Fixed forward inputs: params vary during FD, the batch never does."""
    images: list            # (rgb, geo) arrays per image
    rois_per_image: list    # list of Box lists, aligned with images
    labels: np.ndarray      # [B] int, concatenated in image order
    targets: np.ndarray     # [B,4] offsets, zero rows for background


@dataclass
class GroupResult:
    name: str
    coords: int             # coordinates compared
    size: int               # total scalar parameters in the group
    skipped_coords: list    # (tensor name, flat index) whose +/-eps crossed a kink
    max_rel_err: float

    @property
    def skipped(self) -> int:
        return len(self.skipped_coords)

    @property
    def exhaustive(self) -> bool:
        return self.coords + self.skipped == self.size


@dataclass
class GradcheckResult:
    groups: list
    tol: float
    eps: float
    seed: int
    attempts: int
    min_margin: float
    n_fg: int
    n_bg: int

    @property
    def passed(self) -> bool:
        return all(g.max_rel_err < self.tol for g in self.groups)

    @property
    def skipped(self) -> int:
        return sum(g.skipped for g in self.groups)

    def format(self) -> str:
        lines = [f"gradcheck seed={self.seed} attempts={self.attempts} "
                 f"min_margin={self.min_margin:.2e} eps={self.eps:g} "
                 f"tol={self.tol:g} batch={self.n_fg}fg+{self.n_bg}bg",
                 f"{'group':<16} {'coords':>10} {'kinked':>7} "
                 f"{'max_rel_err':>12}  status"]
        for g in self.groups:
            cov = f"{g.coords}/{g.size}"
            status = "ok" if g.max_rel_err < self.tol else "FAIL"
            lines.append(f"{g.name:<16} {cov:>10} {g.skipped:>7} "
                         f"{g.max_rel_err:>12.3e}  {status}")
        n_ok = sum(g.max_rel_err < self.tol for g in self.groups)
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"RESULT {verdict} ({n_ok}/{len(self.groups)} groups "
                     f"within {self.tol:g}; {self.skipped} kink-crossing "
                     f"coordinates excluded)")
        return "\n".join(lines) + "\n"


def exhaustive_check_config(seed: int = 0) -> RunConfig:
    """A narrow, small-extent run configuration for exhaustive differencing.

    Every module is present (both streams, global attention, two part
    transformers), so every parameter group of the full head exists. Widths
    are cut so the ~2.5k parameters can all be central-differenced in
    seconds, and the spatial extent is cut so a forward pass crosses few
    kinks — eps-step branch flips stay rare enough that the redraw chain
    terminates almost immediately. 24 is the smallest image the scene
    generator can lay 20px objects into without degenerate placement.
    """
    return RunConfig(image_size=24, k=6, s=3, backbone_width=4, d_embed=6,
                     d_hidden=5, d_fc=8, t_steps=2, n_stn=2, num_classes=2,
                     gradcheck_max_coords=0, seed=seed)


def build_check_batch(cfg: RunConfig, seed: int,
                      batch_size: int = CHECK_BATCH_SIZE) -> CheckBatch:
    """Two generated scenes, jittered proposals, one pooled training batch.

    The geocentric channels are piecewise constant by construction (planar
    depth), which parks max-pool ties and relu inputs exactly on their
    decision boundaries; a small deterministic dither moves the check point
    to a generic position without changing what the batch represents. The
    rgb channels already carry generator noise.
    """
    spec = SceneSpec(image_size=cfg.image_size, num_classes=cfg.num_classes)
    rng = np.random.default_rng(seed)
    per_image, images = [], []
    for i in range(2):
        scene = generate_scene(spec, seed * 977 + i)
        geo = scene.geo + rng.uniform(-0.01, 0.01, size=scene.geo.shape)
        proposals = make_proposals(scene.gts, n_per_gt=4, n_background=6,
                                   seed=seed * 31 + i, image_size=cfg.image_size)
        per_image.append((proposals, scene.gts))
        images.append((scene.rgb, geo))
    batch = sample_training_batch(per_image, batch_size, cfg.fg_fraction, rng)
    batch = sorted(enumerate(batch), key=lambda kv: kv[1][0])  # stable by image
    rois = [[] for _ in per_image]
    labels, targets = [], []
    for _, (idx, s) in batch:
        rois[idx].append(s.box)
        labels.append(s.u)
        targets.append(s.v if s.is_foreground else np.zeros(4))
    return CheckBatch(images=images, rois_per_image=rois,
                      labels=np.asarray(labels, dtype=np.int64),
                      targets=np.asarray(targets, dtype=np.float64))


def _forward_loss(model: CmacModel, batch: CheckBatch):
    """(loss tensor, tape, bound) for the fixed batch under current arrays."""
    tape = ad.Tape()
    bound = model.bind(tape)
    feats = [model.forward_image(bound, rgb, geo, rois)
             for (rgb, geo), rois in zip(batch.images, batch.rois_per_image)
             if rois]
    probs, t_star = model.forward_heads(bound, feats)
    total, _, _ = detection_loss(probs, batch.labels, t_star, batch.targets)
    return total, tape, bound


def _loss_value(cfg, arrays: dict, batch: CheckBatch) -> float:
    model = CmacModel.__new__(CmacModel)  # skip re-validation inside FD loop
    model.config = cfg
    model.arrays = arrays
    return float(_forward_loss(model, batch)[0].data)


def _group_rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    """max |analytic - fd| over the group, relative to the group's scale."""
    if analytic.size == 0:
        return float("nan")   # nothing compared: the group must not pass
    denom = max(np.abs(analytic).max(), np.abs(fd).max(), REL_TINY)
    return float(np.abs(analytic - fd).max() / denom)


def _jitter_biases(arrays: dict, seed: int) -> None:
    """Move every bias off zero, in place, for the check draw only.

    With zero biases, conv outputs over relu-clipped (all-zero) patches sit
    exactly on the relu boundary across whole regions, and an eps step of the
    bias coordinate would flip them all coherently. Magnitudes are bounded
    away from zero so no bias lands within eps of a boundary it controls.
    """
    rng = np.random.default_rng(seed + 13)
    for name in sorted(arrays):
        arr = arrays[name]
        if arr.ndim == 1:
            sign = np.where(rng.random(arr.shape) < 0.5, -1.0, 1.0)
            arr += sign * rng.uniform(0.02, 0.06, size=arr.shape)


def _scan_min_margin() -> float:
    """Smallest recorded margin, ignoring structural max-pool ties.

    A pool gap of exactly 0.0 means two window cells hold values identical by
    construction — relu-pinned zeros or duplicated expressions — which either
    move coherently under any smooth perturbation or carry no gradient
    through relu'; no eps step can split them, so they cannot corrupt a
    finite difference. Any *nonzero* gap is a genuine near-tie and must clear
    the floor.
    """
    margins = (v for kind, v in margin_probe.records
               if not (kind == "pool_gap" and v == 0.0))
    return min(margins, default=float("inf"))


def _loss_and_signature(cfg, arrays: dict, batch: CheckBatch) -> tuple[str, float]:
    """One probed evaluation: (branch signature, loss value)."""
    margin_probe.start(signature=True)
    try:
        value = _loss_value(cfg, arrays, batch)
        return margin_probe.signature(), value
    finally:
        margin_probe.stop()


def run_gradcheck(cfg: RunConfig, seed: int | None = None, tol: float = 1e-4,
                  eps: float = 1e-3, margin_floor: float = MARGIN_FLOOR,
                  max_attempts: int = 20,
                  corrupt_group: str | None = None) -> GradcheckResult:
    """Compare tape gradients with central differences for every group.

    cfg.gradcheck_max_coords bounds the coordinates checked per group (0 =
    every coordinate). Draws whose forward pass sits on a structural kink
    boundary are redrawn on a deterministic seed chain. Coordinates whose
    +/-eps evaluations changed a branch decision anywhere in the network are
    excluded from the comparison — their difference quotient mixes two
    smooth pieces and measures nothing — and reported per group; every
    compared coordinate evaluates the same branches as the center, so a
    mismatch there is a genuine defect. ``corrupt_group`` is a test hook
    that perturbs the analytic gradients of one group so the report must
    flag exactly it.
    """
    base_seed = cfg.seed if seed is None else seed
    model_cfg = cfg.model_config()

    for attempt in range(max_attempts):
        attempts = attempt + 1
        draw = base_seed + 1000 * attempt
        model = CmacModel(model_cfg, seed=draw)
        _jitter_biases(model.arrays, draw)
        batch = build_check_batch(cfg, draw)
        margin_probe.start(signature=True)
        try:
            _forward_loss(model, batch)
            min_margin = _scan_min_margin()
            sig0 = margin_probe.signature()
        finally:
            margin_probe.stop()
        if min_margin <= margin_floor:
            log.info("gradcheck draw %d rejected: margin %.2e <= %.2e",
                     draw, min_margin, margin_floor)
            continue

        total, tape, bound = _forward_loss(model, batch)
        grads = tape.backward(total)
        analytic = {name: grads.of(bound.leaves[name]) for name in model.arrays}
        if corrupt_group is not None:
            for name in model.param_groups()[corrupt_group]:
                analytic[name] = analytic[name] * 1.003 + 1e-6

        rng = np.random.default_rng(base_seed + 7)
        results = []
        work = {k: v.copy() for k, v in model.arrays.items()}
        for group, names in model.param_groups().items():
            size = sum(model.arrays[n].size for n in names)
            coords = [(n, i) for n in names for i in range(model.arrays[n].size)]
            if 0 < cfg.gradcheck_max_coords < len(coords):
                pick = rng.choice(len(coords), size=cfg.gradcheck_max_coords,
                                  replace=False)
                coords = [coords[i] for i in sorted(pick)]
            an, fd = [], []
            skipped = []
            for n, i in coords:
                keep = work[n].flat[i]
                work[n].flat[i] = keep + eps
                sig_up, up = _loss_and_signature(model_cfg, work, batch)
                work[n].flat[i] = keep - eps
                sig_down, down = _loss_and_signature(model_cfg, work, batch)
                work[n].flat[i] = keep
                if sig_up != sig0 or sig_down != sig0:
                    skipped.append((n, i))
                    continue
                an.append(analytic[n].flat[i])
                fd.append((up - down) / (2.0 * eps))
            err = _group_rel_err(np.asarray(an), np.asarray(fd))
            results.append(GroupResult(name=group, coords=len(an), size=size,
                                       skipped_coords=skipped, max_rel_err=err))

        _mop_up_skipped(cfg, model_cfg, results, base_seed, attempts, eps,
                        margin_floor, corrupt_group)
        n_fg = int((batch.labels >= 1).sum())
        return GradcheckResult(groups=results, tol=tol, eps=eps,
                               seed=base_seed, attempts=attempts,
                               min_margin=min_margin, n_fg=n_fg,
                               n_bg=len(batch.labels) - n_fg)

    raise CheckFailure(
        f"no draw clear of structural kink boundaries (margin floor "
        f"{margin_floor:g}) in {max_attempts} attempts from seed {base_seed}")


def _mop_up_skipped(cfg: RunConfig, model_cfg, results: list, base_seed: int,
                    used_draws: int, eps: float, margin_floor: float,
                    corrupt_group: str | None, extra_draws: int = 20) -> None:
    """Re-difference kink-crossing coordinates under fresh draws.

    Which coordinates cross a kink is a property of one random draw, not of
    the coordinate, so each leftover is retried at new points along the same
    seed chain until its +/-eps evaluations stay on one smooth piece. Each
    group's max_rel_err absorbs the retried coordinates; whatever never gets
    a clean quotient stays in skipped_coords.
    """
    leftovers = [(g, n, i) for g in results for (n, i) in g.skipped_coords]
    for extra in range(extra_draws):
        if not leftovers:
            return
        draw = base_seed + 1000 * (used_draws + extra)
        model = CmacModel(model_cfg, seed=draw)
        _jitter_biases(model.arrays, draw)
        batch = build_check_batch(cfg, draw)
        margin_probe.start(signature=True)
        try:
            _forward_loss(model, batch)
            min_margin = _scan_min_margin()
            sig0 = margin_probe.signature()
        finally:
            margin_probe.stop()
        if min_margin <= margin_floor:
            continue

        total, tape, bound = _forward_loss(model, batch)
        grads = tape.backward(total)
        analytic = {name: grads.of(bound.leaves[name]) for name in model.arrays}
        if corrupt_group is not None:
            for name in model.param_groups()[corrupt_group]:
                analytic[name] = analytic[name] * 1.003 + 1e-6
        groups = model.param_groups()
        scale = {g.name: max((np.abs(analytic[n]).max(initial=0.0)
                              for n in groups[g.name]), default=0.0)
                 for g in results}

        work = {k: v.copy() for k, v in model.arrays.items()}
        still = []
        for g, n, i in leftovers:
            keep = work[n].flat[i]
            work[n].flat[i] = keep + eps
            sig_up, up = _loss_and_signature(model_cfg, work, batch)
            work[n].flat[i] = keep - eps
            sig_down, down = _loss_and_signature(model_cfg, work, batch)
            work[n].flat[i] = keep
            if sig_up != sig0 or sig_down != sig0:
                still.append((g, n, i))
                continue
            fd = (up - down) / (2.0 * eps)
            denom = max(scale[g.name], abs(fd), REL_TINY)
            rel = float(abs(analytic[n].flat[i] - fd) / denom)
            g.coords += 1
            g.skipped_coords.remove((n, i))
            g.max_rel_err = rel if np.isnan(g.max_rel_err) \
                else max(g.max_rel_err, rel)
        leftovers = still
