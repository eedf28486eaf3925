"""Seeded SGD training for the RGB-D detection head.

One iteration draws a small set of images, mirrors each horizontally with
probability ``flip_prob``, pools foreground/background ROI candidates across
the drawn images, and takes one momentum-SGD step on the multi-task
detection loss under a step-decayed learning rate.  Every random choice
comes from a single generator seeded by ``cfg.seed`` (plus fixed per-scene
offsets for proposal boxes), so a rerun under the same config reproduces
the log, the checkpoints, and the final parameters bit for bit.

The per-iteration log line is the machine-readable record of the protocol::

    iter 17 epoch 0 loss 1.234567 loss_cls 1.1 loss_loc 0.13 lr 0.001 fg 32 bg 96 images 2 flips 1

The foreground count equals round(batch_size * fg_fraction) whenever any
foreground candidate exists (the sampler tops a short pool up by
repetition); background fills the remainder, capped per image; ``flips``
counts how many of the drawn images came up mirrored this iteration.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import OptimizerState, sgd_momentum_step
from .config import RunConfig, format_config
from .detection import detection_loss, sample_training_batch
from .errors import ContractError, DatasetError
from .model import CmacModel, ModelConfig
from .synthdata import (DetectionSample, SceneSpec, flip_augment,
                        generate_scene, make_proposals, save_dataset)

log = logging.getLogger("cmac.training")

# Wide second jitter ring around each gt: most of these land in the
# [0.1, 0.5) overlap band the background sampler draws from, where uniform
# room boxes almost never do.  5x the tight count keeps ~96 background
# candidates available from two drawn images.
HARD_NEGATIVE_JITTER = (0.9, 2.2)
HARD_NEGATIVE_FACTOR = 5


# ---------------------------------------------------------------------------
# dataset synthesis
# ---------------------------------------------------------------------------

def build_split(cfg: RunConfig, which: str) -> list:
    """Generate the scenes of one split; seeds are disjoint across splits."""
    counts = {"train": cfg.train_scenes, "test": cfg.test_scenes}
    if which not in counts:
        raise ContractError(f"unknown split {which!r}, want train or test")
    spec = SceneSpec(image_size=cfg.image_size, num_classes=cfg.num_classes)
    offset = 0 if which == "train" else 1_000_000
    base = cfg.seed * 2_000_003 + offset
    return [generate_scene(spec, seed=base + i) for i in range(counts[which])]


def write_splits(cfg: RunConfig, root=None) -> list:
    """Synthesize and persist both splits; returns (name, directory, count) rows."""
    root = cfg.data_dir if root is None else root
    rows = []
    for which in ("train", "test"):
        samples = build_split(cfg, which)
        directory = os.path.join(root, which)
        save_dataset(samples, directory)
        rows.append((which, directory, len(samples)))
    return rows


def proposal_seed(cfg: RunConfig, which: str, i: int) -> int:
    """Fixed proposal seed for scene ``i`` of a split; one policy everywhere."""
    return cfg.seed * 9973 + (0 if which == "train" else 1_000_000) + 31 * i


def proposal_set(gts, cfg: RunConfig, seed: int) -> list:
    """Candidate boxes for one scene.

    Tight jitters of each gt give high-overlap candidates, a wider ring
    populates the hard-negative overlap band, and uniform boxes cover the
    rest of the room.
    """
    tight = make_proposals(gts, n_per_gt=cfg.proposals_per_gt,
                           n_background=cfg.background_proposals,
                           seed=seed, image_size=cfg.image_size)
    loose = make_proposals(gts,
                           n_per_gt=HARD_NEGATIVE_FACTOR * cfg.proposals_per_gt,
                           jitter=HARD_NEGATIVE_JITTER, n_background=0,
                           seed=seed + 1, image_size=cfg.image_size)
    return tight + loose


# ---------------------------------------------------------------------------
# optimization loop
# ---------------------------------------------------------------------------

def lr_at(cfg: RunConfig, epoch: int) -> float:
    """Step schedule: lr * decay_factor^(epoch // decay_every_epochs)."""
    return cfg.lr * cfg.lr_decay_factor ** (epoch // cfg.decay_every_epochs)


def forward_training_batch(model: CmacModel, images, batch):
    """Forward one iteration's sampled ROIs and assemble the loss.

    ``batch`` is the (image_index, RoiSample) list from
    sample_training_batch; rows regroup by image so each image runs a
    single backbone pass.  Returns (tape, bound, loss, l_cls, l_loc,
    labels).
    """
    by_img: list[list] = [[] for _ in images]
    for img_i, s in batch:
        by_img[img_i].append(s)
    tape = ad.Tape()
    bound = model.bind(tape)
    feats, labels, targets = [], [], []
    zero4 = np.zeros(4, dtype=np.float64)
    for img_i, rois in enumerate(by_img):
        if not rois:
            continue
        sample = images[img_i]
        feats.append(model.forward_image(bound, sample.rgb, sample.geo,
                                         [s.box for s in rois]))
        labels.extend(s.u for s in rois)
        targets.extend(s.v if s.is_foreground else zero4 for s in rois)
    probs, t_star = model.forward_heads(bound, feats)
    labels_arr = np.asarray(labels, dtype=np.int64)
    total, l_cls, l_loc = detection_loss(probs, labels_arr, t_star,
                                         np.stack(targets))
    return tape, bound, total, l_cls, l_loc, labels_arr


@dataclass
class TrainResult:
    """What a finished run leaves behind (checkpoints also land on disk)."""
    model: CmacModel
    epoch_losses: list    # mean total loss per epoch
    iterations: int
    checkpoints: list     # paths written, one per epoch
    flip_draws: int       # individual image-mirror decisions taken
    flips: int            # how many of them came up flipped


def train(cfg: RunConfig, samples, model_cfg: ModelConfig | None = None,
          checkpoint_dir=None) -> TrainResult:
    """Run the full schedule over ``samples`` and return the trained model.

    ``model_cfg`` overrides the architecture derived from ``cfg`` (used for
    single-stream and switched-off-module runs); ``checkpoint_dir`` enables
    an ``epoch_NN.ckpt`` save at each epoch end.
    """
    if not samples:
        raise DatasetError("training set is empty")
    mcfg = cfg.model_config() if model_cfg is None else model_cfg
    model = CmacModel(mcfg, seed=cfg.seed)
    opt = OptimizerState(momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    proposals = [proposal_set(s.gts, cfg, seed=proposal_seed(cfg, "train", i))
                 for i, s in enumerate(samples)]
    m = min(cfg.images_per_batch, len(samples))
    iters = max(1, len(samples) // m)

    for line in format_config(cfg).splitlines():
        log.info("%s", line)
    log.info("train start scenes %d iters_per_epoch %d params %d",
             len(samples), iters, sum(a.size for a in model.arrays.values()))

    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)
    it = 0
    flips_done = 0
    draws = 0
    epoch_losses: list[float] = []
    ckpts: list[str] = []
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        run = 0.0
        for _ in range(iters):
            chosen = rng.choice(len(samples), size=m, replace=False)
            images, per_image = [], []
            flips = 0
            for i in chosen:
                s, props, flipped = flip_augment(samples[i], proposals[i],
                                                 cfg.flip_prob, rng)
                flips += int(flipped)
                images.append(s)
                per_image.append((props, s.gts))
            batch = sample_training_batch(per_image, cfg.batch_size,
                                          cfg.fg_fraction, rng)
            tape, bound, total, l_cls, l_loc, labels = forward_training_batch(
                model, images, batch)
            grads = tape.backward(total)
            garrs = {n: grads.of(bound.leaves[n]) for n in model.arrays}
            sgd_momentum_step(model.arrays, garrs, lr, opt)
            n_fg = int((labels >= 1).sum())
            log.info("iter %d epoch %d loss %.6f loss_cls %.6f loss_loc %.6f "
                     "lr %g fg %d bg %d images %d flips %d",
                     it, epoch, float(total.data), l_cls, l_loc, lr,
                     n_fg, labels.size - n_fg, len(images), flips)
            run += float(total.data)
            it += 1
            flips_done += flips
            draws += len(images)
        epoch_losses.append(run / iters)
        log.info("epoch %d mean_loss %.6f lr %g", epoch, epoch_losses[-1], lr)
        if checkpoint_dir is not None:
            path = os.path.join(checkpoint_dir, f"epoch_{epoch:02d}.ckpt")
            model.save(path)
            ckpts.append(path)
            log.info("checkpoint epoch %d %s", epoch, path)
    return TrainResult(model=model, epoch_losses=epoch_losses, iterations=it,
                       checkpoints=ckpts, flip_draws=draws, flips=flips_done)
