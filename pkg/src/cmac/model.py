"""Full detector assembly: backbones, fusion, both attention paths, heads.

Parameters live as a flat dict of float64 arrays keyed ``group.tensor``
(``lstm.t_affine``, ``stn_0.w1``, ...). Each forward pass lifts them onto a
fresh tape via ``bind``; the group prefix is also the unit of gradient
checking and the checkpoint namespace.

Ablation switches change the architecture itself: with the global path off no
recurrent parameters exist and the classifier reads F_L alone; with the part
path off the local assembly reduces a single cube (no transformer parameters).
A disabled module therefore executes none of its code rather than running on
zeroed weights.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .detection import HeadParams, classify, decode_box, regress
from .errors import CheckpointError, ContractError, DimensionError
from .evaluation import Detection, nms
from .fusion import Box, conv1x1, fuse, pool_global, roi_pool_batch, slice_features
from .global_attention import (AttentionTrace, GlobalAttentionParams,
                               project_global, run_global_context)
from .part_attention import LocalAssemblyParams, StnParams, run_part_attention

SPATIAL_SCALE = 0.25  # two stride-2 convs
INIT_SCHEMES = ("xavier", "paper")


@dataclass
class ModelConfig:
    """Architecture dimensions and module switches."""
    image_size: int = 64
    k: int = 8            # global grid
    s: int = 4            # ROI grid
    d_embed: int = 32     # D: embedded channel width
    d_hidden: int = 32    # d: recurrent state width
    d_fc: int = 64
    t_steps: int = 4
    n_stn: int = 2
    num_classes: int = 3
    backbone_width: int = 16
    use_rgb_stream: bool = True
    use_depth_stream: bool = True
    use_global_attention: bool = True
    use_part_attention: bool = True
    init_scheme: str = "xavier"

    def __post_init__(self):
        dims = dict(image_size=self.image_size, k=self.k, s=self.s,
                    d_embed=self.d_embed, d_hidden=self.d_hidden, d_fc=self.d_fc,
                    t_steps=self.t_steps, num_classes=self.num_classes,
                    backbone_width=self.backbone_width)
        for name, v in dims.items():
            if int(v) != v or v < 1:
                raise ContractError(f"{name} must be a positive integer, got {v}")
        if self.n_stn < 0:
            raise ContractError(f"n_stn must be >= 0, got {self.n_stn}")
        if not (self.use_rgb_stream or self.use_depth_stream):
            raise ContractError("at least one modality stream must be enabled")
        if self.image_size % 4 != 0:
            raise ContractError(f"image_size must be divisible by 4, got {self.image_size}")
        fmap = self.image_size // 4
        if self.k > fmap or self.s > fmap:
            raise ContractError(
                f"grids K={self.k}, S={self.s} exceed the {fmap}x{fmap} feature map")
        if self.init_scheme not in INIT_SCHEMES:
            raise ContractError(
                f"unknown init scheme {self.init_scheme!r}; options {INIT_SCHEMES}")

    @property
    def fused_channels(self) -> int:
        return self.backbone_width * (int(self.use_rgb_stream) +
                                      int(self.use_depth_stream))

    @property
    def effective_stns(self) -> int:
        return self.n_stn if self.use_part_attention else 0


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Tensor name -> shape, in deterministic (checkpoint) order."""
    w, d_in = cfg.backbone_width, 3
    big_d, d, dfc = cfg.d_embed, cfg.d_hidden, cfg.d_fc
    cf = cfg.fused_channels
    shapes: dict[str, tuple] = {}
    for mod, on in (("rgb", cfg.use_rgb_stream), ("depth", cfg.use_depth_stream)):
        if not on:
            continue
        shapes[f"backbone_{mod}.conv1_w"] = (w, d_in, 5, 5)
        shapes[f"backbone_{mod}.conv1_b"] = (w,)
        shapes[f"backbone_{mod}.conv2_w"] = (w, w, 3, 3)
        shapes[f"backbone_{mod}.conv2_b"] = (w,)
    shapes["embed.local_w"] = (cf, big_d)
    shapes["embed.local_b"] = (big_d,)
    if cfg.use_global_attention:
        shapes["embed.global_w"] = (cf, big_d)
        shapes["embed.global_b"] = (big_d,)
        shapes["lstm.t_affine"] = (d + 2 * big_d, 4 * d)
        shapes["lstm.t_bias"] = (4 * d,)
        k2 = cfg.k * cfg.k
        shapes["phi.w1"] = (d, d)
        shapes["phi.b1"] = (d,)
        shapes["phi.w2"] = (d, k2)
        shapes["phi.b2"] = (k2,)
        for st in ("c", "h"):
            shapes[f"f_init.{st}_w1"] = (big_d, d)
            shapes[f"f_init.{st}_b1"] = (d,)
            shapes[f"f_init.{st}_w2"] = (d, d)
            shapes[f"f_init.{st}_b2"] = (d,)
        shapes["global_proj.w1"] = (big_d, dfc)
        shapes["global_proj.b1"] = (dfc,)
        shapes["global_proj.w2"] = (dfc, dfc)
        shapes["global_proj.b2"] = (dfc,)
    for i in range(cfg.effective_stns):
        shapes[f"stn_{i}.w1"] = (big_d, d)
        shapes[f"stn_{i}.b1"] = (d,)
        shapes[f"stn_{i}.w2"] = (d, 2)
        shapes[f"stn_{i}.b2"] = (2,)
    shapes["local_assembly.reduce_w"] = ((cfg.effective_stns + 1) * big_d, big_d)
    shapes["local_assembly.reduce_b"] = (big_d,)
    shapes["local_assembly.fc1_w"] = (big_d * cfg.s * cfg.s, dfc)
    shapes["local_assembly.fc1_b"] = (dfc,)
    shapes["local_assembly.fc2_w"] = (dfc, dfc)
    shapes["local_assembly.fc2_b"] = (dfc,)
    cls_in = dfc * (2 if cfg.use_global_attention else 1)
    shapes["heads.cls_w"] = (cls_in, cfg.num_classes + 1)
    shapes["heads.cls_b"] = (cfg.num_classes + 1,)
    shapes["heads.loc_w"] = (dfc, 4 * cfg.num_classes)
    shapes["heads.loc_b"] = (4 * cfg.num_classes,)
    return shapes


def _xavier(rng, shape) -> np.ndarray:
    if len(shape) == 2:
        fan_in, fan_out = shape
    else:  # conv [O, C, kh, kw]
        o, c, kh, kw = shape
        fan_in, fan_out = c * kh * kw, o * kh * kw
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


# 2-D weights that are 1x1 convolutions in disguise (paper scheme: sigma 0.001)
_CONV_LIKE = {"embed.local_w", "embed.global_w", "local_assembly.reduce_w"}


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Draw all parameters.

    xavier: uniform Glorot everywhere.  paper: Gaussians (fc 0.01, conv
    0.001) with the recurrent transform Glorot-initialized; from-scratch desk
    training converges noticeably faster under xavier, hence the default.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in expected_shapes(cfg).items():
        if len(shape) == 1:
            out[name] = np.zeros(shape)
        elif cfg.init_scheme == "xavier" or name == "lstm.t_affine":
            out[name] = _xavier(rng, shape)
        elif len(shape) == 4 or name in _CONV_LIKE:
            out[name] = rng.normal(0.0, 0.001, size=shape)
        else:
            out[name] = rng.normal(0.0, 0.01, size=shape)
    return out


@dataclass
class BoundModel:
    """One tape's view of the parameters, pre-assembled into module structs."""
    leaves: dict
    heads: HeadParams
    assembly: LocalAssemblyParams
    stns: list
    gparams: GlobalAttentionParams | None


@dataclass
class ImageFeatures:
    """Per-image forward products, rows aligned with the proposal list."""
    f_l: Tensor                      # [B, d_fc]
    f_g: Tensor | None               # [B, d_fc]
    trace: AttentionTrace | None
    parts: list                      # N translation tensors [B, 2]


class CmacModel:
    """Parameter store plus the forward assembly."""

    def __init__(self, config: ModelConfig, seed: int = 0,
                 arrays: dict[str, np.ndarray] | None = None):
        self.config = config
        if arrays is None:
            self.arrays = init_params(config, seed)
        else:
            self.arrays = {}
            self.load_arrays(arrays)

    # -- persistence ------------------------------------------------------

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        want = expected_shapes(self.config)
        for name, shape in want.items():
            if name not in arrays:
                raise CheckpointError(
                    f"checkpoint is missing tensor '{name}' (expected shape {shape})")
            got = np.asarray(arrays[name])
            if tuple(got.shape) != shape:
                raise CheckpointError(
                    f"checkpoint tensor '{name}' has shape {tuple(got.shape)}, "
                    f"model expects {shape}")
        extra = sorted(set(arrays) - set(want))
        if extra:
            raise CheckpointError(f"checkpoint holds unexpected tensors: {extra}")
        self.arrays = {k: np.array(arrays[k], dtype=np.float64) for k in want}

    def save(self, path) -> None:
        save_checkpoint(path, self.arrays)

    @classmethod
    def load(cls, path, config: ModelConfig) -> "CmacModel":
        return cls(config, arrays=load_checkpoint(path))

    def param_groups(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {}
        for name in self.arrays:
            groups.setdefault(name.split(".", 1)[0], []).append(name)
        return groups

    # -- forward ----------------------------------------------------------

    def bind(self, tape: ad.Tape) -> BoundModel:
        cfg = self.config
        lv = {name: tape.leaf(arr) for name, arr in self.arrays.items()}
        heads = HeadParams(lv["heads.cls_w"], lv["heads.cls_b"],
                           lv["heads.loc_w"], lv["heads.loc_b"])
        assembly = LocalAssemblyParams(
            lv["local_assembly.reduce_w"], lv["local_assembly.reduce_b"],
            lv["local_assembly.fc1_w"], lv["local_assembly.fc1_b"],
            lv["local_assembly.fc2_w"], lv["local_assembly.fc2_b"])
        stns = [StnParams(lv[f"stn_{i}.w1"], lv[f"stn_{i}.b1"],
                          lv[f"stn_{i}.w2"], lv[f"stn_{i}.b2"])
                for i in range(cfg.effective_stns)]
        gparams = None
        if cfg.use_global_attention:
            gparams = GlobalAttentionParams(
                t_affine=lv["lstm.t_affine"], t_bias=lv["lstm.t_bias"],
                phi_w1=lv["phi.w1"], phi_b1=lv["phi.b1"],
                phi_w2=lv["phi.w2"], phi_b2=lv["phi.b2"],
                init_c_w1=lv["f_init.c_w1"], init_c_b1=lv["f_init.c_b1"],
                init_c_w2=lv["f_init.c_w2"], init_c_b2=lv["f_init.c_b2"],
                init_h_w1=lv["f_init.h_w1"], init_h_b1=lv["f_init.h_b1"],
                init_h_w2=lv["f_init.h_w2"], init_h_b2=lv["f_init.h_b2"],
                proj_w1=lv["global_proj.w1"], proj_b1=lv["global_proj.b1"],
                proj_w2=lv["global_proj.w2"], proj_b2=lv["global_proj.b2"])
        return BoundModel(lv, heads, assembly, stns, gparams)

    def _backbone(self, bound: BoundModel, mod: str, image: Tensor) -> Tensor:
        lv = bound.leaves
        x = ad.relu(ad.conv2d(image, lv[f"backbone_{mod}.conv1_w"],
                              lv[f"backbone_{mod}.conv1_b"], stride=2, pad=2))
        return ad.relu(ad.conv2d(x, lv[f"backbone_{mod}.conv2_w"],
                                 lv[f"backbone_{mod}.conv2_b"], stride=2, pad=1))

    def forward_image(self, bound: BoundModel, rgb, geo,
                      boxes: list[Box]) -> ImageFeatures:
        """Features for every proposal of one image (rows follow ``boxes``)."""
        cfg = self.config
        if not boxes:
            raise ContractError("forward_image: no proposals")
        n = cfg.image_size
        rgb_feat = depth_feat = None
        if cfg.use_rgb_stream:
            rgb = np.asarray(rgb)
            if rgb.shape != (3, n, n):
                raise DimensionError(f"rgb must be [3,{n},{n}], got {rgb.shape}")
            rgb_feat = self._backbone(bound, "rgb", ad.const(rgb))
        if cfg.use_depth_stream:
            geo = np.asarray(geo)
            if geo.shape != (3, n, n):
                raise DimensionError(f"geo must be [3,{n},{n}], got {geo.shape}")
            depth_feat = self._backbone(bound, "depth", ad.const(geo))
        fused = fuse(rgb_feat, depth_feat)

        local_cubes = roi_pool_batch(fused, boxes, SPATIAL_SCALE, cfg.s)
        local_emb = conv1x1(local_cubes, bound.leaves["embed.local_w"],
                            bound.leaves["embed.local_b"])
        f_l, parts = run_part_attention(local_emb, bound.stns, bound.assembly)

        f_g, trace = None, None
        if cfg.use_global_attention:
            gcube = pool_global(fused, cfg.k)
            gemb = conv1x1(gcube, bound.leaves["embed.global_w"],
                           bound.leaves["embed.global_b"])
            z = ad.mean_axes(local_emb, (2, 3))
            x_t, trace = run_global_context(slice_features(gemb), z,
                                            bound.gparams, cfg.t_steps)
            f_g = project_global(x_t, bound.gparams)
        return ImageFeatures(f_l=f_l, f_g=f_g, trace=trace, parts=parts)

    def forward_heads(self, bound: BoundModel,
                      feats: list[ImageFeatures]) -> tuple[Tensor, Tensor]:
        """(probs [B,C+1], offsets [B,4C]) over the concatenated image batches."""
        f_l = feats[0].f_l if len(feats) == 1 else ad.concat(
            [f.f_l for f in feats], axis=0)
        f_g = None
        if self.config.use_global_attention:
            f_g = feats[0].f_g if len(feats) == 1 else ad.concat(
                [f.f_g for f in feats], axis=0)
        return classify(f_l, f_g, bound.heads), regress(f_l, bound.heads)

    # -- inference --------------------------------------------------------

    def score_proposals(self, rgb, geo, proposals: list[Box]):
        """(probs, offsets) arrays plus the ImageFeatures for inspection."""
        tape = ad.Tape()
        bound = self.bind(tape)
        feats = self.forward_image(bound, rgb, geo, proposals)
        probs, t_star = self.forward_heads(bound, [feats])
        return probs.data, t_star.data, feats

    def detect(self, rgb, geo, proposals: list[Box],
               nms_thresh: float = 0.3) -> list[Detection]:
        probs, t_star, _ = self.score_proposals(rgb, geo, proposals)
        return detections_from_scores(proposals, probs, t_star,
                                      self.config.num_classes,
                                      self.config.image_size, nms_thresh)


def detections_from_scores(proposals: list[Box], probs: np.ndarray,
                           t_star: np.ndarray, num_classes: int,
                           image_size: int, nms_thresh: float) -> list[Detection]:
    """Decode every (proposal, class) pair, clip, drop degenerates, NMS."""
    dets = []
    for b, prop in enumerate(proposals):
        for c in range(1, num_classes + 1):
            off = t_star[b, 4 * (c - 1):4 * c]
            box = decode_box(prop, off).clip(float(image_size), float(image_size))
            if box.area <= 0.0:
                continue
            dets.append(Detection(box, c, float(probs[b, c])))
    return nms(dets, nms_thresh)


class AveragedStreams:
    """Late fusion of two single-modality models: mean scores and offsets.

    Mirrors the two-stream protocol where no cross-modal features exist; both
    models must share class count and image size and see identical proposals.
    """

    def __init__(self, rgb_model: CmacModel, depth_model: CmacModel):
        a, b = rgb_model.config, depth_model.config
        if (a.num_classes, a.image_size) != (b.num_classes, b.image_size):
            raise ContractError("averaged streams need matching classes and size")
        self.rgb_model = rgb_model
        self.depth_model = depth_model
        self.config = a

    def score_proposals(self, rgb, geo, proposals: list[Box]):
        p1, t1, _ = self.rgb_model.score_proposals(rgb, geo, proposals)
        p2, t2, _ = self.depth_model.score_proposals(rgb, geo, proposals)
        return 0.5 * (p1 + p2), 0.5 * (t1 + t2), None

    def detect(self, rgb, geo, proposals: list[Box],
               nms_thresh: float = 0.3) -> list[Detection]:
        probs, t_star, _ = self.score_proposals(rgb, geo, proposals)
        return detections_from_scores(proposals, probs, t_star,
                                      self.config.num_classes,
                                      self.config.image_size, nms_thresh)
