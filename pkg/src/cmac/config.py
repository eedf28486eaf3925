"""Run configuration: a flat key=value file format plus typed overrides.

Every field can come from (in order of precedence) a `--set key=value` flag,
a config file line `key = value`, or the dataclass default. Lines starting
with `#` and blank lines are ignored; inline `# ...` trails are stripped.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ConfigError
from .model import ModelConfig

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


@dataclass
class RunConfig:
    # model dims
    image_size: int = 64
    k: int = 8
    s: int = 4
    d_embed: int = 32
    d_hidden: int = 32
    d_fc: int = 64
    t_steps: int = 4
    n_stn: int = 2
    num_classes: int = 3
    backbone_width: int = 16
    init_scheme: str = "xavier"
    # training schedule
    batch_size: int = 128
    fg_fraction: float = 0.25
    images_per_batch: int = 2
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_decay_factor: float = 0.1
    decay_every_epochs: int = 4
    epochs: int = 10
    flip_prob: float = 0.5
    seed: int = 0
    # dataset synthesis / proposals
    train_scenes: int = 200
    test_scenes: int = 50
    proposals_per_gt: int = 8
    background_proposals: int = 8
    # evaluation
    nms_thresh: float = 0.3
    iou_thresh: float = 0.5
    ap_variant: str = "all"
    # ablation switches
    use_global_attention: bool = True
    use_part_attention: bool = True
    use_depth_stream: bool = True
    use_cross_modal_fusion: bool = True
    # gradient checking: coordinates sampled per parameter group
    # (0 = exhaustive; prohibitive at full desk dims)
    gradcheck_max_coords: int = 24
    # paths
    data_dir: str = "data"
    out_dir: str = "runs"

    def __post_init__(self):
        positive = ("image_size", "k", "s", "d_embed", "d_hidden", "d_fc",
                    "t_steps", "n_stn", "num_classes", "backbone_width",
                    "batch_size", "images_per_batch", "decay_every_epochs",
                    "epochs", "train_scenes", "test_scenes", "proposals_per_gt")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"config key '{name}' must be >= 1, "
                                  f"got {getattr(self, name)}")
        for name in ("lr", "momentum", "weight_decay", "lr_decay_factor",
                     "background_proposals", "gradcheck_max_coords", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"config key '{name}' must be >= 0, "
                                  f"got {getattr(self, name)}")
        for name in ("fg_fraction", "flip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"config key '{name}' must lie in [0,1], "
                                  f"got {getattr(self, name)}")
        if not 0.0 < self.nms_thresh < 1.0:
            raise ConfigError(f"config key 'nms_thresh' must lie in (0,1), "
                              f"got {self.nms_thresh}")
        if not 0.0 < self.iou_thresh <= 1.0:
            raise ConfigError(f"config key 'iou_thresh' must lie in (0,1], "
                              f"got {self.iou_thresh}")
        if self.ap_variant not in ("all", "voc07"):
            raise ConfigError(f"config key 'ap_variant' must be 'all' or "
                              f"'voc07', got '{self.ap_variant}'")

    def model_config(self, use_rgb: bool = True,
                     use_depth: bool | None = None) -> ModelConfig:
        """Architecture view of this run; modality toggles for stream splits."""
        return ModelConfig(
            image_size=self.image_size, k=self.k, s=self.s,
            d_embed=self.d_embed, d_hidden=self.d_hidden, d_fc=self.d_fc,
            t_steps=self.t_steps, n_stn=self.n_stn,
            num_classes=self.num_classes, backbone_width=self.backbone_width,
            use_rgb_stream=use_rgb,
            use_depth_stream=self.use_depth_stream if use_depth is None else use_depth,
            use_global_attention=self.use_global_attention,
            use_part_attention=self.use_part_attention,
            init_scheme=self.init_scheme)


_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELDS[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(
            f"config key '{key}' expects {kind}, got '{raw}'") from None


def parse_assignments(pairs, source: str = "--set") -> dict:
    """key=value strings -> typed dict; unknown keys and bad values rejected."""
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"{source}: expected key=value, got '{pair}'")
        key, _, raw = pair.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"{source}: unknown config key '{key}'")
        out[key] = _parse_value(key, raw)
    return out


def read_config_file(path) -> dict:
    try:
        text = open(path).read()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    out = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected 'key = value', got '{line}'")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"{path}:{ln}: unknown config key '{key}'")
        out[key] = _parse_value(key, raw)
    return out


def load_config(path=None, overrides=()) -> RunConfig:
    """File values under flag values under defaults, then validated."""
    merged = {}
    if path is not None:
        merged.update(read_config_file(path))
    merged.update(parse_assignments(overrides))
    return RunConfig(**merged)


def format_config(cfg: RunConfig) -> str:
    """Round-trippable `key = value` text block (also the log echo)."""
    lines = [f"{f.name} = {getattr(cfg, f.name)}"
             for f in dataclasses.fields(RunConfig)]
    return "\n".join(lines) + "\n"
