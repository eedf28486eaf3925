"""Command-line front end: synth, train, eval, ablate, gradcheck.

Every command is deterministic under a fixed seed — logs, checkpoints and
reports carry no timestamps, so repeated runs produce identical bytes.

Configuration is assembled lowest-priority-first: built-in defaults, then
``--config FILE``, then each ``--set key=value``, and finally ``--seed`` /
``--out`` (which are just shorthands for the corresponding keys).

Exit codes: 0 success, 1 usage or bad configuration, 2 data/format problems
(unreadable datasets, malformed files, checkpoint mismatches), 3 failed
checks (gradient check above tolerance, cold-module violations).
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np

from .ablation import ABLATION_DEFAULTS, run_ablation
from .config import RunConfig, parse_assignments, read_config_file
from .errors import CheckFailure, CmacError, ConfigError
from .evaluation import (dump_detections, evaluate, export_attention_map,
                         format_report)
from .gradcheck import run_gradcheck
from .model import CmacModel, detections_from_scores
from .synthdata import load_dataset
from .training import proposal_seed, proposal_set, train, write_splits

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CHECK = 3


class UsageError(Exception):
    """Bad command line; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; we reserve 2 for data problems.
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cmac",
                description="RGB-D detection head: synthesize data, train, "
                            "evaluate, ablate, gradient-check.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(sp):
        sp.add_argument("--config", metavar="PATH",
                        help="key = value configuration file")
        sp.add_argument("--set", dest="assignments", action="append",
                        default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
        sp.add_argument("--seed", type=int, metavar="N",
                        help="run seed (applied after --config/--set)")
        sp.add_argument("--out", metavar="DIR",
                        help="output directory (default: configured out_dir)")

    common(sub.add_parser("synth", help="write synthetic train/test splits"))
    common(sub.add_parser("train", help="train on the train split"))
    sp = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    sp.add_argument("checkpoint", help="checkpoint file to load")
    sp.add_argument("--export-attention", action="store_true",
                    help="write attention graymaps and part-window sidecars")
    common(sp)
    common(sub.add_parser("ablate", help="run the five-variant ladder"))
    common(sub.add_parser("gradcheck",
                          help="compare tape gradients with finite differences"))
    return p


def resolve_config(args, base: dict | None = None) -> RunConfig:
    merged = dict(base or {})
    if args.config:
        merged.update(read_config_file(args.config))
    merged.update(parse_assignments(args.assignments))
    try:
        cfg = RunConfig(**merged)
    except TypeError as e:  # unknown key survives only via a config source
        raise ConfigError(str(e)) from None
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    return cfg


def _setup_logging(log_path=None) -> None:
    """Route cmac.* records to stdout (and a file), message text only."""
    logger = logging.getLogger("cmac")
    logger.setLevel(logging.INFO)
    for h in list(logger.handlers):
        logger.removeHandler(h)
        h.close()
    plain = logging.Formatter("%(message)s")
    h = logging.StreamHandler(sys.stdout)
    h.setFormatter(plain)
    logger.addHandler(h)
    if log_path is not None:
        fh = logging.FileHandler(log_path, mode="w")
        fh.setFormatter(plain)
        logger.addHandler(fh)


# -- commands ---------------------------------------------------------------


def cmd_synth(cfg: RunConfig, args) -> int:
    for which, directory, count in write_splits(cfg):
        print(f"{which}: {count} scenes -> {directory}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    samples = load_dataset(os.path.join(cfg.data_dir, "train"))
    os.makedirs(cfg.out_dir, exist_ok=True)
    _setup_logging(os.path.join(cfg.out_dir, "train.log"))
    train(cfg, samples, checkpoint_dir=cfg.out_dir)
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    samples = load_dataset(os.path.join(cfg.data_dir, "test"))
    model = CmacModel.load(args.checkpoint, cfg.model_config())
    os.makedirs(cfg.out_dir, exist_ok=True)
    if args.export_attention and not model.config.use_global_attention:
        raise UsageError("--export-attention needs a model trained with "
                         "global attention enabled")

    dets_by_id, dets_list, gts = {}, [], []
    att_dir = os.path.join(cfg.out_dir, "attention")
    if args.export_attention:
        os.makedirs(att_dir, exist_ok=True)
    for i, s in enumerate(samples):
        image_id = f"{i:06d}"
        props = proposal_set(s.gts, cfg, seed=proposal_seed(cfg, "test", i))
        if args.export_attention:
            probs, t_star, feats = model.score_proposals(s.rgb, s.geo, props)
            dets = detections_from_scores(props, probs, t_star,
                                          cfg.num_classes, cfg.image_size,
                                          cfg.nms_thresh)
            # one map per image: the proposal with the highest object score
            row = int(np.argmax(probs[:, 1:].max(axis=1)))
            export_attention_map(feats.trace, cfg.image_size,
                                 os.path.join(att_dir, f"{image_id}.pgm"),
                                 parts=feats.parts, roi=props[row], row=row)
        else:
            dets = model.detect(s.rgb, s.geo, props, cfg.nms_thresh)
        dets_by_id[image_id] = dets
        dets_list.append(dets)
        gts.append(s.gts)

    per_class, map_value = evaluate(dets_list, gts, cfg.num_classes,
                                    cfg.iou_thresh, cfg.ap_variant)
    dump_detections(dets_by_id, os.path.join(cfg.out_dir, "detections.txt"))
    report = format_report(per_class, map_value)
    with open(os.path.join(cfg.out_dir, "ap_table.txt"), "w") as f:
        f.write(report + "\n")
    print(report)
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    os.makedirs(cfg.out_dir, exist_ok=True)
    _setup_logging(os.path.join(cfg.out_dir, "ablate.log"))
    result = run_ablation(cfg)
    table = result.format()
    with open(os.path.join(cfg.out_dir, "ablation.txt"), "w") as f:
        f.write(table + "\n")
    print(table)
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    result = run_gradcheck(cfg, seed=cfg.seed)
    print(result.format())
    if not result.passed:
        return EXIT_CHECK
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}

# ablate defaults to the tuned from-scratch ladder schedule; file/--set
# values still override it key by key.
COMMAND_BASES = {"ablate": ABLATION_DEFAULTS}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args, COMMAND_BASES.get(args.command))
        _setup_logging()
        return COMMANDS[args.command](cfg, args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CheckFailure as e:
        print(f"check failed: {e}", file=sys.stderr)
        return EXIT_CHECK
    except CmacError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
