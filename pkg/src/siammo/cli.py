"""``siammo`` command line: synth, train, track, eval, bench and gradcheck.

Exit status is 0 on success, 1 on a usage error, 2 when input data cannot be
read or is malformed, and 3 when ``gradcheck`` finds a mismatch.
"""
from __future__ import annotations

import argparse
import glob
import logging
import os
import sys

import yaml

from .errors import SiamMoError
from .evaluator import DIST_THRESHOLDS, IOU_THRESHOLDS, evaluate, write_curve_csv
from .gradcheck import run_suite
from .network import ModelConfig, init_params, model_config_from_dict, model_config_to_dict
from .pointcloud_io import SynthConfig, load_kitti_tracks, read_sequences, save_sequences, synth_sequence
from .tracker import (bench_sequences, bench_summary, read_boxes_csv, track_sequence, track_zero_motion,
                      write_bench_csv, write_boxes_csv)
from .trainer import DESK_TRAIN, TrainConfig, load_params, train, train_config_from_dict, train_config_to_dict

log = logging.getLogger("siammo")

LOG_ENV = "SIAMMO_LOG"
EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config


def default_config() -> dict:
    return {"model": model_config_to_dict(ModelConfig()),
            "train": train_config_to_dict(TrainConfig(**DESK_TRAIN))}


def _set_path(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    if len(parts) != 2 or parts[0] not in cfg:
        raise UsageError(f"--set key must be model.<field> or train.<field>, got {key!r}")
    cfg[parts[0]][parts[1]] = value


def resolve_config(path: str | None, overrides=()) -> tuple:
    """Desk defaults, then the YAML file's ``model``/``train`` sections, then ``key=value`` overrides."""
    cfg = default_config()
    if path is not None:
        with open(path) as f:
            doc = yaml.safe_load(f) or {}
        if not isinstance(doc, dict) or set(doc) - {"model", "train"}:
            raise SiamMoError(f"{path}: top level must hold only 'model' and 'train' sections")
        for section, values in doc.items():
            cfg[section].update(values or {})
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        _set_path(cfg, key.strip(), yaml.safe_load(raw))
    try:
        return model_config_from_dict(cfg["model"]), train_config_from_dict(cfg["train"])
    except (TypeError, ValueError) as e:
        raise SiamMoError(f"invalid config: {e}") from e


def dump_config(path, mcfg: ModelConfig, tcfg: TrainConfig) -> None:
    with open(path, "w") as f:
        yaml.safe_dump({"model": model_config_to_dict(mcfg), "train": train_config_to_dict(tcfg)},
                       f, sort_keys=False)


# ---------------------------------------------------------------------------
# data


def load_data(path: str, category: str = "Car") -> list:
    """Sequences from a dump file, a directory of dump files, or a KITTI tracking root."""
    if os.path.isfile(path):
        return read_sequences(path)
    if not os.path.isdir(path):
        raise FileNotFoundError(f"no such file or directory: {path}")
    label_dir = os.path.join(path, "label_02")
    if os.path.isdir(label_dir):
        seqs = []
        for label in sorted(glob.glob(os.path.join(label_dir, "*.txt"))):
            seq_id = os.path.splitext(os.path.basename(label))[0]
            seqs += load_kitti_tracks(path, seq_id, category)
        return seqs
    seqs = []
    for f in sorted(glob.glob(os.path.join(path, "*.txt"))):
        seqs += read_sequences(f)
    return seqs


def _require(seqs, path):
    if not seqs:
        raise SiamMoError(f"{path}: no sequences found")
    return seqs


def _model(args):
    cfg_path = args.config
    if cfg_path is None and args.checkpoint and os.path.exists(args.checkpoint + ".yaml"):
        cfg_path = args.checkpoint + ".yaml"
    mcfg, _ = resolve_config(cfg_path, args.set)
    params = load_params(args.checkpoint, mcfg) if args.checkpoint else init_params(mcfg)
    return mcfg, params


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = dict(n_frames=args.frames, seed=args.seed)
    if args.clutter is not None:
        cfg["n_clutter"] = args.clutter
    if args.density is not None:
        cfg["density"] = args.density
    seqs = [synth_sequence(SynthConfig(**{**cfg, "seed": args.seed + k})) for k in range(args.count)]
    save_sequences(args.out, seqs)
    print(f"wrote {len(seqs)} sequence(s) to {args.out}")
    return 0


def cmd_train(args) -> int:
    overrides = list(args.set)
    for flag, key in (("epochs", "train.epochs"), ("lr", "train.lr"), ("batch_size", "train.batch_size"),
                      ("seed", "train.seed"), ("workers", "train.workers"), ("max_steps", "train.max_steps"),
                      ("architecture", "model.architecture")):
        value = getattr(args, flag)
        if value is not None:
            overrides.append(f"{key}={value}")
    mcfg, tcfg = resolve_config(args.config, overrides)
    data = _require(load_data(args.data, args.category), args.data)
    dump_config(args.out + ".yaml", mcfg, tcfg)
    _, history, epochs = train(data, tcfg, mcfg, out=args.out, resume=args.resume)
    print(f"trained {len(history)} steps over {len(epochs)} epoch(s); "
          f"checkpoint {args.out}, losses {args.out}.loss.csv")
    return 0


def cmd_track(args) -> int:
    seqs = _require(load_data(args.data, args.category), args.data)
    if args.zero_motion:
        preds = {s.name: track_zero_motion(s) for s in seqs}
    else:
        mcfg, params = _model(args)
        preds = {s.name: track_sequence(params, mcfg, s) for s in seqs}
    write_boxes_csv(args.out, preds)
    if args.gts_out:
        write_boxes_csv(args.gts_out, {s.name: s.gt_boxes for s in seqs})
    print(f"tracked {len(seqs)} sequence(s) -> {args.out}")
    return 0


def format_report(report: dict) -> str:
    doc = {"success": round(report["success"], 6), "precision": round(report["precision"], 6),
           "frames": report["frames"],
           "sequences": {k: {"frames": v["frames"], "success": round(v["success"], 6),
                             "precision": round(v["precision"], 6)}
                         for k, v in report["sequences"].items()}}
    return yaml.safe_dump(doc, sort_keys=False)


def cmd_eval(args) -> int:
    report = evaluate(read_boxes_csv(args.preds), read_boxes_csv(args.gts),
                      skip_first_frame=args.skip_first_frame, bev_distance=args.bev_distance)
    text = format_report(report)
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    if args.curves:
        write_curve_csv(args.curves + ".success.csv", IOU_THRESHOLDS, report["success_curve"])
        write_curve_csv(args.curves + ".precision.csv", DIST_THRESHOLDS, report["precision_curve"])
    return 0


def cmd_bench(args) -> int:
    seqs = _require(load_data(args.data, args.category), args.data)
    mcfg, params = _model(args)
    rows = bench_sequences(params, mcfg, seqs)
    if args.out:
        write_bench_csv(args.out, rows)
    s = bench_summary(rows)
    print(f"frames {s['frames']}  preprocess {s['preprocess_ms']:.2f} ms  "
          f"forward {s['forward_ms']:.2f} ms  total {s['total_ms']:.2f} ms  fps {s['fps']:.1f}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(args.seed)
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{r.name:20s} {r.max_rel_error:.3e} < {r.tolerance:g}  {status}  "
              f"({r.checked} checked, {r.skipped} skipped, {r.seconds:.2f} s)")
    return 0 if all(r.ok for r in results) else EXIT_CHECK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="siammo", description="Motion-centric single-object tracking on point clouds.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def data_opts(sp):
        sp.add_argument("--data", required=True, help="sequence dump, directory of dumps, or KITTI root")
        sp.add_argument("--category", default="Car", help="KITTI object class to track")

    def model_opts(sp):
        sp.add_argument("--checkpoint", help="trained parameters (random init when omitted)")
        sp.add_argument("--config", help="YAML config; defaults to <checkpoint>.yaml when present")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    sp = sub.add_parser("synth", help="write synthetic sequences")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--frames", type=int, default=30)
    sp.add_argument("--count", type=int, default=1, help="sequences with seeds seed, seed+1, ...")
    sp.add_argument("--clutter", type=int)
    sp.add_argument("--density", type=float)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train and checkpoint every epoch")
    data_opts(sp)
    sp.add_argument("--config")
    sp.add_argument("--out", required=True, help="checkpoint path; also writes <out>.loss.csv and <out>.yaml")
    sp.add_argument("--resume", help="continue from this checkpoint")
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config field, e.g. train.lr=0.001")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--max-steps", type=int)
    sp.add_argument("--architecture", choices=("siamese", "dual", "single"))
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("track", help="track every sequence from its first box")
    data_opts(sp)
    model_opts(sp)
    sp.add_argument("--out", required=True, help="predicted boxes CSV")
    sp.add_argument("--gts-out", help="also write the ground-truth boxes CSV")
    sp.add_argument("--zero-motion", action="store_true", help="baseline that never moves the box")
    sp.set_defaults(func=cmd_track)

    sp = sub.add_parser("eval", help="Success/Precision of predicted boxes")
    sp.add_argument("--preds", required=True)
    sp.add_argument("--gts", required=True)
    sp.add_argument("--skip-first-frame", action="store_true")
    sp.add_argument("--bev-distance", action="store_true", help="center distance on the ground plane")
    sp.add_argument("--out", help="also write the report here")
    sp.add_argument("--curves", metavar="PREFIX", help="write PREFIX.success.csv and PREFIX.precision.csv")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="per-frame preprocessing and forward time")
    data_opts(sp)
    model_opts(sp)
    sp.add_argument("--out", help="per-frame timing CSV")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=level if isinstance(logging.getLevelName(level), int) else "WARNING",
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"siammo: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, yaml.YAMLError, KeyError) as e:
        print(f"siammo: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
