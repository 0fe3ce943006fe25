"""Command line entry point: ``conquer {generate-data,train,eval,infer,plot}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import PRESETS, load_config, preset, save_config


def _config(args):
    config = load_config(args.config, args.set or ())
    if getattr(args, "preset", None):
        config = preset(args.preset, config)
    return config


def cmd_generate_data(args):
    from .experiment import generate_data

    config = _config(args)
    paths = generate_data(config, args.out, args.split)
    print(f"wrote {len(paths)} scenes to {args.out}")


def cmd_train(args):
    from .experiment import run_train

    config = _config(args)
    state = run_train(config, args.out, args.data)
    print(f"trained {state.step} steps; checkpoint in {args.out}")


def cmd_eval(args):
    from .experiment import run_eval

    nms_classes = None if args.nms_classes is None else [int(c) for c in args.nms_classes.split(",") if c]
    result = run_eval(args.checkpoint, args.out, mode=args.mode, param=args.param, nms_classes=nms_classes,
                      data_dir=args.data)
    for key, value in result.report.to_flat().items():
        print(f"{key}={value}")


def cmd_infer(args):
    from .experiment import run_infer

    dets = run_infer(args.checkpoint, args.scenes, args.out, args.mode, args.param)
    print(f"wrote {sum(len(d) for d in dets.values())} detections for {len(dets)} scenes to {args.out}")


def cmd_plot(args):
    from .experiment import run_eval
    from .plots import emit_plots

    reports = {}
    for item in args.checkpoints or []:
        name, _, path = item.rpartition("=")
        reports[name or Path(path).parent.name] = run_eval(path).report
    written = emit_plots(args.metrics, reports, args.out)
    if not written:
        print("nothing to plot: the metrics log is empty")
    for p in written:
        print(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conquer", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted override, e.g. contrast.tau=0.5 (repeatable)")
        p.add_argument("--preset", choices=sorted(PRESETS), help="ablation preset applied on top of the config")

    p = sub.add_parser("generate-data", help="write scene files")
    with_config(p)
    p.add_argument("--split", choices=("train", "eval"), default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train and write checkpoint + metrics log")
    with_config(p)
    p.add_argument("--data", help="directory of scene files (generated on the fly when missing)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    def with_inference(p):
        p.add_argument("--mode", choices=("topN", "threshold"))
        p.add_argument("--param", type=float, help="N for topN, score threshold otherwise")

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out scenes")
    p.add_argument("checkpoint")
    p.add_argument("--out")
    p.add_argument("--data")
    p.add_argument("--nms-classes", help="comma-separated class ids to run NMS on (empty string disables)")
    with_inference(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="dump detections for scene files")
    p.add_argument("checkpoint")
    p.add_argument("scenes", nargs="+")
    p.add_argument("--out", required=True)
    with_inference(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("plot", help="loss curves, PR curves and prediction counts")
    p.add_argument("metrics", help="metrics.jsonl of a training run")
    p.add_argument("--checkpoints", nargs="*", metavar="NAME=PATH", help="checkpoints to evaluate and compare")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("dump-config", help="print the resolved config as YAML")
    with_config(p)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_dump_config)
    return parser


def cmd_dump_config(args):
    import yaml

    config = _config(args)
    if args.out == "-":
        yaml.safe_dump(config.to_dict(), sys.stdout, sort_keys=False)
    else:
        save_config(config, args.out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
