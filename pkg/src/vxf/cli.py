"""Command-line entry point: ``vxf {train,eval,infer,verify,synth}``.

Exit codes: 0 success, 1 invariant or verification failure, 2 usage error.
``VXF_THREADS`` caps the worker pool used for data synthesis and sliding windows.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

from vxf.config import RunConfig

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _flag_type(annotation):
    text = str(annotation)
    if "bool" in text:
        return "bool"
    if "list" in text:
        return "list"
    if "int" in text and "float" not in text:
        return int
    if "float" in text:
        return float
    return str


def _parse_bool(v: str) -> bool:
    low = v.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {v!r}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration; flags override its fields")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = _flag_type(f.type)
        if kind == "bool":
            p.add_argument(flag, dest=f.name, type=_parse_bool, default=None, metavar="BOOL")
        elif kind == "list":
            p.add_argument(flag, dest=f.name, type=int, nargs=3, default=None, metavar=("D", "H", "W"))
        elif f.name == "weight_decay":
            p.add_argument(flag, dest=f.name, type=float, default=None)
        else:
            p.add_argument(flag, dest=f.name, type=kind, default=None)


def _config(args) -> RunConfig:
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text(encoding="utf-8"))
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            base[f.name] = value
    unknown = sorted(set(base) - {f.name for f in fields(RunConfig)})
    if unknown:
        raise UsageError(f"unknown config fields: {unknown}")
    try:
        return RunConfig(**base)
    except TypeError as exc:
        raise UsageError(str(exc)) from exc
    # ValueError from RunConfig.validate is an invariant violation (exit 1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vxf", description="Volumetric hybrid CNN/Transformer segmentation on phantoms.")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model; writes checkpoint, loss log and run manifest")
    _add_config_flags(p)
    p.add_argument("--resume", help="run directory to resume from")

    p = sub.add_parser("eval", help="sliding-window evaluation into a JSON metrics report")
    _add_config_flags(p)
    p.add_argument("--checkpoint", default=None, help="run directory or .vxf file")
    p.add_argument("--report", default=None, help="report path (default <out-dir>/metrics.json)")
    p.add_argument("--ground-truth-as-prediction", action="store_true",
                   help="score the labels against themselves (metric sanity check)")

    p = sub.add_parser("infer", help="predict label and probability volumes for one image volume")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="volume header (.json)")
    p.add_argument("--output", required=True, help="output directory")

    p = sub.add_parser("verify", help="run the built-in verification suites")
    p.add_argument("--inject-fault", default=None, help="deliberately break a component (mutation check)")
    p.add_argument("--suite", action="append", default=None, help="run only the named suite(s)")
    p.add_argument("--json", dest="json_out", default=None, help="also write the summary as JSON")

    p = sub.add_parser("synth", help="write a phantom dataset (image/label volumes plus manifest)")
    p.add_argument("spec", nargs="?", default=None, help="JSON spec file: {task|phantom, count, seed, extents}")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--task", default=None, choices=("vessel_tumor", "multi_organ"))
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    return parser


def _run(args) -> int:
    if args.verb == "verify":
        from vxf.verify import run_suites

        ok = run_suites(fault=args.inject_fault, only=args.suite, json_out=args.json_out)
        return EXIT_OK if ok else EXIT_FAIL

    if args.verb == "synth":
        from vxf.run import run_synth

        spec = json.loads(Path(args.spec).read_text(encoding="utf-8")) if args.spec else {}
        for key in ("task", "count", "seed"):
            if getattr(args, key) is not None:
                spec[key] = getattr(args, key)
        path = run_synth(spec, args.out)
        print(f"wrote {path}")
        return EXIT_OK

    from vxf import run

    cfg = _config(args)
    if args.verb == "train":
        summary = run.train(cfg, resume=args.resume)
        print(f"trained {summary['steps_done']} steps; final loss {summary['final_loss']}; "
              f"checkpoint in {cfg.out_dir}")
        return EXIT_OK
    if args.verb == "eval":
        report_path = args.report or str(Path(cfg.out_dir) / "metrics.json")
        if args.ground_truth_as_prediction:
            from vxf.metrics import write_report

            cases = run.validation_cases(cfg)
            report = run.eval_labels([c.labels for c in cases], cases, cfg.num_classes)
            report["config_hash"] = cfg.hash()
            write_report(report_path, report)
        else:
            if not args.checkpoint:
                raise UsageError("eval needs --checkpoint (or --ground-truth-as-prediction)")
            report = run.run_eval(cfg, args.checkpoint, report_path)
        print(json.dumps(report["mean"], sort_keys=True))
        return EXIT_OK
    if args.verb == "infer":
        lab, prob = run.run_infer(cfg, args.checkpoint, args.input, args.output)
        print(f"wrote {lab} and {prob}")
        return EXIT_OK
    raise UsageError(f"unknown verb {args.verb}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _run(args)
    except UsageError as exc:
        print(f"vxf: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"vxf: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # invariant violations surface as exit 1
        print(f"vxf: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
