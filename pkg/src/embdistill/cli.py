"""Command-line entry point.

Subcommands: gen-data, train, eval, sweep, inspect-lattice, oracle-check.
Configs are JSON documents; every config field is also exposed as a
--field=value flag that overrides the file.  Exit codes: 0 success,
1 runtime failure, 2 usage error.
"""

import argparse
import dataclasses
import json
import sys

from .model import ema_params, load_checkpoint
from .train import (
    GenDataConfig,
    TrainConfig,
    evaluate_split,
    generate_data,
    inspect_lattice,
    load_data,
    oracle_check,
    sweep_run,
    train_run,
)


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_config_flags(parser: argparse.ArgumentParser, cls):
    parser.add_argument("--config", help="JSON config file (flags override its fields)")
    for field in dataclasses.fields(cls):
        if field.type in ("bool", bool):
            conv = _parse_bool
        elif field.type in ("int", int):
            conv = int
        elif field.type in ("float", float):
            conv = float
        else:
            conv = str
        parser.add_argument(f"--{field.name}", type=conv, default=None, help=f"(default: {field.default})")


def _build_config(args, cls, parser):
    data = {}
    if args.config is not None:
        try:
            with open(args.config) as fh:
                data = json.load(fh)
        except FileNotFoundError:
            parser.error(f"config file not found: {args.config}")
        except json.JSONDecodeError as exc:
            parser.error(f"config file is not valid JSON: {exc}")
    for field in dataclasses.fields(cls):
        value = getattr(args, field.name, None)
        if value is not None:
            data[field.name] = value
    try:
        return cls.from_dict(data)
    except (ValueError, TypeError) as exc:
        parser.error(str(exc))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embdistill",
        description="Train and inspect toy sequence models with embedding-distillation losses.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen-data", help="generate corpus, splits, and teacher targets")
    _add_config_flags(p_gen, GenDataConfig)

    p_train = sub.add_parser("train", help="train one configuration")
    _add_config_flags(p_train, TrainConfig)

    p_eval = sub.add_parser("eval", help="token error rate of a checkpoint on a split")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--data_dir", required=True)
    p_eval.add_argument("--split", default="test", help="train, dev, or test")
    p_eval.add_argument(
        "--weights",
        choices=("ema", "live"),
        default="ema",
        help="evaluate the EMA shadow (default) or the live parameters",
    )
    p_eval.add_argument("--max_symbols_per_frame", type=int, default=8)
    p_eval.add_argument("--out", default=None, help="optional path for the JSON report")

    p_sweep = sub.add_parser("sweep", help="train+eval over a grid of auxiliary weights")
    _add_config_flags(p_sweep, TrainConfig)
    p_sweep.add_argument(
        "--sigmas",
        default=None,
        help="comma-separated weights (default: the decoder's standard grid); 0 is always added",
    )

    p_ins = sub.add_parser("inspect-lattice", help="dump lattice tables for one utterance")
    p_ins.add_argument("checkpoint")
    p_ins.add_argument("utterance_id")
    p_ins.add_argument("--data_dir", required=True)
    p_ins.add_argument("--out_dir", default=".")

    p_orc = sub.add_parser("oracle-check", help="compare lattice routines against enumeration")
    p_orc.add_argument("--max_t", type=int, default=5)
    p_orc.add_argument("--max_n", type=int, default=3)
    p_orc.add_argument("--max_k", type=int, default=4)
    p_orc.add_argument("--instances", type=int, default=50)
    p_orc.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "gen-data":
            cfg = _build_config(args, GenDataConfig, parser)
            info = generate_data(cfg)
            print(json.dumps(info, indent=1, sort_keys=True))
        elif args.command == "train":
            cfg = _build_config(args, TrainConfig, parser)
            summary = train_run(cfg)
            print(json.dumps({k: summary[k] for k in
                              ("best_epoch", "best_dev_ter", "test_ter", "parameter_count")},
                             indent=1, sort_keys=True))
        elif args.command == "eval":
            params, opt, _ = load_checkpoint(args.checkpoint)
            if args.weights == "ema":
                params = ema_params(opt, params)
            parts, _, _ = load_data(args.data_dir)
            if args.split not in parts:
                raise ValueError(f"unknown split {args.split!r}")
            report = evaluate_split(params, parts[args.split], args.max_symbols_per_frame)
            report["split"] = args.split
            report["weights"] = args.weights
            text = json.dumps(report, indent=1, sort_keys=True)
            print(text)
            if args.out:
                with open(args.out, "w") as fh:
                    fh.write(text + "\n")
        elif args.command == "sweep":
            cfg = _build_config(args, TrainConfig, parser)
            sigmas = None
            if args.sigmas is not None:
                try:
                    sigmas = [float(s) for s in args.sigmas.split(",") if s.strip()]
                except ValueError:
                    parser.error(f"--sigmas must be comma-separated numbers, got {args.sigmas!r}")
            rows = sweep_run(cfg, sigmas)
            for row in rows:
                marker = " <- best dev" if row["best"] else ""
                print(
                    f"sigma={row['sigma']:<8g} status={row['status']} "
                    f"dev={row['dev_ter']} test={row['test_ter']}{marker}"
                )
        elif args.command == "inspect-lattice":
            dump = inspect_lattice(args.checkpoint, args.data_dir, args.utterance_id, args.out_dir)
            print(
                json.dumps(
                    {"utterance_id": dump["utterance_id"], "T": dump["T"], "N": dump["N"],
                     "K": dump["K"], "log_Z": dump["log_Z"]},
                    indent=1, sort_keys=True,
                )
            )
        elif args.command == "oracle-check":
            report = oracle_check(
                max_t=args.max_t, max_n=args.max_n, max_k=args.max_k,
                instances=args.instances, seed=args.seed,
            )
            for warning in report["warnings"]:
                print(f"warning: {warning}", file=sys.stderr)
            print(
                f"checks run: {report['checks']}, failures: {len(report['failures'])}, "
                f"passed: {report['passed']}"
            )
            for failure in report["failures"]:
                print(f"FAIL: {failure}", file=sys.stderr)
            return 0 if report["passed"] else 1
        return 0
    except BrokenPipeError:
        raise
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
