"""Command-line entry point: run experiments, sweep a parameter, or check invariants."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

from . import checks
from . import experiment as exp
from .errors import ConfigurationError, DivergenceError, FormatError, InvalidArgumentError

OUT_DIR_ENV = "SMARTFL_OUT_DIR"

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract wants 1
        raise _UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="smartfl", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p_run = sub.add_parser("run", help="execute one experiment config")
    p_run.add_argument("--config", required=True, help="path to a JSON experiment config")
    p_run.add_argument("--seed", type=int, default=None, help="override master_seed")
    p_run.add_argument("--out", default=None, help="override the metrics output path")

    p_sweep = sub.add_parser("sweep", help="run the config once per value of one parameter")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--param", required=True, help="dotted config key, e.g. proxy.size")
    p_sweep.add_argument("--values", required=True, help="comma-separated values")

    sub.add_parser("check", help="run the invariant/property suite")
    return parser


def _resolve_output(path: str) -> str:
    out_dir = os.environ.get(OUT_DIR_ENV)
    if out_dir:
        path = os.path.join(out_dir, os.path.basename(path))
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    return path


def _execute(cfg: exp.ExperimentConfig, out_path: str) -> None:
    result = exp.run(cfg)
    out_path = _resolve_output(out_path)
    fmt = "json" if out_path.endswith(".json") else "csv"
    exp.write_metrics(result.records, out_path, fmt=fmt)
    accs = [r.test_accuracy for r in result.records if r.test_accuracy is not None]
    print(
        f"{cfg.aggregation.strategy}: rounds={cfg.rounds} "
        f"final_acc={accs[-1]:.4f} best_acc={max(accs):.4f} -> {out_path}"
    )


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _cmd_run(args) -> int:
    cfg = exp.load_config(args.config)
    if args.seed is not None:
        raw = exp.config_to_dict(cfg)
        raw["master_seed"] = args.seed
        cfg = exp.config_from_dict(raw)
    _execute(cfg, args.out if args.out else cfg.output)
    return EXIT_OK


def _cmd_sweep(args) -> int:
    with open(args.config, "r", encoding="utf-8") as f:
        try:
            base = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(
                f"invalid JSON in {args.config}: {e.msg} (line {e.lineno}, column {e.colno})"
            ) from e
    values = [v for v in args.values.split(",") if v != ""]
    if not values:
        raise ConfigurationError("sweep needs at least one value", field="--values")
    for text in values:
        raw = json.loads(json.dumps(base))
        exp.override_config_value(raw, args.param, _parse_value(text))
        cfg = exp.config_from_dict(raw)
        stem, ext = os.path.splitext(cfg.output)
        safe = args.param.replace(".", "_")
        _execute(cfg, f"{stem}__{safe}={text}{ext or '.csv'}")
    return EXIT_OK


def cli(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "check":
            start = time.perf_counter()
            ok = checks.run_all(verbose=True)
            print(f"checks {'passed' if ok else 'FAILED'} in {time.perf_counter() - start:.1f}s")
            return EXIT_OK if ok else EXIT_CONFIG
    except (ConfigurationError, FormatError, InvalidArgumentError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_CONFIG


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
