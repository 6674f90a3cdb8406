"""``tsa`` command-line entry point.

Settings resolve in three layers: per-command defaults, then ``--config``
JSON, then explicit flags. Exit codes: 0 success, 1 configuration error,
2 failed equivalence suite.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .bench import COMMAND_DEFAULTS, COMMANDS, Report, RunConfig, run
from .model import ConfigError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _floats(text: str) -> list:
    return [float(t) for t in text.split(",") if t]


def _ints(text: str) -> list:
    return [int(t) for t in text.split(",") if t]


def _budgets(text: str) -> list:
    return [None if t in ("dense", "none", "-") else int(t) for t in text.split(",") if t]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tsa", description="Token-sparse attention experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON file with RunConfig fields")
    p.add_argument("--mode", choices=("dense", "dynamic", "fixed"))
    p.add_argument("--tau", type=_floats, nargs="+", help="coverage values (space or comma separated)")
    p.add_argument("--s-fixed", dest="s_fixed", type=_floats, nargs="+", help="fixed sparsity ratios")
    p.add_argument("--delta", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--last-q", dest="last_q", type=int)
    p.add_argument("--kernel", type=int)
    p.add_argument("--seq-len", dest="seq_len", type=_ints, nargs="+")
    p.add_argument("--seed", type=int)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--checkpoint")
    src.add_argument("--random-init", dest="random_init", action="store_true", default=None)
    p.add_argument("--out", help="report path; .csv writes rows, anything else JSON")
    p.add_argument("--trials", type=int, help="equiv: number of random instances")
    p.add_argument("--runs", type=int, help="triplet: number of sampled layer triplets")
    p.add_argument("--prompts", type=int, help="drift: number of calibration prompts")
    p.add_argument("--forced", choices=("last", "window", "none"))
    p.add_argument("--sparse-layers", dest="sparse_layers", type=_ints, nargs="+")
    p.add_argument("--k-keep", dest="k_keep", type=_budgets, nargs="+", help="flops: per-layer budgets, 'dense' for dense layers")
    p.add_argument("--csv", help="drift: also write per-layer drift as CSV here")
    return p


def _flatten(values):
    if values is None:
        return None
    return [x for chunk in values for x in chunk]


def resolve_config(argv: Sequence[str]) -> RunConfig:
    args = build_parser().parse_args(argv)
    settings = dict(COMMAND_DEFAULTS[args.command])
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(loaded) - RunConfig.field_names()
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        settings.update(loaded)
    for name in ("tau", "s_fixed", "seq_len", "sparse_layers", "k_keep"):
        setattr(args, name, _flatten(getattr(args, name)))
    for name, value in vars(args).items():
        if name != "config" and value is not None:
            settings[name] = value
    if settings.get("checkpoint"):
        settings["random_init"] = False
    try:
        cfg = RunConfig(**settings)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.validate()
    return cfg


def write_report(report: Report, out: Optional[str]) -> None:
    if out is None:
        sys.stdout.write(report.to_json())
        return
    text = report.to_csv() if out.endswith(".csv") else report.to_json()
    Path(out).write_text(text)


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cfg = resolve_config(argv)
        report = run(cfg)
    except ConfigError as exc:
        print(f"tsa: error: {exc}", file=sys.stderr)
        return 1
    write_report(report, cfg.out)
    if cfg.csv and report.command == "drift":
        Path(cfg.csv).write_text(report.to_csv())
    if report.exit_code:
        print(f"tsa: {report.command} failed", file=sys.stderr)
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
