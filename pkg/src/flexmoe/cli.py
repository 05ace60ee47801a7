"""Command-line experiment runner.

Config files are flat YAML mappings whose keys are :class:`ExperimentConfig` fields::

    C: 20
    E: 8
    strategy: flex
    partition: dirichlet
    dirichlet_alpha: 0.8

A manifest written by a previous run can be passed as ``--config`` to reproduce it.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import yaml

from . import __version__
from .assignment import dump_instance
from .errors import ConfigError, FlexMoEError
from .orchestrator import STRATEGIES, ExperimentConfig, run_experiment

ROUNDS_HEADER = ["round", "strategy", "indicator", "mean_acc", "cv_window", "maxmin_window", "relaxation_level"]

_FIELD_TYPES = {f.name: type(f.default) for f in fields(ExperimentConfig)}


def _coerce(key: str, value):
    if key not in _FIELD_TYPES:
        raise ConfigError("unknown key", key)
    want = _FIELD_TYPES[key]
    if isinstance(value, str) and want is not str:
        try:
            value = yaml.safe_load(value)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {value!r}: {exc}", key) from None
    if isinstance(value, bool) or (want is not str and not isinstance(value, (int, float))):
        raise ConfigError(f"expected {want.__name__}, got {value!r}", key)
    if want is int:
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"expected an integer, got {value!r}", key)
        return int(value)
    if want is float:
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"expected a string, got {value!r}", key)
    return value


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", "config")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}", "config") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping of config keys", "config")
    if "config" in data and "tool_version" in data:
        data = data["config"]
    return data


def parse_config(path: str | Path | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then file values, then ``overrides``; unknown keys are rejected."""
    values = {}
    if path is not None:
        for key, value in load_config_file(path).items():
            values[key] = _coerce(str(key), value)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = _coerce(key, value)
    return ExperimentConfig(**values)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_rounds(path: Path, rows_by_strategy) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ROUNDS_HEADER)
        for cfg, records in rows_by_strategy:
            for r in records:
                writer.writerow([
                    r.round, cfg.strategy, cfg.indicator, _fmt(r.mean_acc), _fmt(r.cv), _fmt(r.gap), r.relaxation_level,
                ])


def write_fitness(path: Path, rows_by_strategy) -> None:
    """Per-round snapshot of the fitness matrix used for that round's assignment."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        E = rows_by_strategy[0][0].E
        writer.writerow(["round", "strategy", "client"] + [f"q_{e}" for e in range(E)])
        for cfg, records in rows_by_strategy:
            for r in records:
                for c, row in enumerate(r.Q):
                    writer.writerow([r.round, cfg.strategy, c] + [_fmt(q) for q in row])


def run(cfg: ExperimentConfig, out_dir: str | Path, compare: bool = False, dump_dir: str | Path | None = None) -> dict:
    """Run one experiment (or all three strategies with ``compare``) and write the outputs.

    Returns the summary mapping that is also written to ``summary.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    configs = [replace(cfg, strategy=s) for s in STRATEGIES] if compare else [cfg]
    results, summaries = [], {}
    for run_cfg in configs:
        hook = None
        if dump_dir is not None:
            target = Path(dump_dir) / run_cfg.strategy if compare else Path(dump_dir)
            target.mkdir(parents=True, exist_ok=True)
            hook = lambda t, inst, target=target: dump_instance(inst, target / f"round_{t:04d}.txt")  # noqa: E731
        records, summary, _ = run_experiment(run_cfg, instance_hook=hook)
        results.append((run_cfg, records))
        summaries[run_cfg.strategy] = {
            "mean_accuracy": summary.mean_accuracy,
            "cv": summary.cv,
            "maxmin_gap": summary.gap,
            "relaxed_rounds": summary.relaxed_rounds,
            "rounds": summary.rounds,
            "full_window_load": summary.full_window_load,
        }
    paths = {"rounds": out / "rounds.csv", "fitness": out / "fitness.csv", "summary": out / "summary.json", "manifest": out / "manifest.json"}
    write_rounds(paths["rounds"], results)
    write_fitness(paths["fitness"], results)
    summary_doc = {"indicator": cfg.indicator, "compare": compare, "strategies": summaries}
    paths["summary"].write_text(json.dumps(summary_doc, indent=2, sort_keys=True) + "\n")
    manifest = {
        "tool_version": __version__,
        "seed": cfg.seed,
        "compare": compare,
        "config": cfg.to_dict(),
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "outputs": {k: str(v) for k, v in paths.items()},
    }
    paths["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return summary_doc


def _config_help() -> str:
    lines = ["config keys (YAML file or --set KEY=VALUE), with defaults:"]
    for f in fields(ExperimentConfig):
        lines.append(f"  {f.name:<20} {f.default!r}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flexmoe", description="Federated MoE expert-assignment simulator.")
    parser.add_argument("--version", action="version", version=f"flexmoe {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser(
        "run",
        help="run an experiment",
        epilog=_config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--config", help="YAML config file or a previous run's manifest.json")
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--indicator", choices=("acc", "loss"))
    p.add_argument("--backend", choices=("tiny", "oracle"))
    p.add_argument("--seed", type=int)
    p.add_argument("--rounds", type=int, dest="T_max", help="number of communication rounds (T_max)")
    p.add_argument("--threads", type=int, help="parallel local-training workers (default 1)")
    p.add_argument("--out", default="results", help="output directory (default: results)")
    p.add_argument("--compare", action="store_true", help="run random, greedy and flex on the same data and seed")
    p.add_argument("--dump-instances", metavar="DIR", help="write every round's assignment instance to DIR")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"expected KEY=VALUE, got {item!r}", "--set")
            key, value = item.split("=", 1)
            overrides[key.strip()] = value.strip()
        for key in ("strategy", "indicator", "backend", "seed", "T_max", "threads"):
            if getattr(args, key) is not None:
                overrides[key] = getattr(args, key)
        cfg = parse_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        summary = run(cfg, args.out, compare=args.compare, dump_dir=args.dump_instances)
    except FlexMoEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for name, s in summary["strategies"].items():
        print(f"{name:>6}: acc={s['mean_accuracy']:.4f} cv={s['cv']:.4f} maxmin={s['maxmin_gap']:.1f} relaxed_rounds={s['relaxed_rounds']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
