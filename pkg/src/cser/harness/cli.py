"""Command-line entry point: ``cser {run,sweep,verify,plot-data}``.

Exit codes: 0 success, 1 a run diverged/failed or a check failed, 2 bad config.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from ..optimizers import ConfigError
from .config import RunConfig, load_config, load_raw
from .runner import RunMetrics, emit_plot_data, run, row_config, summary_csv, sweep, ratio_table_rows
from .verify import Settings, Suite, verify

SEED_ENV = "CSER_SEED"
EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("cser")


def _seed_override(args) -> int | None:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError:
        raise ConfigError([f"{SEED_ENV} must be an integer, got {env!r}"]) from None


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    seed = _seed_override(args)
    if seed is not None:
        cfg = cfg.with_seeds([seed])
    return cfg.validate()


def _out_dir(args, cfg: RunConfig) -> Path:
    return Path(args.out or cfg.output)


def cmd_run(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    results = run(cfg, out, args.threads)
    for m in results:
        last = m.records[-1]
        print(f"{m.label} seed={m.seed} status={m.status} round={last.round} loss={last.loss:.6g} grad_norm_sq={last.grad_norm_sq:.6g}")
    return EXIT_OK if all(m.completed for m in results) else EXIT_FAILURE


def _sweep_table(args, cfg: RunConfig) -> list[RunConfig]:
    raw = load_raw(args.config).get("sweep", {}) if args.config else {}
    unknown = set(raw) - {"table", "rc", "optimizers"}
    if unknown:
        raise ConfigError([f"sweep: unknown key {k!r}" for k in sorted(unknown)])
    if raw.get("table", "ratios") != "ratios":
        raise ConfigError([f"sweep: unknown table {raw['table']!r} (only 'ratios')"])
    rcs = set(raw.get("rc", []))
    names = set(raw.get("optimizers", []))
    rows = [r for r in ratio_table_rows() if (not rcs or r.rc in rcs) and (not names or r.optimizer in names)]
    return [row_config(cfg, r) for r in rows]


def cmd_sweep(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    rows = sweep(_sweep_table(args, cfg), out, args.threads)
    out.mkdir(parents=True, exist_ok=True)
    text = summary_csv(rows)
    (out / "summary.csv").write_text(text)
    sys.stdout.write(text)
    ok = all(not r["error"] and r["diverged"] == 0 for r in rows)
    return EXIT_OK if ok else EXIT_FAILURE


def cmd_verify(args) -> int:
    seed = _seed_override(args)
    settings = Settings() if seed is None else Settings(seed=seed)
    try:
        suite = Suite.parse(args.suite)
    except ValueError as exc:
        raise ConfigError([str(exc)]) from None
    report = verify(suite, settings)
    print(report.text())
    return EXIT_OK if report.passed else EXIT_FAILURE


def _metric_files(paths: Sequence[str]) -> list[Path]:
    files: list[Path] = []
    for p in map(Path, paths):
        files.extend(sorted(p.glob("*.json")) if p.is_dir() else [p])
    return files


def cmd_plot_data(args) -> int:
    files = _metric_files(args.runs)
    if not files:
        print("no metrics files found", file=sys.stderr)
        return EXIT_FAILURE
    metrics = [RunMetrics.from_json(json.loads(f.read_text())) for f in files]
    try:
        rows = emit_plot_data(metrics, args.axis, args.y)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    handle = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(handle, lineterminator="\n")
        w.writerow(("series", "x", "y"))
        w.writerows((s, x, repr(y)) for s, x, y in rows)
    finally:
        if args.out:
            handle.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cser", description="Compressed distributed SGD simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", metavar="PATH", help="TOML run configuration (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, metavar="N", help=f"single seed; overrides the config and ${SEED_ENV}")
        sp.add_argument("--out", metavar="DIR", help="output directory (default: config 'output')")
        sp.add_argument("--threads", type=int, metavar="N", help="worker threads inside each run")

    common(sub.add_parser("run", help="run every seed of a config"))
    common(sub.add_parser("sweep", help="run the compressor configuration table"))
    v = sub.add_parser("verify", help="run invariant suites")
    v.add_argument("suite", nargs="?", default="All", help=", ".join(s.value for s in Suite))
    v.add_argument("--seed", type=int, metavar="N")
    pd = sub.add_parser("plot-data", help="long-format (series, x, y) CSV from run JSON files")
    pd.add_argument("runs", nargs="+", help="JSON metric files or directories holding them")
    pd.add_argument("--axis", choices=("round", "bits"), default="round")
    pd.add_argument("--y", choices=("loss", "grad_norm_sq"), default="loss")
    pd.add_argument("--out", metavar="FILE")
    return p


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "verify": cmd_verify, "plot-data": cmd_plot_data}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
