"""Seeded experiment runs and sweeps over the ratio table."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..compressors import IDENTITY, ZERO, grbs
from ..numerics import norm_sq
from ..optimizers import (
    OptimizerConfig,
    ScheduleKind,
    Variant,
    theory_step_size,
    init_shared,
    init_states,
    mean_model,
    overall_compression_ratio,
    seeded,
    step,
)
from ..syncfabric import Fabric, RunAborted
from .config import RunConfig

log = logging.getLogger(__name__)

CSV_COLUMNS = ("round", "loss", "grad_norm_sq", "uplink_bits", "downlink_bits", "elapsed_ns")
DIVERGENCE_FACTOR = 1e6


@dataclass
class Record:
    round: int
    loss: float
    grad_norm_sq: float
    uplink_bits: int
    downlink_bits: int
    elapsed_ns: int
    uplink_value_bits: int = 0
    downlink_value_bits: int = 0


@dataclass
class RunMetrics:
    label: str
    seed: int
    records: list[Record] = field(default_factory=list)
    status: str = "completed"
    diverged_round: int | None = None

    @property
    def completed(self) -> bool:
        return self.status == "completed"

    @property
    def final(self) -> Record:
        return self.records[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.records:
            w.writerow([r.round, repr(r.loss), repr(r.grad_norm_sq), r.uplink_bits, r.downlink_bits, r.elapsed_ns])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "seed": self.seed,
            "status": self.status,
            "diverged_round": self.diverged_round,
            "columns": list(CSV_COLUMNS),
            "records": [asdict(r) for r in self.records],
        }

    @classmethod
    def from_json(cls, data: dict) -> "RunMetrics":
        return cls(
            data["label"],
            data["seed"],
            [Record(**r) for r in data["records"]],
            data["status"],
            data.get("diverged_round"),
        )


def resolve_eta(cfg: RunConfig, problem) -> OptimizerConfig:
    """Replace a theory schedule by the constant step size it prescribes."""
    opt = cfg.optimizer
    if opt.schedule.kind is not ScheduleKind.THEORY:
        return opt
    d = problem.d
    eta = theory_step_size(opt.variant, opt.schedule.gamma, cfg.T, cfg.n, opt.C1.delta(d), opt.C2.delta(d), opt.H, problem.L)
    return replace(opt, eta=eta, schedule=replace(opt.schedule, kind=ScheduleKind.CONSTANT))


def run_seed(cfg: RunConfig, seed: int, problem=None, threads: int | None = None) -> RunMetrics:
    """One seeded run; divergence is reported in the result, never raised."""
    problem = problem or cfg.problem.build(cfg.n)
    opt = seeded(resolve_eta(cfg, problem).validate(), seed)
    x0 = problem.initial_point()
    states = init_states(opt, x0, cfg.n)
    shared = init_shared(opt, x0)
    metrics = RunMetrics(cfg.name, seed)
    start = time.perf_counter_ns()

    def record(t: int, xbar: np.ndarray, loss: float) -> None:
        tot = fabric.ledger.totals()
        elapsed = time.perf_counter_ns() - start if cfg.record_time else 0
        metrics.records.append(
            Record(
                t,
                loss,
                norm_sq(problem.full_gradient(xbar)),
                tot.uplink_bits,
                tot.downlink_bits,
                elapsed,
                tot.uplink_value_bits,
                tot.downlink_value_bits,
            )
        )

    with Fabric(cfg.fabric_for_run(threads)) as fabric:
        loss0 = problem.loss(x0)
        record(0, x0, loss0)
        limit = DIVERGENCE_FACTOR * abs(loss0) if loss0 else math.inf
        for t in range(1, cfg.T + 1):
            try:
                step(states, opt, problem, t, fabric, seed, shared)
            except RunAborted as exc:
                metrics.status, metrics.diverged_round = "diverged", exc.round
                log.info("%s seed %d diverged at round %d: %s", cfg.name, seed, t, exc.reason)
                break
            xbar = mean_model(states)
            loss = problem.loss(xbar)
            if not math.isfinite(loss) or loss > limit:
                metrics.status, metrics.diverged_round = "diverged", t
                break
            if t % cfg.cadence == 0 or t == cfg.T:
                record(t, xbar, loss)
    return metrics


def write_metrics(metrics: RunMetrics, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{metrics.label}-seed{metrics.seed}"
    csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
    csv_path.write_text(metrics.to_csv())
    json_path.write_text(json.dumps(metrics.to_json(), indent=1) + "\n")
    return csv_path, json_path


def run(cfg: RunConfig, out_dir: str | Path | None = None, threads: int | None = None) -> list[RunMetrics]:
    """Run every seed of ``cfg``; writes CSV + JSON per seed when ``out_dir`` is given."""
    cfg.validate()
    problem = cfg.problem.build(cfg.n)
    results = []
    for seed in cfg.seeds:
        m = run_seed(cfg, seed, problem, threads)
        if out_dir is not None:
            write_metrics(m, out_dir)
        results.append(m)
    return results


# -- ratio table -----------------------------------------------------------------

# (optimizer, overall R_C, R_C2, R_C1, H); None where the table has no entry
RATIO_TABLE: tuple[tuple[str, int, int | None, int, int | None], ...] = (
    ("EF-SGD", 2, None, 2, None),
    ("QSparse-local-SGD", 2, None, 1, 2),
    ("CSEA", 2, None, 2, None),
    ("CSER", 2, 4, 2, 2),
    ("EF-SGD", 4, None, 4, None),
    ("QSparse-local-SGD", 4, None, 1, 4),
    ("CSEA", 4, None, 4, None),
    ("CSER", 4, 8, 2, 4),
    ("CSER-PL", 4, None, 2, 2),
    ("EF-SGD", 8, None, 8, None),
    ("QSparse-local-SGD", 8, None, 1, 8),
    ("CSEA", 8, None, 8, None),
    ("CSER", 8, 16, 2, 8),
    ("CSER-PL", 8, None, 2, 4),
    ("EF-SGD", 16, None, 16, None),
    ("QSparse-local-SGD", 16, None, 4, 4),
    ("CSEA", 16, None, 16, None),
    ("CSER", 16, 32, 8, 4),
    ("CSER-PL", 16, None, 4, 4),
    ("EF-SGD", 32, None, 32, None),
    ("QSparse-local-SGD", 32, None, 4, 8),
    ("CSEA", 32, None, 32, None),
    ("CSER", 32, 64, 8, 8),
    ("CSER-PL", 32, None, 8, 4),
    ("EF-SGD", 64, None, 64, None),
    ("QSparse-local-SGD", 64, None, 16, 4),
    ("CSEA", 64, None, 64, None),
    ("CSER", 64, 128, 8, 16),
    ("CSER-PL", 64, None, 8, 8),
    ("EF-SGD", 128, None, 128, None),
    ("QSparse-local-SGD", 128, None, 16, 8),
    ("CSEA", 128, None, 128, None),
    ("CSER", 128, 256, 4, 64),
    ("CSER-PL", 128, None, 8, 16),
    ("EF-SGD", 256, None, 256, None),
    ("QSparse-local-SGD", 256, None, 128, 2),
    ("CSEA", 256, None, 256, None),
    ("CSER", 256, 512, 16, 32),
    ("CSER-PL", 256, None, 16, 16),
    ("EF-SGD", 512, None, 512, None),
    ("QSparse-local-SGD", 512, None, 128, 4),
    ("CSEA", 512, None, 512, None),
    ("CSER", 512, 1024, 8, 128),
    ("CSER-PL", 512, None, 16, 32),
    ("EF-SGD", 1024, None, 1024, None),
    ("QSparse-local-SGD", 1024, None, 128, 8),
    ("CSEA", 1024, None, 1024, None),
    ("CSER", 1024, 2048, 32, 64),
    ("CSER-PL", 1024, None, 32, 32),
)

OPTIMIZER_NAMES = {
    "EF-SGD": Variant.EFSGD,
    "QSparse-local-SGD": Variant.QSPARSE,
    "CSEA": Variant.CSEA,
    "CSER": Variant.CSER,
    "CSER-PL": Variant.CSERPL,
}


@dataclass(frozen=True)
class SweepRow:
    optimizer: str
    rc: float | None
    R2: float | None
    R1: float
    H: int | None


def _grbs_or_identity(ratio: float, blocks: int | None, seed: int):
    return IDENTITY if ratio == 1 else grbs(ratio, blocks, seed)


def row_config(base: RunConfig, row: SweepRow) -> RunConfig:
    """Instantiate one table row on top of ``base`` (GRBS compressors)."""
    variant = OPTIMIZER_NAMES.get(row.optimizer) or Variant.parse(row.optimizer)
    if variant is Variant.CSER and base.optimizer.beta > 0:
        variant = Variant.MCSER
    blocks = base.optimizer.C1.blocks
    C1 = _grbs_or_identity(row.R1, blocks, base.optimizer.C1.seed or 1)
    C2 = ZERO if row.R2 is None else _grbs_or_identity(row.R2, blocks, base.optimizer.C2.seed or 2)
    opt = replace(base.optimizer, variant=variant, H=row.H or 1, C1=C1, C2=C2)
    label = f"{row.optimizer}-R{row.rc if row.rc is not None else 'x'}".replace(".0", "")
    return replace(base, name=label, optimizer=opt)


def ratio_table_rows() -> list[SweepRow]:
    return [SweepRow(o, rc, r2, r1, h) for o, rc, r2, r1, h in RATIO_TABLE]


def ratio_table_configs(base: RunConfig) -> list[RunConfig]:
    return [row_config(base, row) for row in ratio_table_rows()]


def config_ratio(cfg: RunConfig) -> float:
    opt = cfg.optimizer
    R1 = 1.0 if opt.C1.kind.value == "identity" else opt.C1.ratio
    R2 = math.inf if opt.C2.kind.value == "zero" else (1.0 if opt.C2.kind.value == "identity" else opt.C2.ratio)
    return overall_compression_ratio(opt.variant, R1, R2, opt.H)


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    if not values:
        return math.nan, math.nan
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


def sweep(table: Iterable[RunConfig], out_dir: str | Path | None = None, threads: int | None = None) -> list[dict]:
    """Run each config over its seeds; one summary row per config.

    A config that fails to validate or crashes is reported in its row and the
    sweep moves on.
    """
    rows = []
    for cfg in table:
        row = {
            "label": cfg.name,
            "variant": cfg.optimizer.variant.value,
            "R1": cfg.optimizer.C1.ratio,
            "R2": cfg.optimizer.C2.ratio if cfg.optimizer.C2.kind.value != "zero" else None,
            "H": cfg.optimizer.H,
            "overall_rc": None,
            "seeds": len(cfg.seeds),
            "completed": 0,
            "diverged": 0,
            "loss_mean": math.nan,
            "loss_std": math.nan,
            "grad_norm_sq_mean": math.nan,
            "grad_norm_sq_std": math.nan,
            "error": "",
        }
        try:
            row["overall_rc"] = config_ratio(cfg)
            results = run(cfg, out_dir, threads)
        except Exception as exc:  # recorded per row; the sweep continues
            row["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
            continue
        done = [m for m in results if m.completed]
        row["completed"] = len(done)
        row["diverged"] = len(results) - len(done)
        row["loss_mean"], row["loss_std"] = _mean_std([m.final.loss for m in done])
        row["grad_norm_sq_mean"], row["grad_norm_sq_std"] = _mean_std([m.final.grad_norm_sq for m in done])
        rows.append(row)
    return rows


def summary_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


# -- plot data ---------------------------------------------------------------


def emit_plot_data(metrics: Sequence[RunMetrics], axis: str = "round", y: str = "loss") -> list[tuple[str, float, float]]:
    """Long-format ``(series, x, y)`` rows; series are ``label-seed``.

    ``axis`` is ``"round"`` or ``"bits"`` (cumulative uplink + downlink).
    """
    if not metrics:
        raise ValueError("no metrics to emit")
    if axis not in ("round", "bits"):
        raise ValueError(f"axis must be 'round' or 'bits', got {axis!r}")
    seen = set()
    rows = []
    for m in metrics:
        series = f"{m.label}-seed{m.seed}"
        if series in seen:
            raise ValueError(f"series label collision: {series!r}")
        seen.add(series)
        for r in m.records:
            x = r.round if axis == "round" else r.uplink_bits + r.downlink_bits
            rows.append((series, x, getattr(r, y)))
    return rows
