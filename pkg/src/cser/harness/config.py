"""Run configuration: a TOML file with ``[problem]``, ``[optimizer]``,
``[optimizer.C1]``, ``[optimizer.C2]`` and ``[fabric]`` sections.

Every field has a default; :func:`dump_config` always writes the complete,
normalized form so that load -> dump -> load is a fixed point.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from ..compressors import CompressorSpec, Kind
from ..optimizers import ConfigError, OptimizerConfig, Schedule, ScheduleKind, Variant
from ..problems import ProblemKind, make_problem
from ..syncfabric import FabricConfig, ReductionOrder

PROBLEM_OPTIONS: dict[ProblemKind, dict[str, Any]] = {
    ProblemKind.QUADRATIC: {
        "lambda_min": 0.1,
        "lambda_max": 1.0,
        "heterogeneity": 1.0,
        "noise_scale": 0.1,
        "rotation_block": 100,  # 0 = one dense rotation over all d coordinates
    },
    ProblemKind.LOGISTIC: {"samples": 200, "heterogeneity": 1.0, "batch": 16, "l2": 0.0},
    ProblemKind.MLP: {"hidden": 16, "samples": 200, "heterogeneity": 1.0, "batch": 16},
}


@dataclass(frozen=True)
class ProblemConfig:
    kind: ProblemKind = ProblemKind.QUADRATIC
    d: int = 1000  # for "mlp" this is the input width
    seed: int = 0
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        kind = ProblemKind(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "options", {**PROBLEM_OPTIONS[kind], **self.options})

    def resolved_options(self) -> dict:
        return dict(self.options)

    def build(self, n: int):
        opts = self.resolved_options()
        if ProblemKind(self.kind) is ProblemKind.QUADRATIC:
            block = opts.pop("rotation_block")
            if block and self.d % block == 0:
                opts["rotation_block"] = block
        return make_problem(self.kind, n, self.d, self.seed, **opts)


@dataclass(frozen=True)
class RunConfig:
    name: str = "run"
    n: int = 8
    T: int = 2000
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    cadence: int = 10
    output: str = "runs"
    record_time: bool = False
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    fabric: FabricConfig = field(default_factory=lambda: FabricConfig(8))

    def violations(self) -> list[str]:
        out = []
        if self.T < 1:
            out.append(f"T must be >= 1 (got {self.T})")
        if self.n < 1:
            out.append(f"n must be >= 1 (got {self.n})")
        if not self.seeds:
            out.append("seeds must be non-empty")
        if self.cadence < 1:
            out.append(f"cadence must be >= 1 (got {self.cadence})")
        if self.problem.d < 1:
            out.append(f"problem.d must be >= 1 (got {self.problem.d})")
        for key in ("C1", "C2"):
            spec = getattr(self.optimizer, key)
            if spec.blocks is not None and spec.blocks > self.problem.d:
                out.append(f"optimizer.{key}.blocks={spec.blocks} exceeds d={self.problem.d}")
        out.extend(f"optimizer: {v}" for v in self.optimizer.violations())
        return out

    def validate(self) -> "RunConfig":
        problems = self.violations()
        if problems:
            raise ConfigError(problems)
        return self

    def with_seeds(self, seeds) -> "RunConfig":
        return replace(self, seeds=tuple(seeds))

    def fabric_for_run(self, threads: int | None = None) -> FabricConfig:
        return FabricConfig(self.n, self.fabric.reduction_order, threads or self.fabric.threads)


def _spec_from(raw: dict, where: str, errors: list[str]) -> CompressorSpec:
    raw = dict(raw)
    kind = raw.pop("kind", "identity")
    ratio = raw.pop("ratio", 1.0)
    blocks = raw.pop("blocks", None)
    seed = raw.pop("seed", 0)
    for k in raw:
        errors.append(f"{where}: unknown key {k!r}")
    try:
        return CompressorSpec(Kind.parse(kind), float(ratio), blocks, int(seed))
    except ValueError as exc:
        errors.append(f"{where}: {exc}")
        return CompressorSpec()


def config_from_dict(raw: dict) -> RunConfig:
    errors: list[str] = []
    raw = dict(raw)
    problem_raw = dict(raw.pop("problem", {}))
    opt_raw = dict(raw.pop("optimizer", {}))
    fabric_raw = dict(raw.pop("fabric", {}))
    raw.pop("sweep", None)

    try:
        kind = ProblemKind(problem_raw.pop("kind", "quadratic"))
    except ValueError as exc:
        errors.append(f"problem: {exc}")
        kind = ProblemKind.QUADRATIC
    d = int(problem_raw.pop("d", 1000))
    pseed = int(problem_raw.pop("seed", 0))
    allowed = PROBLEM_OPTIONS[kind]
    options = {}
    for k, v in problem_raw.items():
        if k in allowed:
            options[k] = type(allowed[k])(v)
        else:
            errors.append(f"problem: unknown key {k!r} for kind {kind.value!r}")
    problem = ProblemConfig(kind, d, pseed, options)

    C1 = _spec_from(opt_raw.pop("C1", {"kind": "identity"}), "optimizer.C1", errors)
    C2 = _spec_from(opt_raw.pop("C2", {"kind": "zero"}), "optimizer.C2", errors)
    try:
        variant = Variant.parse(opt_raw.pop("variant", "CSER"))
    except ValueError as exc:
        errors.append(f"optimizer: {exc}")
        variant = Variant.CSER
    try:
        schedule = Schedule(
            ScheduleKind(opt_raw.pop("schedule", "constant")),
            tuple(opt_raw.pop("milestones", ())),
            float(opt_raw.pop("decay", 0.2)),
            float(opt_raw.pop("gamma", 1.0)),
        )
    except ValueError as exc:
        errors.append(f"optimizer: {exc}")
        schedule = Schedule()
    optimizer = OptimizerConfig(
        variant,
        float(opt_raw.pop("eta", 0.1)),
        float(opt_raw.pop("beta", 0.0)),
        int(opt_raw.pop("H", 1)),
        C1,
        C2,
        schedule,
    )
    errors.extend(f"optimizer: unknown key {k!r}" for k in opt_raw)

    n = int(raw.pop("n", 8))
    try:
        fabric = FabricConfig(
            max(n, 1),
            ReductionOrder(fabric_raw.pop("reduction_order", "sequential")),
            int(fabric_raw.pop("threads", 1)),
        )
    except ValueError as exc:
        errors.append(f"fabric: {exc}")
        fabric = FabricConfig(max(n, 1))
    errors.extend(f"fabric: unknown key {k!r}" for k in fabric_raw)

    cfg = RunConfig(
        name=str(raw.pop("name", "run")),
        n=n,
        T=int(raw.pop("T", 2000)),
        seeds=tuple(int(s) for s in raw.pop("seeds", (0, 1, 2, 3, 4))),
        cadence=int(raw.pop("cadence", 10)),
        output=str(raw.pop("output", "runs")),
        record_time=bool(raw.pop("record_time", False)),
        problem=problem,
        optimizer=optimizer,
        fabric=fabric,
    )
    errors.extend(f"unknown top-level key {k!r}" for k in raw)
    errors.extend(cfg.violations())
    if errors:
        raise ConfigError(errors)
    return cfg


def _spec_to_dict(spec: CompressorSpec) -> dict:
    out = {"kind": spec.kind.value, "ratio": float(spec.ratio), "seed": int(spec.seed)}
    if spec.blocks is not None:
        out["blocks"] = int(spec.blocks)
    return out


def config_to_dict(cfg: RunConfig) -> dict:
    opt = cfg.optimizer
    return {
        "name": cfg.name,
        "n": cfg.n,
        "T": cfg.T,
        "seeds": list(cfg.seeds),
        "cadence": cfg.cadence,
        "output": cfg.output,
        "record_time": cfg.record_time,
        "problem": {"kind": ProblemKind(cfg.problem.kind).value, "d": cfg.problem.d, "seed": cfg.problem.seed, **cfg.problem.resolved_options()},
        "optimizer": {
            "variant": opt.variant.value,
            "eta": opt.eta,
            "beta": opt.beta,
            "H": opt.H,
            "schedule": opt.schedule.kind.value,
            "milestones": list(opt.schedule.milestones),
            "decay": opt.schedule.decay,
            "gamma": opt.schedule.gamma,
            "C1": _spec_to_dict(opt.C1),
            "C2": _spec_to_dict(opt.C2),
        },
        "fabric": {"reduction_order": cfg.fabric.reduction_order.value, "threads": cfg.fabric.threads},
    }


def loads_config(text: str) -> RunConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError([f"TOML parse error: {exc}"]) from None
    return config_from_dict(raw)


def load_config(path: str | Path) -> RunConfig:
    return loads_config(Path(path).read_text())


def load_raw(path: str | Path) -> dict:
    try:
        return tomli.loads(Path(path).read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError([f"TOML parse error: {exc}"]) from None


def dump_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))
