"""Invariant suites: each check reports a measured value against its bound."""
from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from typing import Callable, Iterable

import numpy as np

from ..compressors import IDENTITY, ZERO, CompressorSpec, compress, delta_samples, grbs, randomk, topk
from ..optimizers import (
    BoundMethod,
    ModelState,
    OptimizerConfig,
    Variant,
    error_bound_factor,
    error_reset_bound,
    iterate,
    mean_model,
    update_bound,
)
from ..problems import HeterogeneousQuadratic, Problem
from ..streams import Stream, generator


class Suite(str, enum.Enum):
    LEMMA1 = "Lemma1"
    COMPRESSORS = "Compressors"
    REDUCTIONS = "Reductions"
    ERROR_RESET = "ErrorReset"
    IMPL2_EQUIV = "Impl2Equiv"
    BOUND_FACTORS = "BoundFactors"
    ALL = "All"

    @classmethod
    def parse(cls, text: str) -> "Suite":
        for s in cls:
            if s.value.lower() == text.lower():
                return s
        raise ValueError(f"unknown suite {text!r}; choose from {[s.value for s in cls]}")


@dataclass(frozen=True)
class Check:
    suite: str
    name: str
    measured: float
    bound: float
    relation: str  # "<=", "<" or "=="
    passed: bool

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"{mark}  {self.suite:<12} {self.name:<48} measured={self.measured:.6g} {self.relation} {self.bound:.6g}"


def check(suite: str, name: str, measured: float, bound: float, relation: str = "<=") -> Check:
    ops: dict[str, Callable[[float, float], bool]] = {
        "<=": lambda a, b: a <= b,
        "<": lambda a, b: a < b,
        "==": lambda a, b: a == b,
    }
    ok = bool(ops[relation](measured, bound)) and not (isinstance(measured, float) and math.isnan(measured))
    return Check(suite, name, float(measured), float(bound), relation, ok)


@dataclass
class Report:
    checks: list[Check] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def text(self) -> str:
        lines = [c.line() for c in self.checks]
        status = "all checks passed" if self.passed else f"{sum(not c.passed for c in self.checks)} check(s) failed"
        lines.append(f"{len(self.checks)} checks, {status} ({self.seconds:.1f} s)")
        return "\n".join(lines)


@dataclass(frozen=True)
class Settings:
    n: int = 8
    d: int = 1000
    seed: int = 0
    eta: float = 0.05
    lemma1_rounds: int = 1000
    lattice_rounds: int = 200
    collapse_rounds: int = 500
    impl2_rounds: int = 200
    reset_rounds: int = 800
    topk_vectors: int = 1000
    grbs_draws: int = 10_000


def default_problem(s: Settings, n: int | None = None) -> HeterogeneousQuadratic:
    d = s.d
    block = 100 if d % 100 == 0 else None
    return HeterogeneousQuadratic.generate(n or s.n, d, s.seed, rotation_block=block)


# -- measurements -----------------------------------------------------------


def lemma1_deviation(problem: Problem, cfg: OptimizerConfig, T: int, seed: int = 0) -> float:
    """Worst per-round ``max_ij ||(x_i-e_i)-(x_j-e_j)||_inf / (1 + ||xbar||_inf)``."""
    worst = 0.0
    for _, states, _ in iterate(problem, cfg, T, seed):
        z = np.array([s.x - s.e for s in states])
        spread = float(np.max(z.max(axis=0) - z.min(axis=0)))
        worst = max(worst, spread / (1.0 + float(np.max(np.abs(mean_model(states))))))
    return worst


def trajectory_gap(problem: Problem, a: OptimizerConfig, b: OptimizerConfig, T: int, seed: int = 0) -> float:
    """Max-norm distance between the local models of two runs, over all rounds."""
    gap = 0.0
    for (_, sa, _), (_, sb, _) in zip(iterate(problem, a, T, seed), iterate(problem, b, T, seed)):
        for u, v in zip(sa, sb):
            gap = max(gap, float(np.max(np.abs(u.x - v.x))))
    return gap


def sgd_gap(problem: Problem, cfg: OptimizerConfig, T: int, seed: int = 0) -> float:
    """Distance between a run and plain (momentum) SGD driven by the same gradients."""
    x = problem.initial_point()
    m = np.zeros_like(x)
    gap = 0.0
    for t, states, _ in iterate(problem, cfg, T, seed):
        g = problem.stochastic_gradient(0, x, t, seed)
        eta = cfg.eta_at(t)
        if cfg.beta:
            m = cfg.beta * m + g
            x = x - eta * (cfg.beta * m + g)
        else:
            x = x - eta * g
        gap = max(gap, float(np.max(np.abs(states[0].x - x))))
    return gap


def sample_mean_se(values: Iterable[float]) -> tuple[float, float]:
    a = np.asarray(list(values), dtype=float)
    se = float(a.std(ddof=1) / math.sqrt(len(a))) if len(a) > 1 else 0.0
    return float(a.mean()), se


def reset_statistics(problem: Problem, cfg: OptimizerConfig, T: int, seed: int = 0):
    """``(reset_errors, updates, grads)``: squared norms collected along a run."""
    resets, updates, grads = [], [], []
    for _, _, trace in iterate(problem, cfg, T, seed):
        grads.extend(trace.grad_sq)
        if trace.update_sq is not None:
            updates.extend(trace.update_sq)
        if trace.reset and trace.reset_error_sq is not None:
            resets.extend(trace.reset_error_sq)
    return resets, updates, grads


def topk_worst_slack(ratio: float, d: int, vectors: int, seed: int = 0) -> float:
    """Largest ``||C(v)-v||^2 - (1-k/d)||v||^2`` over random vectors (should be <= 0)."""
    spec = topk(ratio)
    k = spec.k(d)
    worst = -math.inf
    for t in range(1, vectors + 1):
        v = generator(seed, t, Stream.TRIAL).standard_normal(d) * generator(seed, t, Stream.PROBE).exponential(1.0, d)
        r = v - compress(spec, v, t).dense
        worst = max(worst, float(r @ r - (1 - k / d) * (v @ v)))
    return worst


# -- suites ------------------------------------------------------------------


def _lemma1(s: Settings) -> list[Check]:
    problem = default_problem(s)
    out = []
    for family, make in (("GRBS", grbs), ("TopK", topk)):
        configs = {
            "CSER": OptimizerConfig(Variant.CSER, s.eta, 0.0, 8, make(8), make(64)),
            "MCSER": OptimizerConfig(Variant.MCSER, s.eta, 0.9, 8, make(8), make(64)),
            "CSEA": OptimizerConfig(Variant.CSEA, s.eta, 0.0, 1, make(8), ZERO),
            "CSERPL": OptimizerConfig(Variant.CSERPL, s.eta, 0.0, 4, make(8), ZERO),
        }
        for name, cfg in configs.items():
            dev = lemma1_deviation(problem, _seeded_specs(cfg), s.lemma1_rounds, s.seed)
            out.append(check("Lemma1", f"{name} {family} x_i - e_i spread", dev, 1e-9))
    return out


def _seeded_specs(cfg: OptimizerConfig) -> OptimizerConfig:
    """Give randomized compressors distinct default seeds."""
    return replace(cfg, C1=cfg.C1.with_seed(cfg.C1.seed or 1), C2=cfg.C2.with_seed(cfg.C2.seed or 2))


def _compressors(s: Settings) -> list[Check]:
    out = []
    for ratio in (2, 8, 32):
        out.append(check("Compressors", f"TopK R={ratio} bound slack", topk_worst_slack(ratio, s.d, s.topk_vectors, s.seed), 0.0))
    for ratio in (2, 4, 32):
        for name, spec in (("GRBS", grbs(ratio, seed=7)), ("RandomK", randomk(ratio, seed=7))):
            samples = delta_samples(spec, s.grbs_draws, s.d, s.seed)
            mean, se = sample_mean_se(samples)
            # exact expectations; both equal 1 - 1/R when R divides the count
            if name == "RandomK":
                target = 1 - spec.k(s.d) / s.d
            else:
                target = 1 - spec.kept_blocks(s.d) / spec.num_blocks(s.d)
            out.append(check("Compressors", f"{name} R={ratio} |E ratio - target| in s.e.", abs(mean - target) / se, 3.0))
    return out


def _reductions(s: Settings) -> list[Check]:
    problem = default_problem(s)
    T, eta, g8 = s.lattice_rounds, s.eta, grbs(8, seed=1)
    pairs = {
        "CSER == CSERPL (C2 zero)": (
            OptimizerConfig(Variant.CSER, eta, 0.0, 4, g8, ZERO),
            OptimizerConfig(Variant.CSERPL, eta, 0.0, 4, g8, ZERO),
        ),
        "CSERPL == CSEA (H 1)": (
            OptimizerConfig(Variant.CSERPL, eta, 0.0, 1, g8, ZERO),
            OptimizerConfig(Variant.CSEA, eta, 0.0, 1, g8, ZERO),
        ),
        "CSERPL == LocalSGD (C1 identity)": (
            OptimizerConfig(Variant.CSERPL, eta, 0.0, 4, IDENTITY, ZERO),
            OptimizerConfig(Variant.LOCALSGD, eta, 0.0, 4, IDENTITY, ZERO),
        ),
        "QSparse == EFSGD (H 1)": (
            OptimizerConfig(Variant.QSPARSE, eta, 0.0, 1, g8, ZERO),
            OptimizerConfig(Variant.EFSGD, eta, 0.0, 1, g8, ZERO),
        ),
        "QSparse == LocalSGD (C1 identity)": (
            OptimizerConfig(Variant.QSPARSE, eta, 0.0, 4, IDENTITY, ZERO),
            OptimizerConfig(Variant.LOCALSGD, eta, 0.0, 4, IDENTITY, ZERO),
        ),
    }
    out = [check("Reductions", name, trajectory_gap(problem, a, b, T, s.seed), 1e-12) for name, (a, b) in pairs.items()]
    single = default_problem(s, n=1)
    for label, (C1, C2) in {"GRBS": (grbs(8, seed=1), grbs(64, seed=2)), "TopK": (topk(8), topk(64))}.items():
        for variant, beta in ((Variant.CSER, 0.0), (Variant.MCSER, 0.9)):
            cfg = OptimizerConfig(variant, s.eta, beta, 8, C1, C2)
            out.append(check("Reductions", f"n=1 {variant.value} {label} == SGD", sgd_gap(single, cfg, s.collapse_rounds, s.seed), 1e-12))
    return out


def _error_reset(s: Settings) -> list[Check]:
    problem = default_problem(s)
    out = []
    for d1, d2, H in ((Fraction(1, 2), Fraction(0), 8), (Fraction(1, 4), Fraction(1, 8), 4)):
        C2 = ZERO if d2 == 0 else grbs(int(1 / d2), seed=2)
        cfg = OptimizerConfig(Variant.CSER, s.eta, 0.0, H, grbs(int(1 / d1), seed=1), C2)
        resets, _, grads = reset_statistics(problem, cfg, s.reset_rounds, s.seed)
        mean, se = sample_mean_se(resets)
        bound = error_reset_bound(float(d1), float(d2), s.eta, H, float(np.mean(grads)))
        out.append(check("ErrorReset", f"E|e|^2 at reset d1={d1} d2={d2} H={H}", mean, bound + 3 * se))
    beta = 0.9
    cfg = OptimizerConfig(Variant.MCSER, s.eta, beta, 8, grbs(2, seed=1), ZERO)
    _, updates, grads = reset_statistics(problem, cfg, s.reset_rounds, s.seed)
    mean, se = sample_mean_se(updates)
    out.append(check("ErrorReset", f"E|p|^2 momentum beta={beta}", mean, update_bound(s.eta, beta, float(np.mean(grads))) + 3 * se))
    return out


def _impl2(s: Settings) -> list[Check]:
    problem = default_problem(s)
    C1, C2 = grbs(8, seed=1), grbs(64, seed=2)
    pairs = {
        "CSER_Impl2 == CSER": (Variant.CSER_IMPL2, Variant.CSER, 0.0, 8, C2),
        "CSER_Impl2 == MCSER (beta 0.9)": (Variant.CSER_IMPL2, Variant.MCSER, 0.9, 8, C2),
        "CSERPL_Impl2 == CSERPL": (Variant.CSERPL_IMPL2, Variant.CSERPL, 0.0, 4, ZERO),
        "CSEA_Impl2 == CSEA": (Variant.CSEA_IMPL2, Variant.CSEA, 0.0, 1, ZERO),
    }
    out = []
    for name, (v2, v1, beta, H, c2) in pairs.items():
        a = OptimizerConfig(v2, s.eta, beta, H, C1, c2)
        b = OptimizerConfig(v1, s.eta, beta, H, C1, c2)
        out.append(check("Impl2Equiv", name, trajectory_gap(problem, a, b, s.impl2_rounds, s.seed), 1e-9))
    state_fields = {f.name for f in fields(ModelState)}
    out.append(check("Impl2Equiv", "residual fields in Impl2 worker state", float("e" in state_fields), 0.0, "=="))
    return out


def _bound_factors(s: Settings) -> list[Check]:
    F = Fraction
    return [
        check("BoundFactors", "QSparse d1=1/2 H=8", error_bound_factor(BoundMethod.QSPARSE, F(1, 2), 0, 8), 832, "=="),
        check("BoundFactors", "CSER d1=1/2 d2=0 H=8", error_bound_factor(BoundMethod.CSER, F(1, 2), F(0), 8), 576, "=="),
        check("BoundFactors", "CSER d1=1/3 d2=0 H=4", error_bound_factor(BoundMethod.CSER, F(1, 3), F(0), 4), 400, "=="),
        check("BoundFactors", "CSER d1=7/8 d2=1/96 H=12", error_bound_factor(BoundMethod.CSER, F(7, 8), F(1, 96), 12), 236, "<"),
    ]


SUITES: dict[Suite, Callable[[Settings], list[Check]]] = {
    Suite.LEMMA1: _lemma1,
    Suite.COMPRESSORS: _compressors,
    Suite.REDUCTIONS: _reductions,
    Suite.ERROR_RESET: _error_reset,
    Suite.IMPL2_EQUIV: _impl2,
    Suite.BOUND_FACTORS: _bound_factors,
}


def verify(suite: Suite | str = Suite.ALL, settings: Settings | None = None) -> Report:
    suite = suite if isinstance(suite, Suite) else Suite.parse(suite)
    settings = settings or Settings()
    start = time.perf_counter()
    chosen = list(SUITES) if suite is Suite.ALL else [suite]
    report = Report()
    for s in chosen:
        report.checks.extend(SUITES[s](settings))
    report.seconds = time.perf_counter() - start
    return report
