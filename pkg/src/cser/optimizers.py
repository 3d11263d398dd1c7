"""Per-round state transitions for CSER, its special cases and the baselines.

All step functions share one signature::

    step_x(states, cfg, problem, t, fabric, seed, shared=None) -> RoundTrace

They update ``states`` in place (rebinding each worker's vectors) and return a
:class:`RoundTrace` with per-worker diagnostics.  Rounds are numbered from 1
and the error reset / synchronization fires when ``t % H == 0``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Iterator, Sequence

import numpy as np

from .compressors import IDENTITY, ZERO, CompressorSpec, Kind, compress
from .numerics import is_finite, norm_sq
from .problems import Problem
from .streams import mix
from .syncfabric import Fabric, FabricConfig, RunAborted, mean_vectors


class ConfigError(ValueError):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class Variant(str, enum.Enum):
    FULLSGD = "FullSGD"
    LOCALSGD = "LocalSGD"
    EFSGD = "EFSGD"
    QSPARSE = "QSparseLocal"
    CSEA = "CSEA"
    CSERPL = "CSERPL"
    CSER = "CSER"
    MCSER = "MCSER"
    CSER_IMPL2 = "CSER_Impl2"
    CSERPL_IMPL2 = "CSERPL_Impl2"
    CSEA_IMPL2 = "CSEA_Impl2"

    @classmethod
    def parse(cls, text: str) -> "Variant":
        for v in cls:
            if v.value.lower() == text.lower().replace("-", "").replace(" ", ""):
                return v
        raise ValueError(f"unknown variant {text!r}")

    @property
    def is_impl2(self) -> bool:
        return self in (Variant.CSER_IMPL2, Variant.CSERPL_IMPL2, Variant.CSEA_IMPL2)

    @property
    def keeps_residual(self) -> bool:
        return self in (Variant.EFSGD, Variant.QSPARSE, Variant.CSEA, Variant.CSERPL, Variant.CSER, Variant.MCSER)

    @property
    def bifurcates(self) -> bool:
        """Local models differ exactly by their residuals (error reset family)."""
        return self in (Variant.CSEA, Variant.CSERPL, Variant.CSER, Variant.MCSER)


class ScheduleKind(str, enum.Enum):
    CONSTANT = "constant"
    STEP = "step"
    THEORY = "theory"


@dataclass(frozen=True)
class Schedule:
    kind: ScheduleKind = ScheduleKind.CONSTANT
    milestones: tuple[int, ...] = ()
    decay: float = 0.2
    gamma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))


@dataclass(frozen=True)
class OptimizerConfig:
    variant: Variant = Variant.CSER
    eta: float = 0.1
    beta: float = 0.0
    H: int = 1
    C1: CompressorSpec = IDENTITY
    C2: CompressorSpec = ZERO
    schedule: Schedule = field(default_factory=Schedule)

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))

    def violations(self) -> list[str]:
        v, out = self.variant, []
        if not self.eta > 0:
            out.append(f"eta must be > 0 (got {self.eta})")
        if not 0 <= self.beta < 1:
            out.append(f"beta must be in [0, 1) (got {self.beta})")
        if self.H < 1:
            out.append(f"H must be >= 1 (got {self.H})")
        if v in (Variant.EFSGD, Variant.CSEA, Variant.CSEA_IMPL2) and self.H != 1:
            out.append(f"{v.value} requires H = 1")
        if v in (Variant.CSERPL, Variant.LOCALSGD, Variant.QSPARSE, Variant.CSEA, Variant.EFSGD,
                 Variant.CSERPL_IMPL2, Variant.CSEA_IMPL2) and self.C2.kind is not Kind.ZERO:
            out.append(f"{v.value} requires C2 = zero")
        if v is Variant.LOCALSGD and self.C1.kind is not Kind.IDENTITY:
            out.append("LocalSGD requires C1 = identity")
        if v is Variant.CSER and self.beta != 0:
            out.append("CSER has no momentum; use MCSER for beta > 0")
        if v.is_impl2:
            if self.C1.kind is not Kind.GRBS:
                out.append(f"{v.value} requires C1 = grbs")
            if v is Variant.CSER_IMPL2 and self.C2.kind is not Kind.GRBS:
                out.append("CSER_Impl2 requires C2 = grbs")
        if self.schedule.kind is ScheduleKind.THEORY and self.C1.kind is Kind.ZERO:
            out.append("the theory step size needs delta_1 > 0 (C1 = zero)")
        if self.schedule.kind is ScheduleKind.STEP and list(self.schedule.milestones) != sorted(self.schedule.milestones):
            out.append("step milestones must be increasing")
        return out

    def validate(self) -> "OptimizerConfig":
        problems = self.violations()
        if problems:
            raise ConfigError(problems)
        return self

    def eta_at(self, t: int) -> float:
        if self.schedule.kind is ScheduleKind.STEP:
            drops = sum(1 for m in self.schedule.milestones if t > m)
            return self.eta * self.schedule.decay**drops
        return self.eta


@dataclass(slots=True)
class WorkerState:
    worker_id: int
    x: np.ndarray
    e: np.ndarray
    m: np.ndarray


@dataclass(slots=True)
class ModelState:
    """Worker state for implementation II: the model and momentum, no residual."""

    worker_id: int
    x: np.ndarray
    m: np.ndarray


@dataclass
class SharedRoundState:
    x_hat: np.ndarray
    round: int = 0


@dataclass
class RoundTrace:
    round: int
    grad_sq: list[float]
    update_sq: list[float] | None = None
    reset: bool = False
    reset_error_sq: list[float] | None = None


def init_states(cfg: OptimizerConfig, x0: np.ndarray, n: int):
    d = len(x0)
    if cfg.variant.is_impl2:
        return [ModelState(i, x0.copy(), np.zeros(d)) for i in range(n)]
    return [WorkerState(i, x0.copy(), np.zeros(d), np.zeros(d)) for i in range(n)]


def init_shared(cfg: OptimizerConfig, x0: np.ndarray) -> SharedRoundState | None:
    return SharedRoundState(x0.copy()) if cfg.variant is Variant.QSPARSE else None


def mean_model(states) -> np.ndarray:
    """Average of the local models, summed in worker-id order."""
    ordered = sorted(states, key=lambda s: s.worker_id)
    return mean_vectors([s.x for s in ordered])


# -- building blocks ---------------------------------------------------------


def psync(vectors: Sequence[np.ndarray], C: CompressorSpec, t: int, fabric: Fabric | None = None):
    """Partial synchronization: average the compressed parts, keep residuals local.

    Returns ``(v_prime, r)`` lists with ``v_prime[i] = mean_j C(v_j) + r[i]``.
    """
    fabric = fabric or Fabric(FabricConfig(len(vectors)))
    msgs = fabric.map(lambda i: compress(C, vectors[i], t))
    res = [v - m.dense for v, m in zip(vectors, msgs)]
    avg = fabric.reduce_mean(msgs, t).dense
    return [avg + r for r in res], res


def _sync_compressed(vectors, C, t, fabric):
    """Compress, average; returns (mean of compressed, per-worker compressed)."""
    msgs = fabric.map(lambda i: compress(C, vectors[i], t))
    return fabric.reduce_mean(msgs, t).dense, [m.dense for m in msgs]


def _gradients(states, problem: Problem, t: int, fabric: Fabric, seed: int) -> list[np.ndarray]:
    grads = fabric.map(lambda i: problem.stochastic_gradient(i, states[i].x, t, seed))
    for i, g in enumerate(grads):
        if not is_finite(g):
            raise RunAborted(t, i, "non-finite gradient")
    return grads


def get_p(state, g: np.ndarray, eta: float, beta: float) -> np.ndarray:
    """Update direction; with momentum this is ``eta * (beta * m + g)`` after ``m <- beta m + g``."""
    if beta:
        state.m = beta * state.m + g
        return eta * (beta * state.m + g)
    return eta * g


def _updates(states, grads, cfg, t):
    eta = cfg.eta_at(t)
    return [get_p(s, g, eta, cfg.beta) for s, g in zip(states, grads)]


def _trace(t, grads, updates=None, reset=False, errors=None):
    return RoundTrace(
        t,
        [norm_sq(g) for g in grads],
        None if updates is None else [norm_sq(p) for p in updates],
        reset,
        None if errors is None else [norm_sq(e) for e in errors],
    )


def _error_reset(states, e_half, C1, t, fabric):
    e_prime, e_new = psync(e_half, C1, t, fabric)
    for s, eh, ep, en in zip(states, e_half, e_prime, e_new):
        s.x = s.x + (ep - eh)
        s.e = en


# -- algorithms --------------------------------------------------------------


def step_fullsgd(states, cfg, problem, t, fabric, seed, shared=None):
    grads = _gradients(states, problem, t, fabric, seed)
    p = _updates(states, grads, cfg, t)
    avg, _ = _sync_compressed(p, IDENTITY, t, fabric)
    for s in states:
        s.x = s.x - avg
    return _trace(t, grads, p)


def step_localsgd(states, cfg, problem, t, fabric, seed, shared=None):
    grads = _gradients(states, problem, t, fabric, seed)
    p = _updates(states, grads, cfg, t)
    for s, pi in zip(states, p):
        s.x = s.x - pi
    reset = t % cfg.H == 0
    if reset:
        avg, _ = _sync_compressed([s.x for s in states], IDENTITY, t, fabric)
        for s in states:
            s.x = avg.copy()
    return _trace(t, grads, p, reset)


def step_efsgd(states, cfg, problem, t, fabric, seed, shared=None):
    grads = _gradients(states, problem, t, fabric, seed)
    upd = _updates(states, grads, cfg, t)
    p = [s.e - u for s, u in zip(states, upd)]
    avg, kept = _sync_compressed(p, cfg.C1, t, fabric)
    for s, pi, ki in zip(states, p, kept):
        s.e = pi - ki
        s.x = s.x + avg
    return _trace(t, grads, upd, True, [s.e for s in states])


def step_qsparse(states, cfg, problem, t, fabric, seed, shared=None):
    grads = _gradients(states, problem, t, fabric, seed)
    upd = _updates(states, grads, cfg, t)
    x_half = [s.x - u for s, u in zip(states, upd)]
    reset = t % cfg.H == 0
    if not reset:
        for s, xh in zip(states, x_half):
            s.x = xh
    else:
        p = [s.e + xh - shared.x_hat for s, xh in zip(states, x_half)]
        avg, kept = _sync_compressed(p, cfg.C1, t, fabric)
        x_new = shared.x_hat + avg
        for s, pi, ki in zip(states, p, kept):
            s.e = pi - ki
            s.x = x_new.copy()
        shared.x_hat = x_new
    shared.round = t
    return _trace(t, grads, upd, reset, [s.e for s in states] if reset else None)


def step_csea(states, cfg, problem, t, fabric, seed, shared=None):
    grads = _gradients(states, problem, t, fabric, seed)
    upd = _updates(states, grads, cfg, t)
    p = [s.e - u for s, u in zip(states, upd)]
    avg, kept = _sync_compressed(p, cfg.C1, t, fabric)
    for s, pi, ki in zip(states, p, kept):
        e_new = pi - ki
        s.x = s.x - s.e + e_new + avg
        s.e = e_new
    return _trace(t, grads, upd, True, [s.e for s in states])


def step_cser(states, cfg, problem, t, fabric, seed, shared=None):
    grads = _gradients(states, problem, t, fabric, seed)
    eta = cfg.eta_at(t)
    g_prime, r = psync(grads, cfg.C2, t, fabric)
    e_half = []
    for s, gp, ri in zip(states, g_prime, r):
        s.x = s.x - eta * gp
        e_half.append(s.e - eta * ri)
    reset = t % cfg.H == 0
    if reset:
        _error_reset(states, e_half, cfg.C1, t, fabric)
    else:
        for s, eh in zip(states, e_half):
            s.e = eh
    return _trace(t, grads, None, reset, [s.e for s in states] if reset else None)


def step_mcser(states, cfg, problem, t, fabric, seed, shared=None):
    grads = _gradients(states, problem, t, fabric, seed)
    p = _updates(states, grads, cfg, t)
    p_prime, r = psync(p, cfg.C2, t, fabric)
    e_half = []
    for s, pp, ri in zip(states, p_prime, r):
        s.x = s.x - pp
        e_half.append(s.e - ri)
    reset = t % cfg.H == 0
    if reset:
        _error_reset(states, e_half, cfg.C1, t, fabric)
    else:
        for s, eh in zip(states, e_half):
            s.e = eh
    return _trace(t, grads, p, reset, [s.e for s in states] if reset else None)


def step_cserpl(states, cfg, problem, t, fabric, seed, shared=None):
    grads = _gradients(states, problem, t, fabric, seed)
    p = _updates(states, grads, cfg, t)
    e_half = []
    for s, pi in zip(states, p):
        s.x = s.x - pi
        e_half.append(s.e - pi)
    reset = t % cfg.H == 0
    if reset:
        _error_reset(states, e_half, cfg.C1, t, fabric)
    else:
        for s, eh in zip(states, e_half):
            s.e = eh
    return _trace(t, grads, p, reset, [s.e for s in states] if reset else None)


def step_impl2(states, cfg, problem, t, fabric, seed, shared=None):
    """Implementation II with GRBS: partial synchronization applied to the models."""
    v = cfg.variant
    if not v.is_impl2:
        raise ConfigError([f"{v.value} is not an implementation-II variant"])
    if cfg.C1.kind is not Kind.GRBS or (v is Variant.CSER_IMPL2 and cfg.C2.kind is not Kind.GRBS):
        raise ConfigError(["implementation II requires GRBS compressors"])
    grads = _gradients(states, problem, t, fabric, seed)
    p = _updates(states, grads, cfg, t)
    if v is Variant.CSER_IMPL2:
        p_sync, _ = psync(p, cfg.C2, t, fabric)
    else:
        p_sync = p
    for s, pi in zip(states, p_sync):
        s.x = s.x - pi
    reset = v is Variant.CSEA_IMPL2 or t % cfg.H == 0
    if reset:
        x_new, _ = psync([s.x for s in states], cfg.C1, t, fabric)
        for s, xn in zip(states, x_new):
            s.x = xn
    return _trace(t, grads, p, reset)


STEPS: dict[Variant, Callable] = {
    Variant.FULLSGD: step_fullsgd,
    Variant.LOCALSGD: step_localsgd,
    Variant.EFSGD: step_efsgd,
    Variant.QSPARSE: step_qsparse,
    Variant.CSEA: step_csea,
    Variant.CSERPL: step_cserpl,
    Variant.CSER: step_cser,
    Variant.MCSER: step_mcser,
    Variant.CSER_IMPL2: step_impl2,
    Variant.CSERPL_IMPL2: step_impl2,
    Variant.CSEA_IMPL2: step_impl2,
}


def step(states, cfg, problem, t, fabric, seed, shared=None) -> RoundTrace:
    return STEPS[cfg.variant](states, cfg, problem, t, fabric, seed, shared)


def seeded(cfg: OptimizerConfig, seed: int) -> OptimizerConfig:
    """Derive per-run compressor seeds from the run seed."""
    return replace(cfg, C1=cfg.C1.with_seed(mix(seed, cfg.C1.seed)), C2=cfg.C2.with_seed(mix(seed, cfg.C2.seed)))


def iterate(
    problem: Problem,
    cfg: OptimizerConfig,
    T: int,
    seed: int = 0,
    fabric: Fabric | None = None,
    x0: np.ndarray | None = None,
) -> Iterator[tuple[int, list, RoundTrace]]:
    """Yield ``(t, states, trace)`` after each of rounds ``1..T``.

    The yielded states are live objects; copy them if you need history.
    """
    cfg = seeded(cfg.validate(), seed)
    fabric = fabric or Fabric(FabricConfig(problem.n))
    x0 = problem.initial_point() if x0 is None else x0
    states = init_states(cfg, x0, problem.n)
    shared = init_shared(cfg, x0)
    for t in range(1, T + 1):
        trace = step(states, cfg, problem, t, fabric, seed, shared)
        yield t, states, trace


def trajectory(problem, cfg, T, seed=0, fabric=None, x0=None) -> np.ndarray:
    """Stack of local models, shape ``(T, n, d)``."""
    return np.array([[s.x.copy() for s in states] for _, states, _ in iterate(problem, cfg, T, seed, fabric, x0)])


# -- analytic quantities -----------------------------------------------------


def overall_compression_ratio(variant: Variant | str, R1: float, R2: float = math.inf, H: int = 1) -> float:
    """Uncompressed-to-compressed traffic ratio of a configuration."""
    v = Variant(variant) if not isinstance(variant, Variant) else variant
    R1f = Fraction(R1)
    H = Fraction(H)
    if v in (Variant.CSER, Variant.MCSER, Variant.CSER_IMPL2):
        inv2 = 0 if math.isinf(R2) else 1 / Fraction(R2)
        return float(1 / (inv2 + 1 / (R1f * H)))
    if v in (Variant.QSPARSE, Variant.CSERPL, Variant.LOCALSGD, Variant.CSERPL_IMPL2):
        return float(R1f * H)
    if v in (Variant.EFSGD, Variant.CSEA, Variant.CSEA_IMPL2):
        return float(R1f)
    return 1.0


class BoundMethod(str, enum.Enum):
    CSER = "CSER"
    QSPARSE = "QSparse"


def error_bound_factor(method: BoundMethod | str, delta1, delta2=0, H=1, with_constant: bool = False):
    """Factor multiplying ``eta^2 L^2 V2`` in the compression-error term.

    Pass :class:`fractions.Fraction` arguments for exact results.  By default
    the leading constants (2 for CSER, 8 for QSparse) are dropped.
    """
    method = BoundMethod(method)
    if delta1 == 0:
        raise ZeroDivisionError("delta1 must be > 0")
    if method is BoundMethod.CSER:
        value = (4 * (1 - delta1) / delta1**2 + 1) * (1 - delta2) * H**2
        return 2 * value if with_constant else value
    value = (4 * (1 - delta1**2) / delta1**2 + 1) * H**2
    return 8 * value if with_constant else value


def theory_step_size(variant: Variant | str, gamma: float, T: int, n: int, delta1: float, delta2: float, H: int, L: float) -> float:
    """Step size that balances the noise and compression terms of the convergence rate (momentum form for MCSER)."""
    v = Variant(variant) if not isinstance(variant, Variant) else variant
    compression = 4 * (1 - delta1) / delta1**2 + 1
    if v is Variant.MCSER:
        denom = math.sqrt(T / n) + (2 * compression * (1 - delta2) * H**2 + 1) ** (1 / 3) * T ** (1 / 3)
        return min(gamma / denom, 0.5)
    denom = math.sqrt(T / n) + compression ** (1 / 3) * 2 ** (1 / 3) * (1 - delta2) ** (1 / 3) * H ** (2 / 3) * T ** (1 / 3)
    return min(gamma / denom, 1.0 / L)


def error_reset_bound(delta1: float, delta2: float, eta: float, H: int, V2: float, beta: float = 0.0) -> float:
    """Expected squared residual right after an error reset (momentum-aware)."""
    bound = (1 - delta2) * (1 - delta1) * eta**2 * H**2 * V2 / (1 - math.sqrt(1 - delta1)) ** 2
    return bound / (1 - beta) ** 2


def update_bound(eta: float, beta: float, V2: float) -> float:
    """Bound on the expected squared momentum update ``||p||^2``."""
    return eta**2 * V2 / (1 - beta) ** 2
