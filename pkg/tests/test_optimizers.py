import math
from dataclasses import fields
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cser.compressors import IDENTITY, ZERO, grbs, randomk, topk
from cser.optimizers import (
    BoundMethod,
    ConfigError,
    ModelState,
    OptimizerConfig,
    Schedule,
    ScheduleKind,
    Variant,
    WorkerState,
    theory_step_size,
    error_bound_factor,
    error_reset_bound,
    get_p,
    init_shared,
    init_states,
    iterate,
    mean_model,
    overall_compression_ratio,
    psync,
    step,
    trajectory,
    update_bound,
)
from cser.problems import HeterogeneousQuadratic
from cser.syncfabric import Fabric, FabricConfig, RunAborted

compressor_pairs = st.sampled_from(
    [
        (IDENTITY, IDENTITY),
        (IDENTITY, ZERO),
        (grbs(4, seed=1), grbs(16, seed=2)),
        (topk(3), topk(10)),
        (randomk(2, seed=5), ZERO),
        (topk(8), grbs(32, seed=3)),
    ]
)


def quad(n=4, d=30, noise=0.1, seed=0):
    return HeterogeneousQuadratic.generate(n, d, seed, noise_scale=noise, rotation_block=10 if d % 10 == 0 else None)


def plain_sgd(problem, eta, beta, T, seed):
    """Reference single-worker (momentum) SGD; returns the iterates x_1..x_T."""
    x, m, out = problem.initial_point(), np.zeros(problem.d), []
    for t in range(1, T + 1):
        g = problem.stochastic_gradient(0, x, t, seed)
        if beta:
            m = beta * m + g
            x = x - eta * (beta * m + g)
        else:
            x = x - eta * g
        out.append(x)
    return np.array(out)


def models(problem, cfg, T, seed=0):
    return trajectory(problem, cfg, T, seed)


# -- psync -------------------------------------------------------------------


def test_psync_identity_is_full_average():
    vs = [np.array([1.0, 2.0]), np.array([3.0, 4.0]), np.array([5.0, 9.0])]
    vp, r = psync(vs, IDENTITY, 1)
    for v in vp:
        assert np.allclose(v, [3.0, 5.0], rtol=0, atol=1e-15)
    assert all(np.array_equal(ri, np.zeros(2)) for ri in r)


def test_psync_zero_keeps_everything_local():
    vs = [np.array([1.0, 2.0]), np.array([3.0, 4.0])]
    fabric = Fabric(FabricConfig(2))
    vp, r = psync(vs, ZERO, 1, fabric)
    for v, p, ri in zip(vs, vp, r):
        assert np.array_equal(p, v) and np.array_equal(ri, v)
    assert fabric.ledger.rounds_with_traffic == 0


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40), compressor_pairs, st.integers(1, 1000))
def test_psync_single_worker_returns_input(xs, pair, t):
    v = np.array(xs)
    for C in pair:
        vp, _ = psync([v], C, t)
        assert np.array_equal(vp[0], v)


def test_get_p_without_momentum():
    s = WorkerState(0, np.zeros(3), np.zeros(3), np.zeros(3))
    g = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(get_p(s, g, 0.5, 0.0), 0.5 * g)
    assert np.array_equal(s.m, np.zeros(3))


# -- single worker collapse ----------------------------------------------------


@given(compressor_pairs, st.sampled_from([1, 3, 8]), st.integers(0, 50))
def test_single_worker_cser_is_sgd(pair, H, seed):
    p = quad(n=1, d=20)
    C1, C2 = pair
    got = models(p, OptimizerConfig(Variant.CSER, 0.1, 0.0, H, C1, C2), 60, seed)[:, 0]
    assert np.max(np.abs(got - plain_sgd(p, 0.1, 0.0, 60, seed))) <= 1e-12


@given(compressor_pairs, st.sampled_from([1, 4]), st.sampled_from([0.5, 0.9]))
def test_single_worker_mcser_is_momentum_sgd(pair, H, beta):
    p = quad(n=1, d=20)
    C1, C2 = pair
    got = models(p, OptimizerConfig(Variant.MCSER, 0.05, beta, H, C1, C2), 60, 3)[:, 0]
    assert np.max(np.abs(got - plain_sgd(p, 0.05, beta, 60, 3))) <= 1e-12


@pytest.mark.parametrize(
    "cfg",
    [
        OptimizerConfig(Variant.CSEA, 0.1, 0.0, 1, topk(4), ZERO),
        OptimizerConfig(Variant.CSERPL, 0.1, 0.0, 5, grbs(4, seed=1), ZERO),
        OptimizerConfig(Variant.EFSGD, 0.1, 0.0, 1, IDENTITY, ZERO),
    ],
    ids=["CSEA", "CSERPL", "EFSGD"],
)
def test_other_single_worker_variants_are_sgd(cfg):
    p = quad(n=1, d=20)
    got = models(p, cfg, 50, 1)[:, 0]
    assert np.max(np.abs(got - plain_sgd(p, 0.1, 0.0, 50, 1))) <= 1e-12


# -- full sync special cases ---------------------------------------------------


@pytest.mark.parametrize(
    "cfg",
    [
        OptimizerConfig(Variant.CSER, 0.1, 0.0, 1, IDENTITY, IDENTITY),
        OptimizerConfig(Variant.CSER, 0.1, 0.0, 1, IDENTITY, ZERO),
        OptimizerConfig(Variant.CSEA, 0.1, 0.0, 1, IDENTITY, ZERO),
        OptimizerConfig(Variant.CSERPL, 0.1, 0.0, 1, IDENTITY, ZERO),
        OptimizerConfig(Variant.EFSGD, 0.1, 0.0, 1, IDENTITY, ZERO),
        OptimizerConfig(Variant.LOCALSGD, 0.1, 0.0, 1, IDENTITY, ZERO),
    ],
    ids=["CSER-II", "CSER-I0", "CSEA", "CSERPL", "EFSGD", "LocalSGD-H1"],
)
def test_identity_compression_is_full_sync_sgd(cfg):
    p = quad()
    ref = models(p, OptimizerConfig(Variant.FULLSGD, 0.1), 40, 2)
    assert np.max(np.abs(models(p, cfg, 40, 2) - ref)) <= 1e-12


def test_full_sync_reference_by_hand():
    p = quad(n=3, d=10)
    x = p.initial_point()
    xs = []
    for t in range(1, 21):
        x = x - 0.1 * np.mean([p.stochastic_gradient(i, x, t, 0) for i in range(3)], axis=0)
        xs.append(x)
    got = models(p, OptimizerConfig(Variant.FULLSGD, 0.1), 20)
    assert np.max(np.abs(got - np.array(xs)[:, None, :])) <= 1e-12


def test_local_sgd_by_hand():
    p = quad(n=3, d=10)
    H = 4
    xs = [p.initial_point()] * 3
    out = []
    for t in range(1, 13):
        xs = [x - 0.1 * p.stochastic_gradient(i, x, t, 0) for i, x in enumerate(xs)]
        if t % H == 0:
            avg = np.mean(xs, axis=0)
            xs = [avg] * 3
        out.append(np.array(xs))
    got = models(p, OptimizerConfig(Variant.LOCALSGD, 0.1, 0.0, H), 12)
    assert np.max(np.abs(got - np.array(out))) <= 1e-12


# -- reductions ----------------------------------------------------------------


LATTICE = [
    (OptimizerConfig(Variant.CSER, 0.1, 0.0, 4, grbs(4, seed=1), ZERO), OptimizerConfig(Variant.CSERPL, 0.1, 0.0, 4, grbs(4, seed=1), ZERO)),
    (OptimizerConfig(Variant.CSER, 0.1, 0.0, 1, topk(4), ZERO), OptimizerConfig(Variant.CSEA, 0.1, 0.0, 1, topk(4), ZERO)),
    (OptimizerConfig(Variant.CSERPL, 0.1, 0.0, 1, topk(4), ZERO), OptimizerConfig(Variant.CSEA, 0.1, 0.0, 1, topk(4), ZERO)),
    (OptimizerConfig(Variant.CSERPL, 0.1, 0.0, 3, IDENTITY, ZERO), OptimizerConfig(Variant.LOCALSGD, 0.1, 0.0, 3, IDENTITY, ZERO)),
    (OptimizerConfig(Variant.QSPARSE, 0.1, 0.0, 1, topk(4), ZERO), OptimizerConfig(Variant.EFSGD, 0.1, 0.0, 1, topk(4), ZERO)),
    (OptimizerConfig(Variant.QSPARSE, 0.1, 0.0, 5, IDENTITY, ZERO), OptimizerConfig(Variant.LOCALSGD, 0.1, 0.0, 5, IDENTITY, ZERO)),
    (OptimizerConfig(Variant.MCSER, 0.1, 0.0, 4, grbs(4, seed=1), grbs(8, seed=2)), OptimizerConfig(Variant.CSER, 0.1, 0.0, 4, grbs(4, seed=1), grbs(8, seed=2))),
]


@pytest.mark.parametrize("a,b", LATTICE, ids=["CSER=PL", "CSER=CSEA", "PL=CSEA", "PL=Local", "QS=EF", "QS=Local", "MCSER0=CSER"])
def test_reduction_lattice(a, b):
    p = quad(n=5, d=40)
    assert np.max(np.abs(models(p, a, 60, 4) - models(p, b, 60, 4))) <= 1e-12


def test_cserpl_zero_c2_is_bitwise_cser():
    p = quad(n=4, d=40)
    a = models(p, OptimizerConfig(Variant.CSER, 0.1, 0.0, 4, topk(4), ZERO), 40)
    b = models(p, OptimizerConfig(Variant.CSERPL, 0.1, 0.0, 4, topk(4), ZERO), 40)
    assert np.array_equal(a, b)


# -- structural invariants ----------------------------------------------------


@pytest.mark.parametrize(
    "cfg",
    [
        OptimizerConfig(Variant.CSER, 0.1, 0.0, 5, grbs(4, seed=1), grbs(16, seed=2)),
        OptimizerConfig(Variant.CSER, 0.1, 0.0, 5, topk(4), topk(16)),
        OptimizerConfig(Variant.MCSER, 0.05, 0.9, 5, topk(4), grbs(16, seed=2)),
        OptimizerConfig(Variant.CSEA, 0.1, 0.0, 1, randomk(4, seed=1), ZERO),
        OptimizerConfig(Variant.CSERPL, 0.1, 0.0, 3, topk(4), ZERO),
    ],
    ids=["CSER-grbs", "CSER-topk", "MCSER", "CSEA", "CSERPL"],
)
def test_bifurcated_models_share_x_minus_e(cfg):
    p = HeterogeneousQuadratic.generate(2, 30, seed=1, noise_scale=0.0, heterogeneity=3.0)
    for _, states, _ in iterate(p, cfg, 50, 0):
        z = [s.x - s.e for s in states]
        scale = 1 + np.max(np.abs(mean_model(states)))
        assert np.max(np.abs(z[0] - z[1])) <= 1e-9 * scale
    # and the local models really are different
    assert not np.array_equal(states[0].x, states[1].x)


def test_identity_error_reset_zeroes_residuals():
    p = quad()
    cfg = OptimizerConfig(Variant.CSER, 0.1, 0.0, 3, IDENTITY, topk(4))
    for t, states, trace in iterate(p, cfg, 12):
        if t % 3 == 0:
            assert trace.reset
            assert all(not s.e.any() for s in states)
        else:
            assert not trace.reset


@pytest.mark.parametrize("variant,H", [(Variant.QSPARSE, 4), (Variant.EFSGD, 1)])
def test_synchronized_models_bitwise_equal(variant, H):
    p = quad()
    cfg = OptimizerConfig(variant, 0.1, 0.0, H, topk(4), ZERO)
    for t, states, _ in iterate(p, cfg, 24):
        if t % H == 0:
            assert all(np.array_equal(s.x, states[0].x) for s in states)


def test_qsparse_base_tracks_synced_model():
    p = quad()
    cfg = OptimizerConfig(Variant.QSPARSE, 0.1, 0.0, 4, topk(4), ZERO).validate()
    x0 = p.initial_point()
    states, shared = init_states(cfg, x0, p.n), init_shared(cfg, x0)
    fabric = Fabric(FabricConfig(p.n))
    for t in range(1, 13):
        step(states, cfg, p, t, fabric, 0, shared)
        if t % 4 == 0:
            assert np.array_equal(shared.x_hat, states[0].x)
    assert shared.round == 12


def test_efsgd_zero_compressor_first_residual():
    p = quad()
    cfg = OptimizerConfig(Variant.EFSGD, 0.1, 0.0, 1, ZERO, ZERO)
    _, states, _ = next(iter(iterate(p, cfg, 1, seed=3)))
    x0 = p.initial_point()
    for i, s in enumerate(states):
        assert np.array_equal(s.e, -0.1 * p.stochastic_gradient(i, x0, 1, 3))
        assert np.array_equal(s.x, x0)


def test_impl2_state_has_no_residual():
    assert "e" not in {f.name for f in fields(ModelState)}
    cfg = OptimizerConfig(Variant.CSER_IMPL2, 0.1, 0.0, 4, grbs(4), grbs(8))
    states = init_states(cfg, np.zeros(5), 3)
    assert all(isinstance(s, ModelState) and not hasattr(s, "e") for s in states)


@pytest.mark.parametrize(
    "impl2,impl1,beta,H,C2",
    [
        (Variant.CSER_IMPL2, Variant.CSER, 0.0, 4, grbs(8, seed=2)),
        (Variant.CSER_IMPL2, Variant.MCSER, 0.9, 4, grbs(8, seed=2)),
        (Variant.CSERPL_IMPL2, Variant.CSERPL, 0.0, 3, ZERO),
        (Variant.CSEA_IMPL2, Variant.CSEA, 0.0, 1, ZERO),
    ],
)
def test_impl2_matches_impl1(impl2, impl1, beta, H, C2):
    p = quad(n=4, d=40)
    C1 = grbs(4, seed=1)
    a = models(p, OptimizerConfig(impl2, 0.1, beta, H, C1, C2), 80, 2)
    b = models(p, OptimizerConfig(impl1, 0.1, beta, H, C1, C2), 80, 2)
    assert np.max(np.abs(a - b)) <= 1e-9


def test_trace_reports_norms():
    p = quad()
    cfg = OptimizerConfig(Variant.MCSER, 0.1, 0.5, 2, topk(2), topk(4))
    traces = [tr for _, _, tr in iterate(p, cfg, 4)]
    assert [tr.reset for tr in traces] == [False, True, False, True]
    assert all(len(tr.grad_sq) == p.n and len(tr.update_sq) == p.n for tr in traces)
    assert traces[1].reset_error_sq is not None and traces[0].reset_error_sq is None


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_gradient_aborts():
    p = quad(n=2, d=10, noise=0.0)
    cfg = OptimizerConfig(Variant.FULLSGD, 0.1)
    with pytest.raises(RunAborted) as exc:
        list(iterate(p, cfg, 3, x0=np.full(10, np.inf)))
    assert exc.value.round == 1


def test_threads_do_not_change_results():
    p = quad(n=4, d=40)
    cfg = OptimizerConfig(Variant.CSER, 0.1, 0.0, 4, grbs(4, seed=1), topk(8))
    ref = trajectory(p, cfg, 30, 1, Fabric(FabricConfig(4, threads=1)))
    for threads in (2, 4):
        assert np.array_equal(trajectory(p, cfg, 30, 1, Fabric(FabricConfig(4, threads=threads))), ref)


def test_mean_model_examples():
    s = [WorkerState(1, np.array([2.0, 4.0]), None, None), WorkerState(0, np.array([0.0, 0.0]), None, None)]
    assert np.array_equal(mean_model(s), [1.0, 2.0])
    same = [WorkerState(i, np.array([0.1, 0.7]), None, None) for i in range(5)]
    assert np.array_equal(mean_model(same), [0.1, 0.7])


# -- configuration -------------------------------------------------------------


@pytest.mark.parametrize(
    "cfg,fragment",
    [
        (OptimizerConfig(Variant.EFSGD, H=2, C1=topk(2)), "H = 1"),
        (OptimizerConfig(Variant.CSEA, H=3, C1=topk(2)), "H = 1"),
        (OptimizerConfig(Variant.CSERPL, C1=topk(2), C2=topk(2)), "C2 = zero"),
        (OptimizerConfig(Variant.QSPARSE, C1=topk(2), C2=topk(2)), "C2 = zero"),
        (OptimizerConfig(Variant.LOCALSGD, C1=topk(2)), "C1 = identity"),
        (OptimizerConfig(Variant.CSER_IMPL2, C1=topk(2), C2=grbs(2)), "grbs"),
        (OptimizerConfig(Variant.CSER_IMPL2, C1=grbs(2), C2=topk(2)), "grbs"),
        (OptimizerConfig(Variant.CSER, beta=0.9), "MCSER"),
        (OptimizerConfig(eta=0.0), "eta"),
        (OptimizerConfig(beta=1.0, variant=Variant.MCSER), "beta"),
        (OptimizerConfig(H=0), "H must"),
        (OptimizerConfig(schedule=Schedule(ScheduleKind.STEP, (5, 2))), "milestones"),
        (OptimizerConfig(C1=ZERO, schedule=Schedule(ScheduleKind.THEORY)), "delta_1"),
    ],
)
def test_config_violations(cfg, fragment):
    with pytest.raises(ConfigError) as exc:
        cfg.validate()
    assert any(fragment in msg for msg in exc.value.problems)


def test_violations_are_all_listed():
    cfg = OptimizerConfig(Variant.LOCALSGD, eta=-1, H=0, C1=topk(2), C2=topk(2))
    assert len(cfg.violations()) >= 4


def test_step_schedule():
    cfg = OptimizerConfig(eta=1.0, schedule=Schedule(ScheduleKind.STEP, (10, 20), decay=0.1))
    assert [cfg.eta_at(t) for t in (1, 10, 11, 20, 21)] == pytest.approx([1.0, 1.0, 0.1, 0.1, 0.01])


def test_variant_parse():
    assert Variant.parse("qsparselocal") is Variant.QSPARSE
    assert Variant.parse("CSER-PL") is Variant.CSERPL
    with pytest.raises(ValueError):
        Variant.parse("Adam")


# -- analytic quantities ---------------------------------------------------------


def test_bound_factor_remark_values():
    F = Fraction
    assert error_bound_factor(BoundMethod.QSPARSE, F(1, 2), 0, 8) == 832
    assert error_bound_factor(BoundMethod.CSER, F(1, 2), F(0), 8) == 576
    assert error_bound_factor(BoundMethod.CSER, F(1, 3), F(0), 4) == 400
    small = error_bound_factor(BoundMethod.CSER, F(7, 8), F(1, 96), 12)
    assert small < 236 and small == F(81, 49) * F(95, 96) * 144 == F(23085, 98)
    assert error_bound_factor("CSER", F(7, 8), F(1, 96), 12, with_constant=True) == 2 * small
    assert error_bound_factor("QSparse", F(1, 2), 0, 8, with_constant=True) == 8 * 832


def test_bound_factor_needs_positive_delta():
    with pytest.raises(ZeroDivisionError):
        error_bound_factor("CSER", 0, 0, 1)


@given(st.fractions(Fraction(1, 100), 1), st.integers(1, 64))
def test_cser_factor_never_exceeds_qsparse(d1, H):
    # with delta_2 = 0 the CSER factor is always the smaller one
    assert error_bound_factor("CSER", d1, 0, H) <= error_bound_factor("QSparse", d1, 0, H)


@pytest.mark.parametrize(
    "variant,R1,R2,H,rc",
    [
        (Variant.CSER, 2, 4, 2, 2),
        (Variant.CSER, 32, 2048, 64, 1024),
        (Variant.QSPARSE, 128, math.inf, 8, 1024),
        (Variant.CSERPL, 8, math.inf, 4, 32),
        (Variant.EFSGD, 64, math.inf, 1, 64),
        (Variant.CSEA, 16, math.inf, 1, 16),
        (Variant.FULLSGD, 1, math.inf, 1, 1),
        (Variant.MCSER, 8, 64, 8, 32),
    ],
)
def test_overall_compression_ratio(variant, R1, R2, H, rc):
    assert overall_compression_ratio(variant, R1, R2, H) == rc


def test_theory_step_size():
    eta = theory_step_size(Variant.CSER, 1.0, 1000, 8, 0.5, 0.0, 8, 1.0)
    denom = math.sqrt(1000 / 8) + (4 * 0.5 / 0.25 + 1) ** (1 / 3) * 2 ** (1 / 3) * 8 ** (2 / 3) * 1000 ** (1 / 3)
    assert eta == pytest.approx(1 / denom)
    assert theory_step_size(Variant.CSER, 1e9, 10, 1, 1.0, 0.0, 1, 4.0) == 0.25
    m = theory_step_size(Variant.MCSER, 1.0, 1000, 8, 0.5, 0.0, 8, 1.0)
    assert m == pytest.approx(1 / (math.sqrt(125) + (2 * 9 * 64 + 1) ** (1 / 3) * 10))
    assert theory_step_size(Variant.MCSER, 1e9, 10, 1, 1.0, 0.0, 1, 4.0) == 0.5


def test_error_bounds():
    b = error_reset_bound(0.5, 0.0, 0.1, 8, 2.0)
    assert b == pytest.approx(0.5 * 0.01 * 64 * 2.0 / (1 - math.sqrt(0.5)) ** 2)
    assert error_reset_bound(0.5, 0.0, 0.1, 8, 2.0, beta=0.5) == pytest.approx(4 * b)
    assert update_bound(0.1, 0.9, 3.0) == pytest.approx(0.01 * 3.0 / 0.01)
