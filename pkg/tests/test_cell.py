import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from phicnet.cell import CellState, PhICNet, build_phicnet, homogeneous_update, temporal_coeffs
from phicnet.fields import ShapeError
from phicnet.pde import PdeKind, PdeModel
from phicnet.rednet import RedNet, RedNetPlan
from phicnet.sim import DEFAULT_THETA, SOURCE_FOR_SYSTEM, simulate_sequence
from phicnet.sources import Impulse, ZeroSource, make_source
from phicnet.training import CLOSED_LOOP, TEACHER_FORCED, rollout


def silence(model: PhICNet, w=None):
    """Zero the residual branch so the source path is w_vc only."""
    with torch.no_grad():
        for layer in model.rednet.conv_layers():
            layer.weight.zero_()
            layer.bias.zero_()
        if w is not None:
            model.rednet.w_vc.copy_(torch.tensor(w, dtype=torch.float64))
    return model


@pytest.mark.parametrize("m,expect", [(1, [1.0]), (2, [2.0, -1.0]), (3, [3.0, -3.0, 1.0])])
def test_temporal_coeffs(m, expect):
    assert temporal_coeffs(m) == expect


def test_temporal_coeffs_rejects_zero():
    with pytest.raises(ValueError):
        temporal_coeffs(0)


@given(st.integers(1, 12))
def test_temporal_coeffs_sum_to_one(m):
    assert sum(temporal_coeffs(m)) == 1.0


def test_homogeneous_leapfrog_without_physics():
    A = torch.randn(1, 4, 4, dtype=torch.float64)
    B = torch.randn(1, 4, 4, dtype=torch.float64)
    h = homogeneous_update("wave", "dirichlet_zero", (A, B), torch.tensor(0.0, dtype=torch.float64))
    assert torch.equal(h, 2 * A - B)


def test_homogeneous_zero_history():
    z = torch.zeros(1, 4, 4, dtype=torch.float64)
    assert torch.all(homogeneous_update("heat", "dirichlet_zero", (z,), torch.tensor(0.2)) == 0)


@pytest.mark.parametrize("kind,K,frames", [("heat", 1, 2), ("wave", 2, 4), ("burgers", 3, 4)])
def test_warmup_frame_count(kind, K, frames):
    m = build_phicnet(kind, K, 0.1)
    assert m.warmup_frames == frames
    C = m.channels
    with pytest.raises(ValueError):
        m.warmup([torch.zeros(C, 8, 8, dtype=torch.float64)] * (frames - 1))
    s = m.warmup([torch.zeros(C, 8, 8, dtype=torch.float64)] * frames)
    assert len(s.c_u) == m.n and len(s.c_v) == K
    assert all(torch.all(x == 0) for x in s.c_u + s.c_v + (s.h_prev,))


def test_first_prediction_targets_index_n_plus_k():
    seq = torch.randn(1, 7, 1, 8, 8, dtype=torch.float64)
    m = build_phicnet("wave", 2, 0.2)
    assert rollout(m, seq, TEACHER_FORCED).first == 4


def test_warmup_deterministic():
    frames = [torch.randn(1, 8, 8, dtype=torch.float64) for _ in range(3)]
    m = build_phicnet("heat", 2, 0.12, seed=3)
    a, b = m.warmup(frames), m.warmup(frames)
    assert all(torch.equal(x, y) for x, y in zip(a.c_v + (a.h_prev,), b.c_v + (b.h_prev,)))


def test_estimate_source_cases():
    m = build_phicnet("heat", 1, 0.1)
    u = torch.randn(1, 8, 8, dtype=torch.float64)
    s = CellState((u,), (u,), u.clone())
    assert torch.all(m.estimate_source(s, u) == 0)
    cold = CellState((u,), (u,), torch.zeros_like(u))
    assert torch.equal(m.estimate_source(cold, u), u)
    with pytest.raises(ShapeError):
        m.estimate_source(s, torch.zeros(1, 4, 4, dtype=torch.float64))


def test_zero_state_zero_prediction():
    m = build_phicnet("wave", 2, 0.2, seed=5)
    z = torch.zeros(1, 8, 8, dtype=torch.float64)
    s = m.warmup([z] * 4)
    _, u_hat, _ = m.cell_step(s, z)
    # the final decoder layer starts at zero, so the residual branch is silent
    assert torch.all(u_hat == 0)


def test_persistence_source_model():
    m = silence(build_phicnet("heat", 1, 0.1), [1.0])
    frames = [torch.randn(1, 8, 8, dtype=torch.float64) for _ in range(3)]
    s = m.warmup(frames[:2])
    s, _, v_hat = m.cell_step(s, frames[2])
    assert torch.equal(v_hat, s.c_v[0])


def test_stack_order_after_ingest():
    m = build_phicnet("wave", 2, 0.2)
    fr = [torch.full((1, 8, 8), float(i), dtype=torch.float64) for i in range(5)]
    s = m.warmup(fr[:4])
    s = m.ingest(s, fr[4])
    assert torch.equal(s.c_u[0], fr[4]) and torch.equal(s.c_u[1], fr[3])
    assert torch.equal(s.h_prev, m.homogeneous_step(s.c_u))


def test_rednet_plan_must_match():
    with pytest.raises(ShapeError):
        PhICNet("burgers", 1, RedNet(RedNetPlan(1, 1)), 0.1)


@pytest.mark.parametrize("system", ["heat", "wave"])
def test_closed_loop_reproduces_simulator(system):
    pm = PdeModel(system, DEFAULT_THETA[PdeKind(system)])
    f = torch.zeros(1, 16, 16, dtype=torch.float64)
    f[0, 5, 9], f[0, 11, 3] = 1.0, -0.5
    seq = simulate_sequence(pm, Impulse(f), 60, (16, 16))
    m = silence(build_phicnet(system, 1, pm.theta), [0.0])
    ro = rollout(m, seq.u[None], CLOSED_LOOP)
    pred = torch.stack(ro.u_hat, dim=1)[0]
    ref = seq.u[ro.first:]
    assert pred.shape[0] >= 50
    assert (pred - ref).abs().max().item() <= 1e-12
    assert ref.abs().max().item() > 1e-3


@pytest.mark.parametrize("system", ["heat", "wave", "burgers"])
def test_teacher_forced_source_recovery(system):
    kind = PdeKind(system)
    pm = PdeModel(kind, DEFAULT_THETA[kind])
    seq = simulate_sequence(pm, make_source(SOURCE_FOR_SYSTEM[kind]), 60, (16, 16),
                            rng=np.random.default_rng(11))
    m = build_phicnet(system, 2, pm.theta)
    ro = rollout(m, seq.u[None], TEACHER_FORCED)
    for i, v in enumerate(ro.v_est):
        t = ro.first + i
        assert (v[0] - seq.v[t - 1]).abs().max().item() <= 1e-12


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000), K=st.integers(1, 3))
def test_zero_source_any_k_stays_exact(seed, K):
    pm = PdeModel("heat", 0.15)
    f = torch.as_tensor(np.random.default_rng(seed).standard_normal((1, 8, 8)))
    seq = simulate_sequence(pm, Impulse(f), 20, (8, 8))
    m = silence(build_phicnet("heat", K, 0.15), [0.0] * K)
    ro = rollout(m, seq.u[None], CLOSED_LOOP)
    assert (torch.stack(ro.u_hat, 1)[0] - seq.u[ro.first:]).abs().max().item() <= 1e-12


def test_zero_source_process_zero_rollout():
    seq = simulate_sequence(PdeModel("wave", 0.25), ZeroSource(), 12, (8, 8))
    m = build_phicnet("wave", 2, 0.25)
    ro = rollout(m, seq.u[None], CLOSED_LOOP)
    assert all(torch.all(u == 0) for u in ro.u_hat)
