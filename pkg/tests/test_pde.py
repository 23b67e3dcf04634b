import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from phicnet.fields import D01, D02, D10, D20, BoundaryRule, ShapeError
from phicnet.pde import PdeKind, PdeModel, f_adjoint, f_eval, rhs

from oracles import correlate_loop


def rand(shape, seed):
    return torch.randn(*shape, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))


def test_heat_constant_interior_zero():
    m = PdeModel("heat", 0.2)
    out = f_eval(m, torch.full((1, 7, 7), 3.0, dtype=torch.float64))
    assert torch.all(out[..., 1:-1, 1:-1] == 0)


def test_heat_spike():
    m = PdeModel("heat", 0.1)
    u = torch.zeros(1, 7, 7, dtype=torch.float64)
    u[0, 3, 3] = 1.0
    out = f_eval(m, u)[0].numpy()
    expect = np.zeros((7, 7))
    expect[3, 3] = -0.4
    for r, c in ((2, 3), (4, 3), (3, 2), (3, 4)):
        expect[r, c] = 0.1
    np.testing.assert_allclose(out, expect, atol=1e-15)
    # independent scalar-loop evaluation of the same operator
    lap = correlate_loop(u[0].numpy(), D20.taps, "dirichlet_zero") + correlate_loop(u[0].numpy(), D02.taps, "dirichlet_zero")
    np.testing.assert_allclose(out, 0.1 * lap, atol=1e-15)


def test_burgers_constant_velocity_interior_zero():
    m = PdeModel("burgers", 0.13)
    out = f_eval(m, torch.full((2, 6, 6), 0.7, dtype=torch.float64))
    assert torch.all(out[..., 1:-1, 1:-1] == 0)


def test_burgers_matches_componentwise_loop():
    u = rand((2, 6, 5), 3).numpy()
    beta = 0.11
    b = "neumann_replicate"
    expect = np.stack([
        -u[0] * correlate_loop(u[i], D10.taps, b) - u[1] * correlate_loop(u[i], D01.taps, b)
        + beta * (correlate_loop(u[i], D20.taps, b) + correlate_loop(u[i], D02.taps, b))
        for i in range(2)
    ])
    got = f_eval(PdeModel("burgers", beta), torch.as_tensor(u)).numpy()
    np.testing.assert_allclose(got, expect, atol=1e-14)


def test_channel_mismatch_and_nonfinite():
    with pytest.raises(ShapeError):
        f_eval(PdeModel("burgers", 0.1), torch.zeros(1, 4, 4, dtype=torch.float64))
    u = torch.zeros(1, 4, 4, dtype=torch.float64)
    u[0, 1, 1] = float("nan")
    with pytest.raises(ValueError):
        f_eval(PdeModel("heat", 0.1), u)


def test_negative_theta_rejected():
    with pytest.raises(ValueError):
        PdeModel("wave", -0.1)


def test_kind_properties():
    assert PdeModel("wave", 0.2).n == 2
    assert PdeModel("heat", 0.2).n == 1
    assert PdeModel("burgers", 0.2).channels == 2
    assert len(PdeModel("burgers", 0.2).kernels) == 4
    assert PdeModel("heat", 0.1).boundary is BoundaryRule.DIRICHLET_ZERO


@pytest.mark.parametrize("kind", ["heat", "wave"])
def test_linear_in_theta(kind):
    u = rand((1, 6, 6), 0)
    a = f_eval(PdeModel(kind, 0.1), u)
    b = f_eval(PdeModel(kind, 0.2), u)
    assert torch.allclose(b, 2 * a, rtol=1e-15, atol=1e-15)


def test_theta_gradient_all_ones():
    u = rand((1, 6, 6), 1)
    m = PdeModel("heat", 0.17)
    _, dtheta = f_adjoint(m, u, torch.ones_like(u))
    lap = f_eval(m.with_theta(1.0), u)
    assert dtheta == pytest.approx(lap.sum().item(), rel=1e-14)


@pytest.mark.parametrize("kind", list(PdeKind))
def test_zero_upstream(kind):
    m = PdeModel(kind, 0.1)
    u = rand((m.channels, 5, 5), 2)
    du, dt = f_adjoint(m, u, torch.zeros_like(u))
    assert torch.all(du == 0) and dt == 0.0


def _fd_check(kind, boundary, seed, eps=1e-6):
    m = PdeModel(kind, 0.13, boundary)
    u = rand((m.channels, 6, 6), seed)
    g = rand((m.channels, 6, 6), seed + 100)
    d = rand((m.channels, 6, 6), seed + 200)
    du, dtheta = f_adjoint(m, u, g)
    fd_u = ((f_eval(m, u + eps * d) - f_eval(m, u - eps * d)) * g).sum().item() / (2 * eps)
    an_u = (du * d).sum().item()
    fd_t = ((f_eval(m.with_theta(0.13 + eps), u) - f_eval(m.with_theta(0.13 - eps), u)) * g).sum().item() / (2 * eps)
    return (an_u, fd_u), (dtheta, fd_t)


@pytest.mark.parametrize("kind", list(PdeKind))
@pytest.mark.parametrize("boundary", list(BoundaryRule))
def test_adjoint_matches_finite_differences(kind, boundary):
    (a, f), (at, ft) = _fd_check(kind, boundary, 5)
    assert abs(a - f) <= 1e-6 * abs(f)
    assert abs(at - ft) <= 1e-6 * abs(ft)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), kind=st.sampled_from(list(PdeKind)))
def test_adjoint_directional_property(seed, kind):
    (a, f), _ = _fd_check(kind, None, seed)
    assert abs(a - f) <= 1e-5 * max(abs(f), 1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), alpha=st.floats(0.0, 0.25))
def test_heat_neumann_conserves_sum(seed, alpha):
    u = rand((1, 7, 5), seed)
    out = f_eval(PdeModel("heat", alpha, "neumann_replicate"), u)
    assert abs(out.sum().item()) <= 1e-10 * u.abs().sum().item()


def test_autograd_uses_adjoint():
    m = PdeModel("burgers", 0.1)
    u = rand((2, 5, 5), 9).requires_grad_(True)
    th = torch.tensor(0.1, dtype=torch.float64, requires_grad=True)
    g = rand((2, 5, 5), 10)
    (rhs(m.kind, m.boundary, u, th) * g).sum().backward()
    du, dt = f_adjoint(m, u.detach(), g)
    assert torch.equal(u.grad, du)
    assert th.grad.item() == dt
