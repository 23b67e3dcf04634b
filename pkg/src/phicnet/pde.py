"""Known-physics right-hand sides f(U; theta) for heat, wave and Burgers.

All parameters are in lattice units: the scalar absorbs the timestep and
grid spacing, so one call of :func:`f_eval` is the increment of a unit
explicit step.

The forward map is wrapped in a ``torch.autograd.Function`` whose backward
is the hand-written :func:`f_adjoint`; backpropagation through the cell
therefore uses these adjoints rather than autograd's tape for the physics.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import torch

from .fields import (
    D01,
    D02,
    D10,
    D20,
    DTYPE,
    BoundaryRule,
    ShapeError,
    stencil_adjoint,
    stencil_apply,
)


class PdeKind(str, Enum):
    HEAT = "heat"
    WAVE = "wave"
    BURGERS = "burgers"


PARAM_NAME = {PdeKind.HEAT: "alpha_eff", PdeKind.WAVE: "c2_eff", PdeKind.BURGERS: "beta_eff"}
TEMPORAL_ORDER = {PdeKind.HEAT: 1, PdeKind.WAVE: 2, PdeKind.BURGERS: 1}
CHANNELS = {PdeKind.HEAT: 1, PdeKind.WAVE: 1, PdeKind.BURGERS: 2}
DEFAULT_BOUNDARY = {
    PdeKind.HEAT: BoundaryRule.DIRICHLET_ZERO,
    PdeKind.WAVE: BoundaryRule.DIRICHLET_ZERO,
    PdeKind.BURGERS: BoundaryRule.NEUMANN_REPLICATE,
}
KERNELS = {
    PdeKind.HEAT: (D20, D02),
    PdeKind.WAVE: (D20, D02),
    PdeKind.BURGERS: (D10, D01, D20, D02),
}
# explicit-step stability bounds used when generating data
STABILITY_BOUND = {PdeKind.HEAT: 0.25, PdeKind.WAVE: 0.5, PdeKind.BURGERS: 0.25}


@dataclass(frozen=True)
class PdeModel:
    kind: PdeKind
    theta: float
    boundary: BoundaryRule | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", PdeKind(self.kind))
        if self.boundary is None:
            object.__setattr__(self, "boundary", DEFAULT_BOUNDARY[self.kind])
        else:
            object.__setattr__(self, "boundary", BoundaryRule(self.boundary))
        if self.theta < 0:
            raise ValueError(f"{self.param_name} must be non-negative, got {self.theta}")

    @property
    def n(self) -> int:
        return TEMPORAL_ORDER[self.kind]

    @property
    def channels(self) -> int:
        return CHANNELS[self.kind]

    @property
    def kernels(self):
        return KERNELS[self.kind]

    @property
    def param_name(self) -> str:
        return PARAM_NAME[self.kind]

    def with_theta(self, theta: float) -> "PdeModel":
        return replace(self, theta=float(theta))

    def f_eval(self, u: torch.Tensor) -> torch.Tensor:
        return f_eval(self, u)

    def f_adjoint(self, u: torch.Tensor, upstream: torch.Tensor):
        return f_adjoint(self, u, upstream)


def _laplacian(u, boundary):
    return stencil_apply(u, D20, boundary) + stencil_apply(u, D02, boundary)


def _laplacian_adjoint(g, boundary):
    return stencil_adjoint(g, D20, boundary) + stencil_adjoint(g, D02, boundary)


def _check_channels(kind: PdeKind, u: torch.Tensor):
    if u.dim() < 3 or u.shape[-3] != CHANNELS[kind]:
        raise ShapeError(f"{kind.value} field channels", (CHANNELS[kind], "X", "Y"), u.shape[-3:])


def rhs(kind: PdeKind, boundary: BoundaryRule, u: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    """Evaluate f for a tensor-valued parameter; differentiable in ``u`` and ``theta``."""
    kind = PdeKind(kind)
    _check_channels(kind, u)
    return _Rhs.apply(u, theta, kind, BoundaryRule(boundary))


def _forward(kind, boundary, u, theta):
    if kind is PdeKind.BURGERS:
        u1, u2 = u[..., 0:1, :, :], u[..., 1:2, :, :]
        adv = u1 * stencil_apply(u, D10, boundary) + u2 * stencil_apply(u, D01, boundary)
        return theta * _laplacian(u, boundary) - adv
    return theta * _laplacian(u, boundary)


def _adjoint(kind, boundary, u, theta, g):
    if kind is PdeKind.BURGERS:
        u1, u2 = u[..., 0:1, :, :], u[..., 1:2, :, :]
        dx = stencil_apply(u, D10, boundary)
        dy = stencil_apply(u, D01, boundary)
        lap = _laplacian(u, boundary)
        du = (
            theta * _laplacian_adjoint(g, boundary)
            - stencil_adjoint(u1 * g, D10, boundary)
            - stencil_adjoint(u2 * g, D01, boundary)
        )
        # u1, u2 also enter as advecting velocities
        du = du - torch.cat(
            [(g * dx).sum(dim=-3, keepdim=True), (g * dy).sum(dim=-3, keepdim=True)], dim=-3
        )
        dtheta = (g * lap).sum()
        return du, dtheta
    lap = _laplacian(u, boundary)
    return theta * _laplacian_adjoint(g, boundary), (g * lap).sum()


class _Rhs(torch.autograd.Function):
    @staticmethod
    def forward(ctx, u, theta, kind, boundary):
        ctx.kind, ctx.boundary = kind, boundary
        ctx.save_for_backward(u, theta)
        return _forward(kind, boundary, u, theta)

    @staticmethod
    def backward(ctx, g):
        u, theta = ctx.saved_tensors
        du, dtheta = _adjoint(ctx.kind, ctx.boundary, u, theta, g)
        return du, dtheta.reshape(theta.shape), None, None


def f_eval(model: PdeModel, u: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(u).all():
        raise ValueError("f_eval: non-finite input field")
    theta = torch.tensor(model.theta, dtype=DTYPE)
    with torch.no_grad():
        return rhs(model.kind, model.boundary, u, theta)


def f_adjoint(model: PdeModel, u: torch.Tensor, upstream: torch.Tensor):
    """Vector-Jacobian product of f_eval: returns (dL/dU, dL/dtheta)."""
    if u.shape != upstream.shape:
        raise ShapeError("f_adjoint upstream", u.shape, upstream.shape)
    _check_channels(model.kind, u)
    theta = torch.tensor(model.theta, dtype=DTYPE)
    du, dtheta = _adjoint(model.kind, model.boundary, u, theta, upstream)
    return du, float(dtheta)
