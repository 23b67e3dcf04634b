"""The physics-incorporated recurrent cell.

Per step the cell pushes its input onto the observation memory ``c_u``,
estimates the source as the part of the input the previous homogeneous
solution did not explain, pushes that onto the source memory ``c_v``,
advances the homogeneous solution with the known PDE and finally predicts
the next source map (RED-Net) and the next observation.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb
from typing import Sequence

import torch
import torch.nn as nn

from .fields import DTYPE, BoundaryRule, ShapeError, stack_shift_insert, weighted_collapse, zero_stack
from .pde import CHANNELS, DEFAULT_BOUNDARY, PARAM_NAME, TEMPORAL_ORDER, PdeKind, rhs


def temporal_coeffs(m: int) -> list[float]:
    """Coefficients of the past maps in the m-th order backward difference: (-1)^(p+1) C(m, p)."""
    if m < 1:
        raise ValueError(f"temporal order must be >= 1, got {m}")
    return [float((-1) ** (p + 1) * comb(m, p)) for p in range(1, m + 1)]


def homogeneous_update(kind, boundary, c_u: Sequence[torch.Tensor], theta: torch.Tensor) -> torch.Tensor:
    """H = sum_p w_hc[p] c_u[p] + f(c_u[0]; theta).  Shared by the simulator and the cell."""
    return weighted_collapse(c_u, temporal_coeffs(len(c_u))) + rhs(kind, boundary, c_u[0], theta)


@dataclass(frozen=True)
class CellState:
    c_u: tuple  # n most recent inputs, newest first
    c_v: tuple  # K most recent source estimates, newest first
    h_prev: torch.Tensor | None  # homogeneous solution computed from c_u
    t: int = 0


class PhysicsCell(nn.Module):
    """Shared plumbing for models built on the homogeneous PDE step."""

    has_source = False

    def __init__(self, kind, theta_init: float, boundary=None):
        super().__init__()
        self.kind = PdeKind(kind)
        self.boundary = BoundaryRule(boundary) if boundary is not None else DEFAULT_BOUNDARY[self.kind]
        self.n = TEMPORAL_ORDER[self.kind]
        self.channels = CHANNELS[self.kind]
        self.theta = nn.Parameter(torch.tensor(float(theta_init), dtype=DTYPE))

    @property
    def param_name(self) -> str:
        return PARAM_NAME[self.kind]

    def homogeneous_step(self, c_u) -> torch.Tensor:
        return homogeneous_update(self.kind, self.boundary, c_u, self.theta)

    def clamp_physics(self):
        with torch.no_grad():
            self.theta.clamp_(min=0.0)

    def physics_parameters(self) -> list[nn.Parameter]:
        return [self.theta]

    def data_parameters(self) -> list[nn.Parameter]:
        return [p for name, p in self.named_parameters() if name != "theta"]

    @property
    def warmup_frames(self) -> int:
        raise NotImplementedError


class PhICNet(PhysicsCell):
    has_source = True

    def __init__(self, kind, K: int, rednet, theta_init: float, boundary=None):
        super().__init__(kind, theta_init, boundary)
        if K < 1:
            raise ValueError("K must be >= 1")
        if rednet.plan.depth != K or rednet.plan.field_channels != self.channels:
            raise ShapeError(
                "rednet plan (depth, field channels)", (K, self.channels),
                (rednet.plan.depth, rednet.plan.field_channels),
            )
        self.K = K
        self.rednet = rednet

    @property
    def warmup_frames(self) -> int:
        return self.n + self.K

    def estimate_source(self, state: CellState, u_in: torch.Tensor) -> torch.Tensor:
        if state.h_prev is None:
            raise ValueError("estimate_source needs a homogeneous solution from the previous step")
        if state.h_prev.shape != u_in.shape:
            raise ShapeError("estimate_source input", state.h_prev.shape, u_in.shape)
        return u_in - state.h_prev

    def ingest(self, state: CellState, u_in: torch.Tensor) -> CellState:
        v = self.estimate_source(state, u_in)
        c_u = stack_shift_insert(state.c_u, u_in)
        c_v = stack_shift_insert(state.c_v, v)
        return CellState(c_u, c_v, self.homogeneous_step(c_u), state.t + 1)

    def predict(self, state: CellState) -> tuple[torch.Tensor, torch.Tensor]:
        """(U_hat_{t+1}, V_hat_{t+1}) from a warmed-up state."""
        v_hat = self.rednet(state.c_v)
        return state.h_prev + v_hat, v_hat

    def cell_step(self, state: CellState, u_in: torch.Tensor):
        state = self.ingest(state, u_in)
        u_hat, v_hat = self.predict(state)
        return state, u_hat, v_hat

    def warmup(self, frames: Sequence[torch.Tensor]) -> CellState:
        """Replay the first n+K observed maps; the first n only fill ``c_u``."""
        if len(frames) != self.warmup_frames:
            raise ValueError(f"warmup needs exactly {self.warmup_frames} frames, got {len(frames)}")
        c_u = zero_stack(self.n, frames[0])
        for u in frames[: self.n]:
            c_u = stack_shift_insert(c_u, u)
        state = CellState(c_u, zero_stack(self.K, frames[0]), self.homogeneous_step(c_u), self.n)
        for u in frames[self.n :]:
            state = self.ingest(state, u)
        return state


def build_phicnet(kind, K: int, theta_init: float, channels=(16, 32), kernel: int = 3,
                  strides=None, seed: int = 0, boundary=None) -> PhICNet:
    from .rednet import RedNet, RedNetPlan

    kind = PdeKind(kind)
    plan = RedNetPlan(K, CHANNELS[kind], tuple(channels), kernel, strides)
    net = RedNet(plan, w_init=temporal_coeffs(K), seed=seed)
    return PhICNet(kind, K, net, theta_init, boundary)

