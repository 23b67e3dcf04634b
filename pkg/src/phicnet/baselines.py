"""Comparison models: PDE-RNN with a corrective CNN, and a RED-Net on raw observations."""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .cell import CellState, PhysicsCell
from .fields import DTYPE, ShapeError, stack_shift_insert, zero_stack
from .pde import CHANNELS, TEMPORAL_ORDER, PdeKind
from .rednet import RedNet, RedNetPlan


class PlainCNN(nn.Module):
    """Stride-1 conv stack with ReLU between layers; last layer starts at zero."""

    def __init__(self, in_channels: int, out_channels: int, width: int = 32, layers: int = 4,
                 kernel: int = 3, seed: int = 0):
        super().__init__()
        chans = [in_channels] + [width] * (layers - 1) + [out_channels]
        self.layers = nn.ModuleList(
            nn.Conv2d(a, b, kernel, padding=kernel // 2) for a, b in zip(chans[:-1], chans[1:])
        )
        self.to(DTYPE)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for layer in self.layers:
                bound = 1.0 / math.sqrt(layer.weight[0].numel())
                layer.weight.uniform_(-bound, bound, generator=gen)
                layer.bias.uniform_(-bound, bound, generator=gen)
            self.layers[-1].weight.zero_()
            self.layers[-1].bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        for layer in self.layers[:-1]:
            x = F.relu(layer(x))
        x = self.layers[-1](x)
        return x.squeeze(0) if squeeze else x


class PdeRnnCnn(PhysicsCell):
    """U_hat_{t+1} = H_t + cnn(C_t); the corrective term doubles as the implied source."""

    def __init__(self, kind, K: int, theta_init: float, width: int = 32, layers: int = 4,
                 seed: int = 0, boundary=None):
        super().__init__(kind, theta_init, boundary)
        self.K = K
        self.cnn = PlainCNN(self.n * self.channels, self.channels, width, layers, seed=seed)

    @property
    def warmup_frames(self) -> int:
        return self.n + self.K

    def ingest(self, state: CellState, u_in: torch.Tensor) -> CellState:
        c_u = stack_shift_insert(state.c_u, u_in)
        return CellState(c_u, (), self.homogeneous_step(c_u), state.t + 1)

    def predict(self, state: CellState):
        corr = self.cnn(torch.cat(list(state.c_u), dim=-3))
        return state.h_prev + corr, corr

    def pde_rnn_cnn_step(self, state: CellState, u_in: torch.Tensor):
        state = self.ingest(state, u_in)
        return state, self.predict(state)[0]

    def warmup(self, frames: Sequence[torch.Tensor]) -> CellState:
        if len(frames) != self.warmup_frames:
            raise ValueError(f"warmup needs exactly {self.warmup_frames} frames, got {len(frames)}")
        c_u = zero_stack(self.n, frames[0])
        for u in frames[: self.n]:
            c_u = stack_shift_insert(c_u, u)
        state = CellState(c_u, (), self.homogeneous_step(c_u), self.n)
        for u in frames[self.n :]:
            state = self.ingest(state, u)
        return state


class RedNetFull(nn.Module):
    """Pure data-driven forecaster over the last n+K observation maps."""

    has_source = False

    def __init__(self, kind, K: int, channels=(16, 32), kernel: int = 3, strides=None, seed: int = 0):
        super().__init__()
        self.kind = PdeKind(kind)
        self.n = TEMPORAL_ORDER[self.kind]
        self.K = K
        self.channels = CHANNELS[self.kind]
        depth = self.n + K
        plan = RedNetPlan(depth, self.channels, tuple(channels), kernel, strides)
        self.rednet = RedNet(plan, w_init=[1.0] + [0.0] * (depth - 1), seed=seed)

    @property
    def warmup_frames(self) -> int:
        return self.n + self.K

    def clamp_physics(self):
        pass

    def physics_parameters(self):
        return []

    def data_parameters(self):
        return list(self.parameters())

    def warmup(self, frames: Sequence[torch.Tensor]) -> CellState:
        if len(frames) != self.warmup_frames:
            raise ValueError(f"warmup needs exactly {self.warmup_frames} frames, got {len(frames)}")
        return CellState(tuple(reversed(list(frames))), (), None, len(frames))

    def ingest(self, state: CellState, u_in: torch.Tensor) -> CellState:
        return CellState(stack_shift_insert(state.c_u, u_in), (), None, state.t + 1)

    def predict(self, state: CellState):
        return self.rednet(state.c_u), None

    def rednet_full_forward(self, window: Sequence[torch.Tensor]) -> torch.Tensor:
        """One-step prediction from a window given oldest-first."""
        if len(window) != self.warmup_frames:
            raise ShapeError("rednet_full window length", (self.warmup_frames,), (len(window),))
        return self.rednet(tuple(reversed(list(window))))


def parameter_count(module: nn.Module, exclude_physics: bool = True) -> int:
    params = module.data_parameters() if exclude_physics else list(module.parameters())
    return sum(p.numel() for p in params)
