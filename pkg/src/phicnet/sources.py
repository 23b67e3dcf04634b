"""Hidden source processes driving the simulated systems.

Each process owns a small state (block values, oscillator positions,
orbit phases), advances it by one unit step and rasterizes it to a source
field of shape (C, X, Y).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
import torch

from .fields import D01, D10, DTYPE, BoundaryRule, stencil_apply


@dataclass
class DiffusingBlocks:
    """Piecewise-constant block map whose blocks diffuse into their 4-neighbours."""

    blocks: int = 4
    gamma: float = 0.02
    value_range: tuple[float, float] = (0.0, 1.0)
    kind: str = field(default="diffusing_blocks", init=False)

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        lo, hi = self.value_range
        return rng.uniform(lo, hi, size=(self.blocks, self.blocks))

    def advance(self, b: np.ndarray) -> np.ndarray:
        # no-flux at the outer block boundary keeps the coupling symmetric
        p = np.pad(b, 1, mode="edge")
        nbr = p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4.0 * b
        return b + self.gamma * nbr

    def rasterize(self, b: np.ndarray, shape: tuple[int, int]) -> torch.Tensor:
        X, Y = shape
        if X % self.blocks or Y % self.blocks:
            raise ValueError(f"grid {shape} not divisible into {self.blocks}x{self.blocks} blocks")
        m = np.kron(b, np.ones((X // self.blocks, Y // self.blocks)))
        return torch.as_tensor(m[None], dtype=DTYPE)


@dataclass
class CoupledOscillators:
    """Two point-like oscillators joined by a linear spring.

    Each oscillator displacement x_i obeys x_i'' = -omega2 x_i - coupling (x_i - x_j),
    integrated with the symplectic Euler step (velocity first).  The source
    map is the sum of x_i times a small Gaussian footprint at location i.
    """

    omega2: float = 0.15
    coupling: float = 0.02
    amplitude_range: tuple[float, float] = (0.5, 1.0)
    footprint_sigma: float = 0.8
    footprint_radius: int = 2
    margin: int = 3
    kind: str = field(default="coupled_oscillators", init=False)

    def initial_state(self, rng: np.random.Generator, shape: tuple[int, int]) -> dict[str, Any]:
        X, Y = shape
        m = min(self.margin, X // 4, Y // 4)
        locs = np.stack([rng.integers(m, X - m, size=2), rng.integers(m, Y - m, size=2)], axis=1)
        amp = rng.uniform(*self.amplitude_range, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi, size=2)
        w = np.sqrt(self.omega2)
        return {
            "locs": locs.astype(float),
            "x": amp * np.cos(phase),
            "xdot": -amp * w * np.sin(phase),
        }

    def advance(self, s: dict[str, Any]) -> dict[str, Any]:
        x, xdot = s["x"], s["xdot"]
        acc = -self.omega2 * x - self.coupling * (x - x[::-1])
        xdot = xdot + acc
        return {**s, "x": x + xdot, "xdot": xdot}

    def footprints(self, locs: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
        X, Y = shape
        rr, cc = np.mgrid[0:X, 0:Y]
        out = []
        for r0, c0 in locs:
            d2 = (rr - r0) ** 2 + (cc - c0) ** 2
            g = np.exp(-d2 / (2.0 * self.footprint_sigma**2))
            g[d2 > self.footprint_radius**2] = 0.0
            out.append(g)
        return np.stack(out)

    def rasterize(self, s: dict[str, Any], shape: tuple[int, int]) -> torch.Tensor:
        fp = self.footprints(s["locs"], shape)
        m = s["x"][0] * fp[0] + s["x"][1] * fp[1]
        return torch.as_tensor(m[None], dtype=DTYPE)


@dataclass
class OrbitingPressure:
    """A high and a low Gaussian pressure zone circling in opposite directions.

    The source is the negative pressure gradient, one channel per direction.
    """

    peak_range: tuple[float, float] = (0.01, 0.03)
    spread_range: tuple[float, float] = (1.5, 2.5)
    radius_range: tuple[float, float] = (1.0, 3.0)
    rate_range: tuple[float, float] = (0.05, 0.15)
    boundary: BoundaryRule = BoundaryRule.NEUMANN_REPLICATE
    kind: str = field(default="orbiting_pressure", init=False)

    def initial_state(self, rng: np.random.Generator, shape: tuple[int, int]) -> dict[str, Any]:
        X, Y = shape
        lo_r, hi_r = 0.3 * X, 0.7 * X
        lo_c, hi_c = 0.3 * Y, 0.7 * Y
        centers = np.stack([rng.uniform(lo_r, hi_r, 2), rng.uniform(lo_c, hi_c, 2)], axis=1)
        peaks = rng.uniform(*self.peak_range, size=2) * np.array([1.0, -1.0])
        return {
            "centers": centers,
            "peaks": peaks,
            "spreads": rng.uniform(*self.spread_range, size=2),
            "radii": rng.uniform(*self.radius_range, size=2),
            # high zone clockwise, low zone counter-clockwise
            "rates": rng.uniform(*self.rate_range, size=2) * np.array([-1.0, 1.0]),
            "phase": rng.uniform(0.0, 2.0 * np.pi, size=2),
        }

    def advance(self, s: dict[str, Any]) -> dict[str, Any]:
        return {**s, "phase": s["phase"] + s["rates"]}

    def pressure(self, s: dict[str, Any], shape: tuple[int, int]) -> np.ndarray:
        X, Y = shape
        rr, cc = np.mgrid[0:X, 0:Y]
        P = np.zeros(shape)
        for i in range(2):
            r0 = s["centers"][i, 0] + s["radii"][i] * np.sin(s["phase"][i])
            c0 = s["centers"][i, 1] + s["radii"][i] * np.cos(s["phase"][i])
            d2 = (rr - r0) ** 2 + (cc - c0) ** 2
            P += s["peaks"][i] * np.exp(-d2 / (2.0 * s["spreads"][i] ** 2))
        return P

    def rasterize(self, s: dict[str, Any], shape: tuple[int, int]) -> torch.Tensor:
        P = torch.as_tensor(self.pressure(s, shape)[None], dtype=DTYPE)
        return -torch.cat([stencil_apply(P, D10, self.boundary), stencil_apply(P, D01, self.boundary)])


class ZeroSource:
    kind = "zero"

    def __init__(self, channels: int = 1):
        self.channels = channels

    def initial_state(self, rng, shape=None):
        return None

    def advance(self, s):
        return s

    def rasterize(self, s, shape):
        return torch.zeros(self.channels, *shape, dtype=DTYPE)


class Impulse:
    """A fixed field applied at the first step only, zero afterwards."""

    kind = "impulse"

    def __init__(self, field: torch.Tensor):
        self.field = torch.as_tensor(field, dtype=DTYPE)

    def initial_state(self, rng=None, shape=None):
        return 0

    def advance(self, s):
        return s + 1

    def rasterize(self, s, shape):
        return self.field.clone() if s == 0 else torch.zeros_like(self.field)


def _init(proc, rng, shape):
    if isinstance(proc, DiffusingBlocks):
        return proc.initial_state(rng)
    return proc.initial_state(rng, shape)


def step_sources(proc, state, shape: tuple[int, int]):
    """Advance ``state`` by one unit step and return ``(state', v_map)``."""
    state = proc.advance(state)
    return state, proc.rasterize(state, shape)


def make_source(kind: str, **params):
    table = {
        "diffusing_blocks": DiffusingBlocks,
        "coupled_oscillators": CoupledOscillators,
        "orbiting_pressure": OrbitingPressure,
    }
    if kind == "zero":
        return ZeroSource(**params)
    try:
        return table[kind](**params)
    except KeyError:
        raise ValueError(f"unknown source kind {kind!r}") from None


def initial_state(proc, rng: np.random.Generator, shape: tuple[int, int]):
    return _init(proc, rng, shape)
