"""Field arithmetic on dense 2-D grids.

A field is a float64 tensor whose last two axes are the grid (rows, cols).
Leading axes are channels and optionally a batch axis; every stencil
operation acts on each leading slice independently.

Stencils are applied as correlations (no kernel flip).  The second array
axis (columns) is the ``x`` direction, matching the printed orientation of
the second-difference kernels, so ``D20`` carries its taps in the middle row.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64


class ShapeError(ValueError):
    """Raised when two fields (or a field and a kernel) have incompatible shapes."""

    def __init__(self, what: str, expected, got):
        self.expected = tuple(expected) if expected is not None else None
        self.got = tuple(got) if got is not None else None
        super().__init__(f"{what}: expected shape {self.expected}, got {self.got}")


class BoundaryRule(str, Enum):
    DIRICHLET_ZERO = "dirichlet_zero"
    NEUMANN_REPLICATE = "neumann_replicate"


@dataclass(frozen=True)
class StencilKernel:
    taps: np.ndarray = field(compare=False)
    order_x: int = 0
    order_y: int = 0
    name: str = ""

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.ndim != 2 or taps.shape[0] % 2 == 0 or taps.shape[1] % 2 == 0:
            raise ValueError(f"stencil taps must be an odd-sized matrix, got {taps.shape}")
        taps.setflags(write=False)
        object.__setattr__(self, "taps", taps)

    @property
    def rows(self) -> int:
        return self.taps.shape[0]

    @property
    def cols(self) -> int:
        return self.taps.shape[1]

    def nonzero_taps(self):
        return [(i, j, float(self.taps[i, j])) for i, j in zip(*np.nonzero(self.taps))]


D20 = StencilKernel(np.array([[0, 0, 0], [1, -2, 1], [0, 0, 0]]), 2, 0, "D20")
D02 = StencilKernel(np.array([[0, 1, 0], [0, -2, 0], [0, 1, 0]]), 0, 2, "D02")
D10 = StencilKernel(np.array([[0, 0, 0], [-0.5, 0, 0.5], [0, 0, 0]]), 1, 0, "D10")
D01 = StencilKernel(np.array([[0, -0.5, 0], [0, 0, 0], [0, 0.5, 0]]), 0, 1, "D01")


def as_field(values) -> torch.Tensor:
    return torch.as_tensor(values, dtype=DTYPE)


def _pad(f: torch.Tensor, pr: int, pc: int, boundary: BoundaryRule) -> torch.Tensor:
    if boundary == BoundaryRule.DIRICHLET_ZERO:
        return F.pad(f, (pc, pc, pr, pr))
    lead = f.shape[:-2]
    flat = f.reshape(-1, 1, *f.shape[-2:])
    out = F.pad(flat, (pc, pc, pr, pr), mode="replicate")
    return out.reshape(*lead, *out.shape[-2:])


def stencil_apply(f: torch.Tensor, k: StencilKernel, boundary: BoundaryRule) -> torch.Tensor:
    """Correlate ``k`` with ``f`` over the halo-padded grid; output has f's shape."""
    boundary = BoundaryRule(boundary)
    if f.dim() < 2:
        raise ShapeError("stencil_apply field", ("...", k.rows, k.cols), f.shape)
    X, Y = f.shape[-2:]
    if k.rows > X or k.cols > Y:
        raise ShapeError("stencil kernel larger than grid", (k.rows, k.cols), (X, Y))
    pr, pc = k.rows // 2, k.cols // 2
    p = _pad(f, pr, pc, boundary)
    out = None
    for i, j, w in k.nonzero_taps():
        term = w * p[..., i : i + X, j : j + Y]
        out = term if out is None else out + term
    if out is None:
        out = torch.zeros_like(f)
    return out


def stencil_adjoint(g: torch.Tensor, k: StencilKernel, boundary: BoundaryRule) -> torch.Tensor:
    """Transpose of :func:`stencil_apply` (as a linear map of the field)."""
    boundary = BoundaryRule(boundary)
    X, Y = g.shape[-2:]
    pr, pc = k.rows // 2, k.cols // 2
    acc = g.new_zeros(*g.shape[:-2], X + 2 * pr, Y + 2 * pc)
    for i, j, w in k.nonzero_taps():
        acc[..., i : i + X, j : j + Y] += w * g
    if boundary == BoundaryRule.DIRICHLET_ZERO:
        return acc[..., pr : pr + X, pc : pc + Y].clone()
    # replicate padding clamps halo indices onto the edge; fold them back
    rows = acc[..., pr : pr + X, :].clone()
    if pr:
        rows[..., 0, :] += acc[..., :pr, :].sum(dim=-2)
        rows[..., -1, :] += acc[..., pr + X :, :].sum(dim=-2)
    out = rows[..., pc : pc + Y].clone()
    if pc:
        out[..., 0] += rows[..., :pc].sum(dim=-1)
        out[..., -1] += rows[..., pc + Y :].sum(dim=-1)
    return out


FieldStack = tuple  # tuple[torch.Tensor, ...], newest entry first


def zero_stack(depth: int, like: torch.Tensor) -> FieldStack:
    if depth < 1:
        raise ValueError(f"stack depth must be >= 1, got {depth}")
    return tuple(torch.zeros_like(like) for _ in range(depth))


def stack_shift_insert(stack: Sequence[torch.Tensor], newest: torch.Tensor) -> FieldStack:
    """Push ``newest`` on the front and drop the oldest entry."""
    if stack and tuple(stack[0].shape) != tuple(newest.shape):
        raise ShapeError("stack_shift_insert", stack[0].shape, newest.shape)
    return (newest, *tuple(stack)[: len(stack) - 1])


def weighted_collapse(stack: Sequence[torch.Tensor], w) -> torch.Tensor:
    """Pointwise sum_p w[p] * stack[p]."""
    if len(w) != len(stack):
        raise ShapeError("weighted_collapse coefficients", (len(stack),), (len(w),))
    out = w[0] * stack[0]
    for p in range(1, len(stack)):
        out = out + w[p] * stack[p]
    return out
