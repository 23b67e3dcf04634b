"""Residual encoder-decoder g(.) for the source dynamics.

Encoder block m:  x_m = relu(conv_m2(relu(conv_m1(x_{m-1}))))
Decoder block m>1: y_m = relu(tconv_m2(relu(tconv_m1(y_{m+1}))) + x_{m-1}),  y_{M+1} = x_M
Output:            y_1 = tconv_12(relu(tconv_11(y_2))) + sum_p w_vc[p] * stack[p]

The input stack (K fields of C channels, newest first) is concatenated along
the channel axis to form x_0.  The first layer of each encoder block carries
the block's stride; the decoder mirrors it in its second layer.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .fields import DTYPE, ShapeError, weighted_collapse


@dataclass(frozen=True)
class RedNetPlan:
    depth: int  # K: number of stacked fields
    field_channels: int  # C
    channels: tuple[int, ...] = (16, 32)  # one entry per block, M = len(channels)
    kernel: int = 3
    strides: tuple[int, ...] | None = None  # per block; default all 2

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        s = (2,) * len(self.channels) if self.strides is None else tuple(int(x) for x in self.strides)
        if len(s) != len(self.channels):
            raise ValueError("strides and channels must have one entry per block")
        object.__setattr__(self, "strides", s)
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")

    @property
    def blocks(self) -> int:
        return len(self.channels)

    @property
    def in_channels(self) -> int:
        return self.depth * self.field_channels

    def downsampling(self) -> int:
        return math.prod(self.strides)

    def check_grid(self, shape: tuple[int, int]):
        f = self.downsampling()
        if shape[0] % f or shape[1] % f:
            raise ShapeError(f"grid must be divisible by {f}", ("k*%d" % f, "k*%d" % f), shape)

    def to_dict(self) -> dict:
        return asdict(self)


class RedNet(nn.Module):
    def __init__(self, plan: RedNetPlan, w_init: Sequence[float] | None = None, seed: int | None = None):
        super().__init__()
        self.plan = plan
        k, pad = plan.kernel, plan.kernel // 2
        chans = (plan.in_channels,) + plan.channels
        self.enc = nn.ModuleList()
        self.dec = nn.ModuleList()
        for m in range(plan.blocks):
            s = plan.strides[m]
            self.enc.append(
                nn.ModuleList(
                    [
                        nn.Conv2d(chans[m], chans[m + 1], k, stride=s, padding=pad),
                        nn.Conv2d(chans[m + 1], chans[m + 1], k, stride=1, padding=pad),
                    ]
                )
            )
            out = plan.field_channels if m == 0 else chans[m]
            self.dec.append(
                nn.ModuleList(
                    [
                        nn.ConvTranspose2d(chans[m + 1], chans[m + 1], k, stride=1, padding=pad),
                        nn.ConvTranspose2d(
                            chans[m + 1], out, k, stride=s, padding=pad, output_padding=s - 1
                        ),
                    ]
                )
            )
        w = [1.0] + [0.0] * (plan.depth - 1) if w_init is None else list(w_init)
        if len(w) != plan.depth:
            raise ValueError(f"w_vc needs {plan.depth} entries, got {len(w)}")
        self.w_vc = nn.Parameter(torch.tensor(w, dtype=DTYPE))
        self.to(DTYPE)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int | None = None, zero_final: bool = True, scale: float = 1.0):
        """Uniform fan-in init; the final decoder layer starts at zero unless told otherwise."""
        gen = torch.Generator().manual_seed(0 if seed is None else seed)
        with torch.no_grad():
            for layer in self.conv_layers():
                fan_in = layer.weight.shape[1] * layer.weight.shape[2] * layer.weight.shape[3]
                if isinstance(layer, nn.ConvTranspose2d):
                    fan_in = layer.weight.shape[0] * layer.weight.shape[2] * layer.weight.shape[3]
                bound = scale / math.sqrt(fan_in)
                layer.weight.copy_(torch.empty_like(layer.weight).uniform_(-bound, bound, generator=gen))
                layer.bias.copy_(torch.empty_like(layer.bias).uniform_(-bound, bound, generator=gen))
            if zero_final:
                self.dec[0][1].weight.zero_()
                self.dec[0][1].bias.zero_()

    def conv_layers(self) -> list[nn.Module]:
        return [l for blk in self.enc for l in blk] + [l for blk in reversed(self.dec) for l in blk]

    def named_groups(self) -> list[tuple[str, torch.Tensor]]:
        """Trainable tensors in checkpoint order: w_vc, encoder, decoder weights, then biases."""
        groups = [("w_vc", self.w_vc)]
        enc = [(f"enc{m + 1}.{j + 1}", l) for m, blk in enumerate(self.enc) for j, l in enumerate(blk)]
        dec = [
            (f"dec{m + 1}.{j + 1}", self.dec[m][j])
            for m in reversed(range(self.plan.blocks))
            for j in range(2)
        ]
        groups += [(f"{n}.weight", l.weight) for n, l in enc + dec]
        groups += [(f"{n}.bias", l.bias) for n, l in enc + dec]
        return groups

    def residual(self, x0: torch.Tensor) -> torch.Tensor:
        """The learned branch g(stack), without the w_vc identity path."""
        feats = [x0]
        x = x0
        for c1, c2 in self.enc:
            x = F.relu(c2(F.relu(c1(x))))
            feats.append(x)
        y = feats[-1]
        for m in reversed(range(1, self.plan.blocks)):
            t1, t2 = self.dec[m]
            y = F.relu(t2(F.relu(t1(y))) + feats[m])
        t1, t2 = self.dec[0]
        return t2(F.relu(t1(y)))

    def forward(self, stack: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(stack) != self.plan.depth:
            raise ShapeError("rednet input depth", (self.plan.depth,), (len(stack),))
        x0 = torch.cat(list(stack), dim=-3)
        squeeze = x0.dim() == 3
        if squeeze:
            x0 = x0.unsqueeze(0)
        if x0.shape[-3] != self.plan.in_channels:
            raise ShapeError("rednet input channels", (self.plan.in_channels,), (x0.shape[-3],))
        self.plan.check_grid(tuple(x0.shape[-2:]))
        out = self.residual(x0)
        if squeeze:
            out = out.squeeze(0)
        return out + weighted_collapse(stack, self.w_vc)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def rednet_forward(net: RedNet, c_v: Sequence[torch.Tensor]) -> torch.Tensor:
    return net(c_v)


def rednet_backward(net: RedNet, c_v: Sequence[torch.Tensor], upstream: torch.Tensor):
    """Vector-Jacobian product: returns (dL/dc_v per entry, {param name: dL/dparam})."""
    inputs = [c.detach().clone().requires_grad_(True) for c in c_v]
    out = net(inputs)
    if out.shape != upstream.shape:
        raise ShapeError("rednet_backward upstream", out.shape, upstream.shape)
    names, params = zip(*net.named_groups())
    grads = torch.autograd.grad(out, inputs + list(params), upstream, allow_unused=True)
    d_in = tuple(g if g is not None else torch.zeros_like(x) for g, x in zip(grads[: len(inputs)], inputs))
    d_par = {
        n: (g if g is not None else torch.zeros_like(p))
        for n, g, p in zip(names, grads[len(inputs):], params)
    }
    return d_in, d_par
