"""Online re-fitting of the physical parameter with the source model frozen.

Each incoming observation is compared with the teacher-forced one-step
prediction.  When the relative error exceeds ``e_th`` the physical scalar is
re-tuned by gradient descent on the prediction error over the most recent
``window`` frames; RED-Net and ``w_vc`` never change.  The cell state is then
rebuilt from the stored observations under the new parameter.

The refit loss is closed-loop by default.  Under teacher forcing the source
estimate soaks up most of a parameter error, leaving the loss nearly flat.
For the same reason one trigger keeps the refit running for a full window,
so the last refits see only frames produced after the change.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import torch

from .training import CLOSED_LOOP, TEACHER_FORCED, loss_terms


@dataclass
class AdaptConfig:
    e_th: float = 0.02
    inner_steps: int = 20
    inner_lr: float = 0.05  # first step moves theta by this fraction of its value
    window: int | None = None  # default n + K + 4
    refit_regime: str = CLOSED_LOOP

    def __post_init__(self):
        if not self.e_th > 0:
            raise ValueError("e_th must be positive")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.refit_regime not in (CLOSED_LOOP, TEACHER_FORCED):
            raise ValueError(f"unknown refit regime {self.refit_regime!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class TraceRow:
    step: int
    error: float
    triggered: bool
    theta_estimate: float
    theta_true: float | None = None


def relative_mse(u: torch.Tensor, u_hat: torch.Tensor) -> float:
    den = (u * u).sum().item()
    num = ((u - u_hat) ** 2).sum().item()
    return math.inf if den == 0 and num > 0 else (0.0 if den == 0 else num / den)


class OnlineAdapter:
    """Strictly sequential adaptation session owning ``model``."""

    def __init__(self, model, cfg: AdaptConfig):
        self.model = model
        self.cfg = cfg
        self.window = cfg.window or model.warmup_frames + 4
        if self.window < model.warmup_frames + 1:
            raise ValueError(f"window must hold at least {model.warmup_frames + 1} frames")
        self.history: list[torch.Tensor] = []
        self.state = None
        self.t = 0
        self._hold = 0

    def start(self, frames) -> None:
        """Warm up on the first n+K observations (each (C, X, Y))."""
        self.history = [f.unsqueeze(0) for f in frames]
        self.state = self._rebuild()
        self.t = len(frames)

    def _rebuild(self):
        W = self.model.warmup_frames
        recent = self.history[-W:]
        with torch.no_grad():
            return self.model.warmup(recent)

    def _window_loss(self, frames: torch.Tensor) -> torch.Tensor:
        (l_pred, _, _), _ = loss_terms(self.model, frames, self.cfg.refit_regime)
        return l_pred

    def refit(self) -> bool:
        """Gradient descent on theta over the recent window, with backtracking."""
        frames = torch.stack(self.history[-self.window :], dim=1)
        if frames.shape[1] < self.model.warmup_frames + 1:
            return False
        theta = self.model.theta
        frozen = [p.requires_grad for p in self.model.data_parameters()]
        for p in self.model.data_parameters():
            p.requires_grad_(False)
        start = theta.detach().clone()
        rate = None  # fresh per trigger so a failed search cannot stall later ones
        try:
            for _ in range(self.cfg.inner_steps):
                theta.grad = None
                loss = self._window_loss(frames)
                if not torch.isfinite(loss):
                    raise FloatingPointError
                (g,) = torch.autograd.grad(loss, [theta])
                g = g.item()
                if g == 0.0:
                    break
                if rate is None:
                    rate = self.cfg.inner_lr * max(abs(theta.item()), 1e-3) / abs(g)
                accepted = False
                for _ in range(30):
                    cand = max(theta.item() - rate * g, 0.0)
                    with torch.no_grad():
                        old = theta.item()
                        theta.fill_(cand)
                        new_loss = self._window_loss(frames).item()
                        if math.isfinite(new_loss) and new_loss < loss.item():
                            accepted = True
                            break
                        theta.fill_(old)
                    rate *= 0.5
                if not accepted:
                    break
                rate *= 2.0
        except FloatingPointError:
            with torch.no_grad():
                theta.copy_(start)
            return False
        finally:
            for p, r in zip(self.model.data_parameters(), frozen):
                p.requires_grad_(r)
        return True

    def adapt_step(self, u_observed: torch.Tensor) -> TraceRow:
        with torch.no_grad():
            u_hat, _ = self.model.predict(self.state)
        u = u_observed.unsqueeze(0)
        err = relative_mse(u, u_hat)
        self.history.append(u)
        self.history = self.history[-max(self.window, self.model.warmup_frames) :]
        if err > self.cfg.e_th:
            # keep refitting until the window holds only post-trigger frames
            self._hold = self.window
        triggered = self._hold > 0
        self._hold = max(self._hold - 1, 0)
        if triggered and self.refit():
            self.state = self._rebuild()
        else:
            with torch.no_grad():
                self.state = self.model.ingest(self.state, u)
        row = TraceRow(self.t, err, triggered, self.model.theta.item())
        self.t += 1
        return row


def run_session(model, stream: torch.Tensor, cfg: AdaptConfig, theta_true=None) -> list[TraceRow]:
    """Adapt over a (T+1, C, X, Y) observation stream; ``theta_true[t]`` is logged when given.

    ``theta_true[t]`` is the parameter that produced frame t from frame t-1.
    """
    ad = OnlineAdapter(model, cfg)
    W = model.warmup_frames
    ad.start([stream[i] for i in range(W)])
    rows = []
    for t in range(W, stream.shape[0]):
        row = ad.adapt_step(stream[t])
        if theta_true is not None:
            row.theta_true = float(theta_true[t - 1])
        rows.append(row)
    return rows


def write_trace(rows: list[TraceRow], path: str | Path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "error", "triggered", "theta_estimate", "theta_true"])
        for r in rows:
            w.writerow([r.step, r.error, int(r.triggered), r.theta_estimate,
                        "" if r.theta_true is None else r.theta_true])
