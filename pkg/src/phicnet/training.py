"""Rollouts, losses, BPTT training, checkpoints and finite-difference gradient checks."""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .baselines import PdeRnnCnn, RedNetFull
from .cell import PhICNet, build_phicnet
from .fields import DTYPE

log = logging.getLogger(__name__)

CLOSED_LOOP = "closed_loop"
TEACHER_FORCED = "teacher_forced"


class NonFiniteGradient(FloatingPointError):
    def __init__(self, step: int | None, group: str | None):
        self.step, self.group = step, group
        super().__init__(f"non-finite gradient (first offending rollout step {step}, group {group})")


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, result: "TrainResult"):
        self.epoch, self.result = epoch, result
        super().__init__(f"non-finite loss at epoch {epoch}; best checkpoint retained")


@dataclass
class LossBreakdown:
    l_pred: float
    l_source_pred: float
    l_source_sparse: float
    lam: float

    @property
    def total(self) -> float:
        return self.l_pred + self.l_source_pred + self.lam * self.l_source_sparse


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    optimizer: str = "sgd_momentum"  # or "adaptive"
    momentum: float = 0.9
    lam: float = 1e-3
    regime: str = CLOSED_LOOP
    clip_norm: float | None = 5.0
    seed: int = 0
    scalar_lr: float | None = None  # lr for theta and w_vc; defaults to lr
    train_horizon: int | None = None  # closed-loop steps per training window; None = whole sequence

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.optimizer not in ("sgd_momentum", "adaptive"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.regime not in (CLOSED_LOOP, TEACHER_FORCED):
            raise ValueError(f"unknown rollout regime {self.regime!r}")
        if self.train_horizon is not None and self.train_horizon < 1:
            raise ValueError("train_horizon must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class Rollout:
    u_hat: list  # predictions for frames W..last, each (B, C, X, Y)
    v_hat: list  # predicted sources (None entries for models without one)
    v_est: list  # U_t - H_{t-1} from the observed frame (PhICNet only)
    first: int  # frame index of u_hat[0]


def rollout(model, frames: torch.Tensor, regime: str = CLOSED_LOOP, horizon: int | None = None,
            on_step: Callable | None = None) -> Rollout:
    """Warm up on the first n+K frames, then predict each following frame.

    ``frames`` is (B, T+1, C, X, Y).  In the closed-loop regime the model feeds
    on its own predictions after warmup; teacher forcing feeds observations.
    """
    W = model.warmup_frames
    T = frames.shape[1] - 1
    if T < W - 1:
        raise ValueError(f"sequence of {T + 1} frames is shorter than the {W}-frame warmup")
    last = T if horizon is None else min(T, W - 1 + horizon)
    state = model.warmup([frames[:, i] for i in range(W)])
    out = Rollout([], [], [], W)
    for t in range(W, last + 1):
        u_hat, v_hat = model.predict(state)
        if on_step is not None:
            on_step(t, u_hat)
        out.u_hat.append(u_hat)
        out.v_hat.append(v_hat)
        if model.has_source:
            out.v_est.append(frames[:, t] - state.h_prev)
        if t < last:
            state = model.ingest(state, u_hat if regime == CLOSED_LOOP else frames[:, t])
    return out


def _sq(x: torch.Tensor) -> torch.Tensor:
    return (x * x).flatten(1).sum(dim=1)


def loss_terms(model, frames: torch.Tensor, regime: str = CLOSED_LOOP, on_step=None):
    """Differentiable (l_pred, l_source_pred, l_source_sparse) averaged over steps and sequences."""
    ro = rollout(model, frames, regime, on_step=on_step)
    zero = frames.new_zeros(())
    steps = len(ro.u_hat)
    if steps == 0:
        return (zero, zero, zero), ro
    W = ro.first
    l_pred = sum(_sq(frames[:, W + i] - u) for i, u in enumerate(ro.u_hat)) / steps
    if model.has_source:
        l_src = sum(_sq(v - vh) for v, vh in zip(ro.v_est, ro.v_hat)) / steps
        l_sp = sum(vh.abs().flatten(1).sum(dim=1) for vh in ro.v_hat) / steps
    else:
        l_src = l_sp = frames.new_zeros(frames.shape[0])
    return (l_pred.mean(), l_src.mean(), l_sp.mean()), ro


def windows(frames: torch.Tensor, warmup: int, horizon: int | None) -> torch.Tensor:
    """Cut (B, T+1, ...) sequences into (B*W, warmup+horizon, ...) windows.

    Consecutive windows start ``horizon`` frames apart, so every frame after the
    first warmup is scored exactly once.  A ragged tail shorter than a full
    window is dropped.
    """
    if horizon is None:
        return frames
    span = warmup + horizon
    starts = range(0, frames.shape[1] - span + 1, horizon)
    if not starts:
        return frames
    return torch.cat([frames[:, s : s + span] for s in starts], dim=0)


def rollout_loss(model, frames: torch.Tensor, lam: float = 1e-3, regime: str = CLOSED_LOOP):
    if frames.shape[1] < model.warmup_frames + 1:
        raise ValueError("sequence too short: need at least n+K+1 frames")
    with torch.no_grad():
        (a, b, c), ro = loss_terms(model, frames, regime)
    return LossBreakdown(a.item(), b.item(), c.item(), lam), ro.u_hat, ro.v_hat


def ordered_parameters(model) -> list[tuple[str, nn.Parameter]]:
    """Checkpoint order: physics scalar, w_vc, encoder, decoder, then biases."""
    if isinstance(model, PhICNet):
        return [("theta", model.theta)] + [(f"rednet.{n}", p) for n, p in model.rednet.named_groups()]
    if isinstance(model, RedNetFull):
        return [(f"rednet.{n}", p) for n, p in model.rednet.named_groups()]
    if isinstance(model, PdeRnnCnn):
        layers = model.cnn.layers
        return (
            [("theta", model.theta)]
            + [(f"cnn.{i}.weight", l.weight) for i, l in enumerate(layers)]
            + [(f"cnn.{i}.bias", l.bias) for i, l in enumerate(layers)]
        )
    raise TypeError(f"unsupported model {type(model).__name__}")


def _clip(params, max_norm):
    grads = [p.grad for p in params if p.grad is not None]
    if not grads or max_norm is None:
        return
    total = torch.sqrt(sum((g * g).sum() for g in grads))
    if total > max_norm:
        for g in grads:
            g.mul_(max_norm / total)


def _backward(model, frames, cfg: TrainConfig):
    frames = windows(frames, model.warmup_frames, cfg.train_horizon)
    (a, b, c), _ = loss_terms(model, frames, cfg.regime)
    total = a + b + cfg.lam * c
    if total.requires_grad:
        total.backward()
    return LossBreakdown(a.item(), b.item(), c.item(), cfg.lam)


def _diagnose(model, frames, cfg):
    outs = []

    def keep(t, u):
        if u.requires_grad:
            u.retain_grad()
        outs.append((t, u))

    model.zero_grad()
    (a, b, c), _ = loss_terms(model, frames, cfg.regime, on_step=keep)
    (a + b + cfg.lam * c).backward()
    for t, u in outs:
        if not torch.isfinite(u).all() or (u.grad is not None and not torch.isfinite(u.grad).all()):
            return t
    return None


def bptt_gradients(model, frames: torch.Tensor, cfg: TrainConfig) -> dict[str, torch.Tensor]:
    """Exact reverse accumulation through the unrolled rollout, then global-norm clipping."""
    model.zero_grad()
    _backward(model, frames, cfg)
    params = ordered_parameters(model)
    for name, p in params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NonFiniteGradient(_diagnose(model, frames, cfg), name)
    _clip([p for _, p in params], cfg.clip_norm)
    return {n: (p.grad.clone() if p.grad is not None else torch.zeros_like(p)) for n, p in params}


def _scalar_parameters(model) -> list[nn.Parameter]:
    out = list(model.physics_parameters())
    if isinstance(model, PhICNet):
        out.append(model.rednet.w_vc)
    return out


def make_optimizer(model, cfg: TrainConfig):
    scalars = _scalar_parameters(model)
    ids = {id(p) for p in scalars}
    groups = [
        {"params": scalars, "lr": cfg.scalar_lr or cfg.lr},
        {"params": [p for p in model.parameters() if id(p) not in ids], "lr": cfg.lr},
    ]
    groups = [g for g in groups if g["params"]]
    if cfg.optimizer == "adaptive":
        return torch.optim.Adam(groups, lr=cfg.lr)
    return torch.optim.SGD(groups, lr=cfg.lr, momentum=cfg.momentum)


CURVE_FIELDS = ["epoch", "l_pred", "l_source_pred", "l_source_sparse", "total", "val_total"]


@dataclass
class TrainResult:
    curves: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("inf")
    best_state: dict | None = None

    def write_curves(self, path: str | Path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
            w.writeheader()
            for row in self.curves:
                w.writerow({k: row[k] for k in CURVE_FIELDS})


def train(model, train_frames: torch.Tensor, val_frames: torch.Tensor | None, cfg: TrainConfig,
          log_every: int = 0) -> TrainResult:
    """Full-batch BPTT over all training sequences per epoch; keeps the best-validation weights."""
    torch.manual_seed(cfg.seed)
    opt = make_optimizer(model, cfg)
    params = [p for _, p in ordered_parameters(model)]
    res = TrainResult()
    for epoch in range(cfg.epochs):
        opt.zero_grad()
        lb = _backward(model, train_frames, cfg)
        if not np.isfinite(lb.total) or any(
            p.grad is not None and not torch.isfinite(p.grad).all() for p in params
        ):
            if res.best_state is not None:
                model.load_state_dict(res.best_state)
            raise TrainingDiverged(epoch, res)
        _clip(params, cfg.clip_norm)
        opt.step()
        model.clamp_physics()
        if val_frames is not None and val_frames.shape[0]:
            vw = windows(val_frames, model.warmup_frames, cfg.train_horizon)
            val = rollout_loss(model, vw, cfg.lam, cfg.regime)[0].total
        else:
            val = lb.total
        res.curves.append({**asdict(lb), "epoch": epoch, "total": lb.total, "val_total": val})
        if np.isfinite(val) and val <= res.best_val:
            res.best_val, res.best_epoch = val, epoch
            res.best_state = copy.deepcopy(model.state_dict())
        if log_every and epoch % log_every == 0:
            log.info("epoch %d train %.4g val %.4g theta %s", epoch, lb.total, val,
                     [round(p.item(), 5) for p in model.physics_parameters()])
    if res.best_state is not None:
        model.load_state_dict(res.best_state)
    return res


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_VERSION = 1


def build_model(spec: dict):
    """Construct a model from its serializable description."""
    tag = spec.get("model_tag", "phicnet")
    kind, K = spec["system"], int(spec.get("K", 1))
    seed = int(spec.get("seed", 0))
    if tag == "phicnet":
        return build_phicnet(kind, K, spec.get("theta_init", 0.1), spec.get("channels", (16, 32)),
                             spec.get("kernel", 3), spec.get("strides"), seed)
    if tag == "pde_rnn_cnn":
        return PdeRnnCnn(kind, K, spec.get("theta_init", 0.1), spec.get("width", 32),
                         spec.get("layers", 4), seed)
    if tag == "rednet_full":
        return RedNetFull(kind, K, spec.get("channels", (16, 32)), spec.get("kernel", 3),
                          spec.get("strides"), seed)
    raise ValueError(f"unknown model tag {tag!r}")


def checkpoint_paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    return p.with_name(p.name + ".manifest.json"), p.with_name(p.name + ".params.bin")


def save_checkpoint(model, spec: dict, path: str | Path, extra: dict | None = None):
    mpath, bpath = checkpoint_paths(path)
    mpath.parent.mkdir(parents=True, exist_ok=True)
    params = ordered_parameters(model)
    plan = model.rednet.plan.to_dict() if hasattr(model, "rednet") else None
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "model_tag": spec.get("model_tag", "phicnet"),
        "system": model.kind.value,
        "n": model.n,
        "K": model.K,
        "architecture": plan,
        "spec": spec,
        "optimizer_state": False,
        "byte_order": "little",
        "dtype": "float64",
        "params": [{"name": n, "shape": list(p.shape)} for n, p in params],
        **(extra or {}),
    }
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    blob = np.concatenate([p.detach().numpy().reshape(-1) for _, p in params])
    bpath.write_bytes(blob.astype("<f8").tobytes())
    return mpath, bpath


def load_checkpoint(path: str | Path):
    mpath, bpath = checkpoint_paths(path)
    m = json.loads(mpath.read_text(encoding="utf-8"))
    if m.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {m.get('format_version')}")
    model = build_model(m["spec"])
    raw = np.frombuffer(bpath.read_bytes(), dtype="<f8")
    params = ordered_parameters(model)
    names = [e["name"] for e in m["params"]]
    if names != [n for n, _ in params]:
        raise ValueError("checkpoint parameter order does not match the model")
    offset = 0
    with torch.no_grad():
        for _, p in params:
            k = p.numel()
            p.copy_(torch.from_numpy(raw[offset : offset + k].copy()).reshape(p.shape))
            offset += k
    if offset != raw.size:
        raise ValueError(f"checkpoint blob has {raw.size} values, expected {offset}")
    return model, m


# ---------------------------------------------------------------- gradient checks


def finite_difference_gradients(model, frames, cfg: TrainConfig, eps: float = 1e-5,
                                names: list[str] | None = None) -> dict[str, torch.Tensor]:
    """Central differences of the total loss with respect to every entry of each parameter."""

    frames = windows(frames, model.warmup_frames, cfg.train_horizon)

    def total():
        with torch.no_grad():
            (a, b, c), _ = loss_terms(model, frames, cfg.regime)
            return (a + b + cfg.lam * c).item()

    out = {}
    for name, p in ordered_parameters(model):
        if names is not None and name not in names:
            continue
        g = torch.zeros_like(p)
        flat, gflat = p.data.view(-1), g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = total()
            flat[i] = orig - eps
            down = total()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
        out[name] = g
    return out


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    scale = max(a.norm().item(), b.norm().item())
    return 0.0 if scale == 0 else (a - b).norm().item() / scale


def grad_check_fixture(system: str, seed: int = 0, grid: int = 8, steps: int = 8, K: int | None = None):
    """A randomized small model and a simulated sequence for gradient checks."""
    from .sim import DatasetConfig, build_dataset

    K = K if K is not None else (2 if system == "wave" else 1)
    src = {"heat": {"blocks": 4}, "wave": {"margin": 2}, "burgers": {"peak_range": (0.02, 0.04)}}[system]
    ds = build_dataset(DatasetConfig(system, (grid, grid), steps, {"train": 1}, seed=seed, source=src))
    theta_true = ds.theta
    model = build_phicnet(system, K, theta_true * 0.8, channels=(4, 8), seed=seed)
    model.rednet.reset_parameters(seed=seed + 1, zero_final=False)
    with torch.no_grad():
        g = torch.Generator().manual_seed(seed + 2)
        model.rednet.w_vc.add_(0.1 * torch.randn(model.rednet.w_vc.shape, generator=g, dtype=DTYPE))
    return model, ds.frames("train")


def grad_check(model, frames, cfg: TrainConfig | None = None, eps: float = 1e-5) -> dict[str, float]:
    """Max relative error (norm-wise, per parameter group) between BPTT and central differences."""
    cfg = cfg or TrainConfig(clip_norm=None)
    if cfg.clip_norm is not None:
        cfg = TrainConfig(**{**asdict(cfg), "clip_norm": None})
    analytic = bptt_gradients(model, frames, cfg)
    numeric = finite_difference_gradients(model, frames, cfg, eps)
    return {name: relative_error(analytic[name], numeric[name]) for name in analytic}
