"""Run descriptions and the experiment drivers shared by the CLI and scripts."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .metrics import HorizonReport, horizon_eval
from .online import AdaptConfig, TraceRow, run_session
from .pde import PdeKind, PdeModel
from .sim import (
    DEFAULT_THETA,
    SOURCE_FOR_SYSTEM,
    DatasetConfig,
    SequenceDataset,
    add_observation_noise,
    build_dataset,
    load_dataset,
    simulate_sequence,
)
from .sources import make_source
from .training import CLOSED_LOOP, TrainConfig, build_model, load_checkpoint, rollout, train

DEFAULT_K = {PdeKind.HEAT: 1, PdeKind.WAVE: 2, PdeKind.BURGERS: 1}
SWEEP_VARIABLES = ("K", "lam", "noise")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    system: str = "heat"
    grid: tuple = (16, 16)
    steps: int = 60
    counts: dict = field(default_factory=lambda: {"train": 12, "val": 4, "test": 4})
    theta: float | None = None  # true parameter used to simulate
    source: dict = field(default_factory=dict)
    noise: float = 0.0  # relative observation noise on evaluated frames
    noise_seed: int = 0
    dataset: str | None = None  # existing dataset stem; generated in memory when absent
    checkpoint: str | None = None
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=lambda: {"horizon": 10, "start": 0, "snapshots": [10]})
    adapt: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    seed: int = 0
    dry_run: bool = False
    max_bytes: int = 1 << 30  # larger datasets are only planned, never generated

    def __post_init__(self):
        try:
            self.system = PdeKind(self.system).value
        except ValueError:
            raise ConfigError(f"unknown system {self.system!r}") from None
        self.grid = tuple(int(g) for g in self.grid)
        if len(self.grid) != 2 or min(self.grid) < 3:
            raise ConfigError(f"grid must be two sizes >= 3, got {self.grid}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")

    @property
    def kind(self) -> PdeKind:
        return PdeKind(self.system)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = sorted(set(d) - known)
        if extra:
            raise ConfigError(f"unknown config keys: {', '.join(extra)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    def dataset_config(self) -> DatasetConfig:
        return DatasetConfig(self.system, self.grid, self.steps, dict(self.counts), self.seed,
                             self.theta, dict(self.source))

    def model_spec(self, **override) -> dict:
        spec = {
            "model_tag": "phicnet",
            "system": self.system,
            "K": DEFAULT_K[self.kind],
            "theta_init": 0.1,
            "seed": self.seed,
        }
        spec.update(self.model)
        spec.update(override)
        return spec

    def train_config(self, **override) -> TrainConfig:
        d = {"seed": self.seed, **self.train, **override}
        _reject_unknown("train", d, TrainConfig.__dataclass_fields__)
        try:
            return TrainConfig.from_dict(d)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def adapt_config(self) -> AdaptConfig:
        d = dict(self.adapt)
        if isinstance(d.get("e_th"), str):
            d["e_th"] = float(d["e_th"])  # JSON has no literal for infinity
        _reject_unknown("adapt", d, {*AdaptConfig.__dataclass_fields__, "schedule", "steps"})
        try:
            return AdaptConfig.from_dict(d)
        except ValueError as e:
            raise ConfigError(str(e)) from None


def _reject_unknown(section: str, d: dict, known):
    extra = sorted(set(d) - set(known))
    if extra:
        raise ConfigError(f"unknown keys in '{section}': {', '.join(extra)}")


# ---------------------------------------------------------------- data and models


def get_dataset(cfg: RunConfig) -> SequenceDataset:
    if cfg.dataset:
        try:
            return load_dataset(cfg.dataset)
        except FileNotFoundError:
            raise ConfigError(f"dataset not found: {cfg.dataset}") from None
    return build_dataset(cfg.dataset_config())


def get_model(cfg: RunConfig):
    if not cfg.checkpoint:
        raise ConfigError("this command needs a 'checkpoint' path")
    try:
        return load_checkpoint(cfg.checkpoint)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {cfg.checkpoint}") from None


def fit(cfg: RunConfig, ds: SequenceDataset, log_every: int = 0, **spec_override):
    """Build a model from the run description and train it on ``ds``."""
    spec = cfg.model_spec(**spec_override)
    if spec["system"] != ds.system:
        raise ConfigError(f"model system {spec['system']} does not match dataset {ds.system}")
    model = build_model(spec)
    tcfg = cfg.train_config()
    res = train(model, ds.frames("train"), ds.frames("val"), tcfg, log_every=log_every)
    return model, res, spec


def evaluate(model, ds: SequenceDataset, horizon: int = 10, noise: float = 0.0, noise_seed: int = 0,
             start: int = 0, model_tag: str = "") -> tuple[HorizonReport, HorizonReport | None]:
    """Closed-loop test-split evaluation; noisy observations are scored against clean truth."""
    truth = ds.frames("test")
    observed = truth if noise == 0 else add_observation_noise(ds, noise, noise_seed).frames("test")
    return horizon_eval(model, observed, ds.sources("test"), horizon, truth=truth, start=start,
                        model_tag=model_tag)


def forecast(model, frames: torch.Tensor, horizon: int, start: int = 0) -> torch.Tensor:
    """Closed-loop predictions (B, horizon, C, X, Y) after warming up at ``start``."""
    W = model.warmup_frames
    with torch.no_grad():
        ro = rollout(model, frames[:, start : start + W + horizon], CLOSED_LOOP, horizon=horizon)
    return torch.stack(ro.u_hat, dim=1)


def sweep_rows(variable: str, value, snr: HorizonReport, rho: HorizonReport | None) -> list[dict]:
    rows = []
    for rep in (snr, rho):
        if rep is None:
            continue
        for k in range(rep.horizon):
            rows.append({
                "variable": variable, "value": value, "step": k + 1, "metric": rep.metric,
                "mean": rep.mean[k], "ci_lo": rep.ci_lo[k], "ci_hi": rep.ci_hi[k],
                "model_tag": rep.model_tag,
            })
    return rows


SWEEP_FIELDS = ["variable", "value", "step", "metric", "mean", "ci_lo", "ci_hi", "model_tag"]


def run_sweep(cfg: RunConfig, ds: SequenceDataset, model=None, on_value=None) -> list[dict]:
    """Train/evaluate across one sweep variable.

    K and lam retrain per value.  The noise sweep evaluates one model (trained
    on clean data unless ``model`` is given) on progressively noisier observations.
    """
    variable = cfg.sweep.get("variable")
    values = list(cfg.sweep.get("values", []))
    if variable not in SWEEP_VARIABLES:
        raise ConfigError(f"sweep variable must be one of {SWEEP_VARIABLES}, got {variable!r}")
    if not values:
        raise ConfigError("sweep value list is empty")
    horizon = int(cfg.eval.get("horizon", 10))
    start = int(cfg.eval.get("start", 0))
    rows = []
    if variable == "noise":
        if model is None:
            model, _, _ = fit(cfg, ds)
        for v in values:
            snr, rho = evaluate(model, ds, horizon, float(v), cfg.noise_seed, start, "phicnet")
            rows += sweep_rows(variable, v, snr, rho)
            if on_value:
                on_value(v, model, snr, rho)
        return rows
    for v in values:
        if variable == "K":
            m, _, spec = fit(cfg, ds, K=int(v))
        else:
            sub = RunConfig(**{**cfg.to_dict(), "train": {**cfg.train, "lam": float(v)}})
            m, _, spec = fit(sub, ds)
        snr, rho = evaluate(m, ds, horizon, cfg.noise, cfg.noise_seed, start, spec["model_tag"])
        rows += sweep_rows(variable, v, snr, rho)
        if on_value:
            on_value(v, m, snr, rho)
    return rows


# ---------------------------------------------------------------- online adaptation


def piecewise_constant(points: list) -> callable:
    """[[t0, value0], [t1, value1], ...] -> step-indexed schedule."""
    pts = sorted((int(t), float(v)) for t, v in points)
    if not pts or pts[0][0] != 0:
        raise ConfigError("a parameter schedule must start at step 0")

    def at(t: int) -> float:
        val = pts[0][1]
        for t0, v in pts:
            if t >= t0:
                val = v
        return val

    return at


def adaptation_stream(cfg: RunConfig, seed: int | None = None):
    """Simulate one observation stream under the configured parameter schedule."""
    kind = cfg.kind
    base = cfg.theta if cfg.theta is not None else DEFAULT_THETA[kind]
    schedule = piecewise_constant(cfg.adapt.get("schedule", [[0, base]]))
    steps = int(cfg.adapt.get("steps", cfg.steps))
    proc = make_source(SOURCE_FOR_SYSTEM[kind], **cfg.source)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    seq = simulate_sequence(PdeModel(kind, base), proc, steps, cfg.grid, rng=rng,
                            theta_schedule=schedule)
    return seq.u, seq.theta


def adapt(cfg: RunConfig, model, stream: torch.Tensor, theta_true) -> list[TraceRow]:
    return run_session(model, stream, cfg.adapt_config(), theta_true)


def settling_steps(rows: list[TraceRow], jump_step: int, next_jump: int | None, tol: float = 0.1):
    """Observation steps after ``jump_step`` until the estimate stays within ``tol`` relative error.

    Returns None if it never settles before ``next_jump`` (or the end of the trace).
    """
    window = [r for r in rows if r.step > jump_step and (next_jump is None or r.step <= next_jump)]
    settled = None
    for r in window:
        ok = abs(r.theta_estimate - r.theta_true) <= tol * abs(r.theta_true)
        if ok and settled is None:
            settled = r.step
        elif not ok:
            settled = None
    return None if settled is None else settled - jump_step
