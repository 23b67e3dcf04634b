"""Ground-truth generation and the on-disk dataset format."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .cell import homogeneous_update
from .fields import DTYPE, stack_shift_insert, zero_stack
from .pde import STABILITY_BOUND, PdeKind, PdeModel
from .sources import initial_state, make_source, step_sources

FORMAT_VERSION = 1

SOURCE_FOR_SYSTEM = {
    PdeKind.HEAT: "diffusing_blocks",
    PdeKind.WAVE: "coupled_oscillators",
    PdeKind.BURGERS: "orbiting_pressure",
}
DEFAULT_THETA = {PdeKind.HEAT: 0.15, PdeKind.WAVE: 0.25, PdeKind.BURGERS: 0.15}


class SimulationError(RuntimeError):
    pass


@dataclass
class Sequence:
    u: torch.Tensor  # (T+1, C, X, Y)
    v: torch.Tensor  # (T+1, C, X, Y); v[t] drives U[t+1]
    theta: np.ndarray  # (T,) parameter used for each step


def simulate_sequence(
    model: PdeModel,
    proc,
    steps: int,
    shape: tuple[int, int],
    rng: np.random.Generator | None = None,
    state=None,
    theta_schedule: Callable[[int], float] | None = None,
    blowup: float = 1e4,
    check_stability: bool = True,
) -> Sequence:
    """Integrate from U_{t<=0} = 0 with one explicit unit step per frame.

    U[t+1] = homogeneous(U[t], ..., U[t-n+1]) + v[t].  The homogeneous part is
    the exact same computation the recurrent cell performs.
    """
    if state is None:
        state = initial_state(proc, rng if rng is not None else np.random.default_rng(0), shape)
    C, n = model.channels, model.n
    zero = torch.zeros(C, *shape, dtype=DTYPE)
    hist = zero_stack(n, zero)
    us, vs, thetas = [zero], [proc.rasterize(state, shape)], []
    for t in range(steps):
        theta = model.theta if theta_schedule is None else float(theta_schedule(t))
        if check_stability and theta > STABILITY_BOUND[model.kind]:
            raise SimulationError(
                f"{model.param_name}={theta} exceeds the explicit stability bound "
                f"{STABILITY_BOUND[model.kind]}"
            )
        h = homogeneous_update(model.kind, model.boundary, hist, torch.tensor(theta, dtype=DTYPE))
        u_next = h + vs[-1]
        peak = u_next.abs().max().item()
        if not np.isfinite(peak) or peak > blowup:
            raise SimulationError(f"blow-up at step {t + 1}: max|U| = {peak:.3g} > {blowup:g}")
        hist = stack_shift_insert(hist, u_next)
        state, v = step_sources(proc, state, shape)
        us.append(u_next)
        vs.append(v)
        thetas.append(theta)
    return Sequence(torch.stack(us), torch.stack(vs), np.asarray(thetas))


@dataclass
class DatasetConfig:
    system: str = "heat"
    grid: tuple[int, int] = (16, 16)
    steps: int = 60
    counts: dict = field(default_factory=lambda: {"train": 12, "val": 4, "test": 4})
    seed: int = 0
    theta: float | None = None
    source: dict = field(default_factory=dict)
    blowup: float = 1e4

    def __post_init__(self):
        self.system = PdeKind(self.system).value
        self.grid = tuple(int(g) for g in self.grid)
        for k in ("train", "val", "test"):
            self.counts.setdefault(k, 0)
        if self.theta is None:
            self.theta = DEFAULT_THETA[PdeKind(self.system)]

    @property
    def kind(self) -> PdeKind:
        return PdeKind(self.system)

    @property
    def source_kind(self) -> str:
        return SOURCE_FOR_SYSTEM[self.kind]

    def model(self) -> PdeModel:
        return PdeModel(self.kind, self.theta)

    def total(self) -> int:
        return sum(self.counts[k] for k in ("train", "val", "test"))

    def planned_bytes(self) -> int:
        C = self.model().channels
        return self.total() * 2 * (self.steps + 1) * C * self.grid[0] * self.grid[1] * 4

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class SequenceDataset:
    system: str
    source_kind: str
    u: np.ndarray  # (S, T+1, C, X, Y)
    v: np.ndarray
    splits: list
    seed: int
    theta: float
    norm: dict
    config: dict = field(default_factory=dict)

    @property
    def counts(self) -> dict:
        return {k: self.splits.count(k) for k in ("train", "val", "test")}

    @property
    def grid(self) -> tuple[int, int, int]:
        return tuple(self.u.shape[-2:]) + (self.u.shape[2],)

    @property
    def frames_per_seq(self) -> int:
        return self.u.shape[1]

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def frames(self, split: str) -> torch.Tensor:
        """Observed frames of a split as a (B, T+1, C, X, Y) float64 tensor."""
        return torch.as_tensor(self.u[self.indices(split)], dtype=DTYPE)

    def sources(self, split: str) -> torch.Tensor:
        """Hidden source frames; for evaluation only."""
        return torch.as_tensor(self.v[self.indices(split)], dtype=DTYPE)

    def standardize(self, u: np.ndarray | torch.Tensor):
        return (u - self.norm["mean"]) / self.norm["std"]

    def destandardize(self, z: np.ndarray | torch.Tensor):
        return z * self.norm["std"] + self.norm["mean"]

    def with_frames(self, u: np.ndarray) -> "SequenceDataset":
        return SequenceDataset(
            self.system, self.source_kind, u, self.v, list(self.splits), self.seed,
            self.theta, dict(self.norm), dict(self.config),
        )


def norm_stats(u_train: np.ndarray) -> dict:
    return {"mean": float(u_train.mean()), "std": float(u_train.std())}


def build_dataset(cfg: DatasetConfig) -> SequenceDataset:
    """Generate train/val/test sequences; one independent RNG stream per sequence."""
    model = cfg.model()
    order = [s for s in ("train", "val", "test") for _ in range(cfg.counts[s])]
    streams = np.random.SeedSequence(cfg.seed).spawn(len(order))
    proc = make_source(cfg.source_kind, **cfg.source)
    us, vs = [], []
    for ss in streams:
        seq = simulate_sequence(
            model, proc, cfg.steps, cfg.grid, rng=np.random.default_rng(ss), blowup=cfg.blowup
        )
        # storage precision is 32-bit; quantizing here makes save/load lossless
        us.append(seq.u.numpy().astype(np.float32).astype(np.float64))
        vs.append(seq.v.numpy().astype(np.float32).astype(np.float64))
    u = np.stack(us) if us else np.zeros((0, cfg.steps + 1, model.channels, *cfg.grid))
    v = np.stack(vs) if vs else np.zeros_like(u)
    train = u[[i for i, s in enumerate(order) if s == "train"]]
    norm = norm_stats(train) if train.size else {"mean": 0.0, "std": 1.0}
    return SequenceDataset(
        cfg.system, cfg.source_kind, u, v, order, cfg.seed, float(cfg.theta), norm,
        config=_jsonable(asdict(cfg)),
    )


def add_observation_noise(ds: SequenceDataset, relative_std: float, seed: int = 0) -> SequenceDataset:
    """Add i.i.d. Gaussian noise of std ``relative_std * (training U std)`` to the observed frames.

    A fixed seed gives the same unit-noise draw at every level, so different
    levels differ only in scale.
    """
    if relative_std < 0:
        raise ValueError("relative_std must be >= 0")
    if relative_std == 0:
        return ds.with_frames(ds.u.copy())
    z = np.random.default_rng(seed).standard_normal(ds.u.shape)
    noisy = ds.u + relative_std * ds.norm["std"] * z
    return ds.with_frames(noisy.astype(np.float32).astype(np.float64))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if hasattr(obj, "value"):
        return obj.value
    return obj


def dataset_paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    return p.with_name(p.name + ".manifest.json"), p.with_name(p.name + ".frames.bin")


def save_dataset(ds: SequenceDataset, path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.manifest.json`` and ``<path>.frames.bin``."""
    mpath, bpath = dataset_paths(path)
    mpath.parent.mkdir(parents=True, exist_ok=True)
    X, Y, C = ds.grid
    manifest = {
        "format_version": FORMAT_VERSION,
        "system": ds.system,
        "grid": {"x": X, "y": Y, "channels": C},
        "frames_per_seq": ds.frames_per_seq,
        "counts": ds.counts,
        "splits": list(ds.splits),
        "seed": ds.seed,
        "theta": ds.theta,
        "norm": ds.norm,
        "source_kind": ds.source_kind,
        "byte_order": "little",
        "config": ds.config,
    }
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    blob = np.concatenate(
        [np.stack([ds.u[i], ds.v[i]]).reshape(-1) for i in range(len(ds.splits))]
    ) if len(ds.splits) else np.zeros(0)
    bpath.write_bytes(blob.astype("<f4").tobytes())
    return mpath, bpath


def load_dataset(path: str | Path) -> SequenceDataset:
    mpath, bpath = dataset_paths(path)
    m = json.loads(mpath.read_text(encoding="utf-8"))
    if m.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format_version {m.get('format_version')}")
    if m.get("byte_order") != "little":
        raise ValueError("dataset blob must be little-endian")
    S, F = len(m["splits"]), m["frames_per_seq"]
    g = m["grid"]
    raw = np.frombuffer(bpath.read_bytes(), dtype="<f4")
    expected = S * 2 * F * g["channels"] * g["x"] * g["y"]
    if raw.size != expected:
        raise ValueError(f"blob holds {raw.size} values, manifest implies {expected}")
    arr = raw.reshape(S, 2, F, g["channels"], g["x"], g["y"]).astype(np.float64)
    return SequenceDataset(
        m["system"], m["source_kind"], arr[:, 0].copy(), arr[:, 1].copy(), list(m["splits"]),
        m["seed"], m["theta"], m["norm"], m.get("config", {}),
    )


def blob_sha256(path: str | Path) -> str:
    return hashlib.sha256(dataset_paths(path)[1].read_bytes()).hexdigest()
