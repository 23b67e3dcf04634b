"""End-to-end acceptance criteria at desk scale.

Each test carries ``@pytest.mark.acceptance(n)``; conftest prints one PASS/FAIL
line per criterion in the terminal summary.  Training-heavy fixtures are
session-scoped and share the JSON run descriptions in ``configs/``.
"""

import copy
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from phicnet import experiments as ex
from phicnet.cell import build_phicnet
from phicnet.metrics import corr_coef, snr_db
from phicnet.pde import PdeKind, PdeModel
from phicnet.sim import (
    DEFAULT_THETA,
    SOURCE_FOR_SYSTEM,
    DatasetConfig,
    blob_sha256,
    build_dataset,
    load_dataset,
    save_dataset,
    simulate_sequence,
)
from phicnet.sources import Impulse, make_source
from phicnet.training import (
    CLOSED_LOOP,
    TEACHER_FORCED,
    grad_check,
    grad_check_fixture,
    load_checkpoint,
    ordered_parameters,
    rollout,
    save_checkpoint,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
HORIZON = 10


def run_config(name, **over) -> ex.RunConfig:
    cfg = ex.RunConfig.load(CONFIGS / name)
    for k, v in over.items():
        setattr(cfg, k, v)
    return cfg


def detail(record_property, text):
    record_property("detail", text)
    print(text)


# ---------------------------------------------------------------- shared training runs


@pytest.fixture(scope="session")
def heat_runs():
    cfg = run_config("heat_desk.json")
    ds = ex.get_dataset(cfg)
    out = {"ds": ds}
    t0 = time.perf_counter()
    for tag in ("phicnet", "pde_rnn_cnn"):
        m, _, _ = ex.fit(cfg, ds, model_tag=tag)
        out[tag] = m
        out[tag + "_report"] = ex.evaluate(m, ds, HORIZON, model_tag=tag)
    out["seconds"] = time.perf_counter() - t0
    return out


@pytest.fixture(scope="session")
def wave_k_runs():
    cfg = run_config("wave_k_sweep.json")
    ds = ex.get_dataset(cfg)
    models, rho = {}, {}

    def keep(v, m, snr, r):
        models[int(v)] = m
        rho[int(v)] = r.at(HORIZON)

    ex.run_sweep(cfg, ds, on_value=keep)
    return {"models": models, "rho": rho}


# ---------------------------------------------------------------- criteria


@pytest.mark.acceptance(1)
def test_oracle_equivalence(record_property):
    t0 = time.perf_counter()
    worst = 0.0
    for system in ("heat", "wave"):
        pm = PdeModel(system, DEFAULT_THETA[PdeKind(system)])
        f = torch.zeros(1, 16, 16, dtype=torch.float64)
        f[0, 5, 9], f[0, 11, 3] = 1.0, -0.5
        seq = simulate_sequence(pm, Impulse(f), 52, (16, 16))
        m = build_phicnet(system, 1, pm.theta)
        with torch.no_grad():
            m.rednet.w_vc.zero_()
        ro = rollout(m, seq.u[None], CLOSED_LOOP)
        pred = torch.stack(ro.u_hat, dim=1)[0]
        assert pred.shape[0] >= 50
        worst = max(worst, (pred - seq.u[ro.first :]).abs().max().item())
    elapsed = time.perf_counter() - t0
    detail(record_property, f"max abs diff {worst:.2e} (<= 1e-12), {elapsed:.2f}s (< 1s)")
    assert worst <= 1e-12 and elapsed < 1.0


@pytest.mark.acceptance(2)
def test_exact_source_recovery(record_property):
    t0 = time.perf_counter()
    worst = 0.0
    for kind in PdeKind:
        pm = PdeModel(kind, DEFAULT_THETA[kind])
        seq = simulate_sequence(pm, make_source(SOURCE_FOR_SYSTEM[kind]), 59, (16, 16),
                                rng=np.random.default_rng(3))
        m = build_phicnet(kind.value, 2, pm.theta)
        ro = rollout(m, seq.u[None], TEACHER_FORCED)
        for i, v in enumerate(ro.v_est):
            worst = max(worst, (v[0] - seq.v[ro.first + i - 1]).abs().max().item())
    elapsed = time.perf_counter() - t0
    detail(record_property, f"max abs diff {worst:.2e} (<= 1e-12), {elapsed:.2f}s (< 5s)")
    assert worst <= 1e-12 and elapsed < 5.0


@pytest.mark.acceptance(3)
def test_gradient_correctness(record_property):
    t0 = time.perf_counter()
    errs = {}
    for system in ("heat", "wave", "burgers"):
        model, frames = grad_check_fixture(system, seed=7, grid=8, steps=8)
        errs[system] = max(grad_check(model, frames).values())
    elapsed = time.perf_counter() - t0
    text = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    detail(record_property, f"max group rel err {text} (< 1e-4), {elapsed:.0f}s (< 120s)")
    assert max(errs.values()) < 1e-4 and elapsed < 120


@pytest.mark.acceptance(4)
def test_desk_heat_training(heat_runs, record_property):
    snr, rho = heat_runs["phicnet_report"]
    b_snr, b_rho = heat_runs["pde_rnn_cnn_report"]
    s, r, bs, br = snr.at(HORIZON), rho.at(HORIZON), b_snr.at(HORIZON), b_rho.at(HORIZON)
    secs = heat_runs["seconds"]
    detail(record_property, f"PhICNet SNR {s:.1f} dB rho {r:.3f}; baseline SNR {bs:.1f} dB "
                            f"rho {br:.3f}; both trained in {secs:.0f}s")
    assert s >= 10 and r >= 0.8
    assert s > bs and r > br
    assert secs < 30 * 60


@pytest.mark.acceptance(5)
def test_source_order_trend(wave_k_runs, record_property):
    rho = wave_k_runs["rho"]
    detail(record_property, "rho@10 " + ", ".join(f"K={k} {rho[k]:.3f}" for k in sorted(rho)))
    assert rho[2] >= rho[3] >= rho[1]
    assert rho[2] - rho[1] >= 0.05


@pytest.mark.acceptance(6)
def test_noise_trend(record_property):
    cfg = run_config("burgers_noise_sweep.json")
    ds = ex.get_dataset(cfg)
    terminal = {}
    ex.run_sweep(cfg, ds, on_value=lambda v, m, s, r: terminal.__setitem__(float(v), s.at(HORIZON)))
    levels = sorted(terminal)
    detail(record_property, "terminal SNR " + ", ".join(f"{v:g}: {terminal[v]:.2f} dB" for v in levels))
    snrs = [terminal[v] for v in levels]
    assert all(a >= b for a, b in zip(snrs, snrs[1:]))
    assert terminal[1.0] <= 0


@pytest.mark.acceptance(7)
def test_online_tracking(heat_runs, wave_k_runs, record_property):
    t0 = time.perf_counter()
    settle, ok = {}, True
    for name, model in (("heat", heat_runs["phicnet"]), ("wave", wave_k_runs["models"][2])):
        cfg = run_config(f"{name}_adapt.json")
        m = copy.deepcopy(model)
        frozen = [p.detach().clone() for p in m.data_parameters()]
        stream, theta_true = ex.adaptation_stream(cfg)
        rows = ex.adapt(cfg, m, stream, theta_true)
        jumps = [int(t) + 1 for t, _ in cfg.adapt["schedule"][1:]]  # first frame made by the new value
        base, up = cfg.adapt["schedule"][0][1], cfg.adapt["schedule"][1][1]
        assert math.isclose(up, 1.5 * base)
        ends = [j - 1 for j in jumps[1:]] + [None]
        settle[name] = [ex.settling_steps(rows, j - 1, e) for j, e in zip(jumps, ends)]
        ok &= all(s is not None for s in settle[name])
        ok &= all(torch.equal(a, b) for a, b in zip(frozen, m.data_parameters()))
    elapsed = time.perf_counter() - t0
    detail(record_property, f"settling steps per jump {settle}; weights frozen; {elapsed:.0f}s (< 300s)")
    assert ok and elapsed < 300


@pytest.mark.acceptance(8)
def test_metric_analytic_cases(record_property):
    rng = np.random.default_rng(0)
    u = rng.standard_normal((1, 8, 8))
    d = rng.standard_normal((1, 8, 8))
    d *= np.linalg.norm(u) / (2 * np.linalg.norm(d))
    half = snr_db(u, u - d)
    aff = corr_coef(u, 3.5 * u - 2.0)
    anti = corr_coef(u, -u)
    detail(record_property, f"snr {half:.6f} dB, affine rho {aff:.12f}, antipodal rho {anti:.12f}")
    assert abs(half - 20 * math.log10(2)) < 1e-9 and abs(half - 6.0206) < 1e-4
    assert abs(aff - 1) < 1e-9 and abs(anti + 1) < 1e-9


@pytest.mark.acceptance(9)
def test_format_round_trips(tmp_path, record_property):
    dcfg = DatasetConfig("wave", (16, 16), 20, {"train": 2, "val": 1, "test": 1}, seed=5)
    ds = build_dataset(dcfg)
    save_dataset(ds, tmp_path / "a")
    back = load_dataset(tmp_path / "a")
    same_data = np.array_equal(back.u, ds.u) and np.array_equal(back.v, ds.v)
    save_dataset(build_dataset(dcfg), tmp_path / "b")
    same_hash = blob_sha256(tmp_path / "a") == blob_sha256(tmp_path / "b")

    spec = {"model_tag": "phicnet", "system": "wave", "K": 2, "theta_init": 0.2, "seed": 3}
    m = build_phicnet("wave", 2, 0.2, seed=3)
    m.rednet.reset_parameters(4, zero_final=False)
    save_checkpoint(m, spec, tmp_path / "ck")
    m2, _ = load_checkpoint(tmp_path / "ck")
    same_params = all(torch.equal(p, q) for (_, p), (_, q) in
                      zip(ordered_parameters(m), ordered_parameters(m2)))
    detail(record_property, f"dataset {same_data}, same-seed hash {same_hash}, checkpoint {same_params}")
    assert same_data and same_hash and same_params
