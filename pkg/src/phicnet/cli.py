"""Command-line entry point: generate | train | eval | sweep | adapt."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from matplotlib import image as mpimg

from . import experiments as ex
from .online import run_session, write_trace
from .sim import SimulationError, add_observation_noise, build_dataset, save_dataset
from .training import save_checkpoint, train

log = logging.getLogger("phicnet")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, default=str) + "\n", encoding="utf-8")


def cmd_generate(cfg: ex.RunConfig, out: Path) -> dict:
    dcfg = cfg.dataset_config()
    planned = dcfg.planned_bytes()
    plan = {"sequences": dict(dcfg.counts), "frames": dcfg.steps + 1, "grid": list(dcfg.grid),
            "planned_bytes": planned}
    if cfg.dry_run or planned > cfg.max_bytes:
        # full-scale configs are validated and sized, not materialized
        _write_json(out / "plan.json", plan)
        return {"planned": plan}
    ds = build_dataset(dcfg)
    paths = {"dataset": str(save_dataset(ds, out / "dataset")[1])}
    if cfg.noise > 0:
        noisy = add_observation_noise(ds, cfg.noise, cfg.noise_seed)
        paths["noisy"] = str(save_dataset(noisy, out / "dataset_noisy")[1])
    return paths


def cmd_train(cfg: ex.RunConfig, out: Path) -> dict:
    ds = ex.get_dataset(cfg)
    if cfg.checkpoint:
        # continue from an existing checkpoint
        model, manifest = ex.get_model(cfg)
        spec = manifest["spec"]
        res = train(model, ds.frames("train"), ds.frames("val"), cfg.train_config(), log_every=10)
    else:
        model, res, spec = ex.fit(cfg, ds, log_every=10)
    save_checkpoint(model, spec, out / "checkpoint", extra={"best_epoch": res.best_epoch})
    res.write_curves(out / "curves.csv")
    return {"best_epoch": res.best_epoch, "best_val": res.best_val,
            "theta": [p.item() for p in model.physics_parameters()]}


def _save_snapshot(out: Path, name: str, truth: np.ndarray, pred: np.ndarray):
    np.savez(out / f"{name}.npz", truth=truth, prediction=pred)
    lo, hi = float(min(truth.min(), pred.min())), float(max(truth.max(), pred.max()))
    for c in range(truth.shape[0]):
        panel = np.concatenate([truth[c], pred[c]], axis=1)  # truth left, forecast right
        mpimg.imsave(out / f"{name}_c{c}.png", panel, cmap="viridis", vmin=lo, vmax=hi)


def cmd_eval(cfg: ex.RunConfig, out: Path) -> dict:
    ds = ex.get_dataset(cfg)
    model, manifest = ex.get_model(cfg)
    horizon = int(cfg.eval.get("horizon", 10))
    start = int(cfg.eval.get("start", 0))
    tag = manifest["spec"].get("model_tag", "")
    snr, rho = ex.evaluate(model, ds, horizon, cfg.noise, cfg.noise_seed, start, tag)
    snr.write_csv(out / "snr.csv")
    summary = {"snr_db": snr.at(horizon)}
    if rho is not None:
        rho.write_csv(out / "rho.csv")
        summary["rho"] = rho.at(horizon)
    shots = [int(h) for h in cfg.eval.get("snapshots", []) if 1 <= int(h) <= horizon]
    if shots:
        truth = ds.frames("test")[:1]
        pred = ex.forecast(model, truth, horizon, start)[0].numpy()
        first = start + model.warmup_frames
        snap = out / "snapshots"
        snap.mkdir(exist_ok=True)
        for h in shots:
            _save_snapshot(snap, f"t{h:03d}", truth[0, first + h - 1].numpy(), pred[h - 1])
    return summary


def cmd_sweep(cfg: ex.RunConfig, out: Path) -> dict:
    if not cfg.sweep.get("values"):
        raise ex.ConfigError("sweep value list is empty")
    ds = ex.get_dataset(cfg)
    model = ex.get_model(cfg)[0] if cfg.checkpoint and cfg.sweep.get("variable") == "noise" else None
    rows = ex.run_sweep(cfg, ds, model=model,
                        on_value=lambda v, m, s, r: log.info("%s=%s done", cfg.sweep["variable"], v))
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ex.SWEEP_FIELDS)
        w.writeheader()
        w.writerows(rows)
    horizon = max(r["step"] for r in rows)
    return {f"{r['metric']}@{r['value']}": r["mean"] for r in rows if r["step"] == horizon}


def cmd_adapt(cfg: ex.RunConfig, out: Path) -> dict:
    model, _ = ex.get_model(cfg)
    if model.kind.value != cfg.system:
        raise ex.ConfigError(f"checkpoint system {model.kind.value} does not match config {cfg.system}")
    acfg = cfg.adapt_config()
    stream, theta_true = ex.adaptation_stream(cfg)
    rows = run_session(model, stream, acfg, theta_true)
    write_trace(rows, out / "trace.csv")
    return {"triggers": sum(r.triggered for r in rows), "final_theta": rows[-1].theta_estimate}


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "sweep": cmd_sweep, "adapt": cmd_adapt}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="phicnet", description=__doc__)
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, help="JSON run description")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--threads", type=int, help="cap on intra-op threads")
    p.add_argument("--out", type=Path, default=None, help="output directory (default runs/<command>)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = ex.RunConfig.load(args.config) if args.config else ex.RunConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        if args.threads is not None:
            if args.threads < 1:
                raise ex.ConfigError("--threads must be >= 1")
            torch.set_num_threads(args.threads)
        out = args.out or Path("runs") / args.command
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "config.json", cfg.to_dict())
        summary = COMMANDS[args.command](cfg, out)
    except (FloatingPointError, SimulationError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    _write_json(out / "summary.json", summary)
    print(json.dumps(summary, default=str))
    return EXIT_OK


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
