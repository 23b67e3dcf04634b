"""Forecast and source-identification metrics over a rollout horizon."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .training import CLOSED_LOOP, rollout


class UndefinedMetric(ArithmeticError):
    pass


def _arr(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().numpy()
    return np.asarray(x, dtype=np.float64)


def snr_db(u_true, u_hat) -> float:
    """20 log10(|U| / |U - U_hat|) in dB; +inf when the residual is exactly zero."""
    u_true, u_hat = _arr(u_true), _arr(u_hat)
    if u_true.shape != u_hat.shape:
        raise ValueError(f"shape mismatch {u_true.shape} vs {u_hat.shape}")
    signal = np.linalg.norm(u_true.ravel())
    if signal == 0:
        raise UndefinedMetric("SNR undefined for a zero-signal frame")
    resid = np.linalg.norm((u_true - u_hat).ravel())
    if resid == 0:
        return math.inf
    return 20.0 * math.log10(signal / resid)


def corr_coef(v_true, v_hat) -> float:
    """Pearson correlation over all grid points (channels flattened together)."""
    a, b = _arr(v_true).ravel(), _arr(v_hat).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    den = math.sqrt(float(da @ da) * float(db @ db))
    if den == 0:
        raise UndefinedMetric("correlation undefined for a constant map")
    return float(np.clip((da @ db) / den, -1.0, 1.0))


@dataclass
class HorizonReport:
    metric: str  # "snr_db" or "corr_coef"
    mean: np.ndarray  # per horizon step
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    values: np.ndarray  # (sequences, horizon), nan where undefined
    model_tag: str = ""

    @property
    def horizon(self) -> int:
        return len(self.mean)

    def at(self, step: int) -> float:
        """Mean metric ``step`` frames after the last observation (1-based)."""
        return float(self.mean[step - 1])

    def write_csv(self, path: str | Path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "metric", "mean", "ci_lo", "ci_hi", "model_tag"])
            for k in range(self.horizon):
                w.writerow([k + 1, self.metric, self.mean[k], self.ci_lo[k], self.ci_hi[k], self.model_tag])


def summarize(values: np.ndarray, metric: str, model_tag: str = "") -> HorizonReport:
    """Mean and mean +- 1.96 standard errors across sequences, per step."""
    H = values.shape[1]
    mean, lo, hi = np.full(H, np.nan), np.full(H, np.nan), np.full(H, np.nan)
    for k in range(H):
        col = values[:, k]
        col = col[~np.isnan(col)]
        if col.size == 0:
            continue
        if not np.isfinite(col).all():
            mean[k] = lo[k] = hi[k] = col.mean()
            continue
        m = col.mean()
        half = 1.96 * col.std(ddof=1) / math.sqrt(col.size) if col.size > 1 else 0.0
        mean[k], lo[k], hi[k] = m, m - half, m + half
    return HorizonReport(metric, mean, lo, hi, values, model_tag)


def horizon_eval(model, frames: torch.Tensor, sources: torch.Tensor | None, horizon: int,
                 truth: torch.Tensor | None = None, start: int = 0, model_tag: str = "",
                 to_native=None):
    """Closed-loop forecast from the warmup frames at ``start``; returns (SNR report, rho report).

    ``frames`` are what the model observes (possibly noisy); ``truth`` (defaults
    to ``frames``) is what the forecast is scored against.  ``sources`` are the
    hidden ground-truth maps and are read only for the correlation report.
    ``to_native`` maps model-space fields back to native units before scoring.
    """
    truth = frames if truth is None else truth
    W = model.warmup_frames
    if frames.shape[1] - start < W + horizon:
        raise ValueError(f"need {W + horizon} frames from index {start}, have {frames.shape[1] - start}")
    window = frames[:, start : start + W + horizon]
    with torch.no_grad():
        ro = rollout(model, window, CLOSED_LOOP, horizon=horizon)
    B = frames.shape[0]
    snr = np.full((B, horizon), np.nan)
    rho = np.full((B, horizon), np.nan)
    fix = (lambda x: x) if to_native is None else to_native
    for k in range(horizon):
        t = start + W + k
        for b in range(B):
            try:
                snr[b, k] = snr_db(fix(truth[b, t]), fix(ro.u_hat[k][b]))
            except UndefinedMetric:
                pass
            if sources is not None and ro.v_hat[k] is not None:
                try:
                    # the source predicted alongside U_hat_t is the one that drove U_t
                    rho[b, k] = corr_coef(sources[b, t - 1], ro.v_hat[k][b])
                except UndefinedMetric:
                    pass
    snr_rep = summarize(snr, "snr_db", model_tag)
    has_source = sources is not None and ro.v_hat[0] is not None
    rho_rep = summarize(rho, "corr_coef", model_tag) if has_source else None
    return snr_rep, rho_rep
