"""CSV ingestion and figure rendering for run artifacts.

CSVs are the source of truth; figures are rendered from them with
matplotlib (SVG, Agg backend) for quick inspection. Training-curve plots
apply a trailing rolling-window mean: the value plotted at epoch t is the
mean of the raw values over epochs t-w+1..t (shorter at the head while
fewer than w values exist); window 1 is the identity.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .snr import SNRReport


class CsvFormatError(ValueError):
    """Metrics CSV is missing required columns or malformed."""


def rolling_mean(values: np.ndarray, window: int) -> np.ndarray:
    if window < 1:
        raise ValueError("window must be >= 1")
    if window == 1:
        return np.asarray(values, dtype=np.float64).copy()
    v = np.asarray(values, dtype=np.float64)
    csum = np.concatenate([[0.0], np.cumsum(v)])
    out = np.empty_like(v)
    for t in range(v.size):
        lo = max(0, t - window + 1)
        out[t] = (csum[t + 1] - csum[lo]) / (t + 1 - lo)
    return out


def read_metrics_csv(path) -> dict[str, np.ndarray]:
    """Load a metrics CSV into column arrays; blank cells become NaN."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "epoch" not in reader.fieldnames:
            raise CsvFormatError(f"{path}: missing header row with an 'epoch' column")
        rows = list(reader)
    cols: dict[str, list[float]] = {name: [] for name in reader.fieldnames}
    for row in rows:
        for name in reader.fieldnames:
            cell = (row.get(name) or "").strip()
            cols[name].append(float(cell) if cell else np.nan)
    return {name: np.asarray(vals) for name, vals in cols.items()}


def plot_metric_curves(csv_paths, metric: str, out_path, window: int = 10) -> Path:
    """One SVG line chart of ``metric`` versus epoch across runs."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    plotted = False
    for path in csv_paths:
        cols = read_metrics_csv(path)
        if metric not in cols:
            raise CsvFormatError(f"{path}: no column {metric!r}")
        mask = ~np.isnan(cols[metric])
        if not mask.any():
            continue
        epochs = cols["epoch"][mask]
        values = rolling_mean(cols[metric][mask], window)
        ax.plot(epochs, values, label=Path(path).stem, linewidth=1.2)
        plotted = True
    ax.set_xlabel("epoch")
    ax.set_ylabel(f"{metric} (nats)" if metric != "beta" else metric)
    title = metric if window == 1 else f"{metric} (rolling window {window})"
    ax.set_title(title)
    if plotted:
        ax.legend(fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, format="svg")
    plt.close(fig)
    return out_path


def plot_snr_vs_k(report: SNRReport, out_path) -> Path:
    """Log-log SNR against K, one line per (family, group, M)."""
    fig, ax = plt.subplots(figsize=(6.4, 4.4))
    keys = sorted({(r.family, r.group, r.M) for r in report.rows})
    for family, group, m_groups in keys:
        rows = sorted(report.filter(family=family, group=group, M=m_groups), key=lambda r: r.K)
        ks = [r.K for r in rows]
        if len(ks) < 2:
            continue
        snrs = [r.snr_median for r in rows]
        ax.loglog(ks, snrs, marker="o", markersize=3, linewidth=1.1,
                  label=f"{family} {group} M={m_groups}")
    ax.set_xlabel("K (importance samples per group)")
    ax.set_ylabel("gradient SNR (median over coordinates)")
    ax.set_title("estimator signal-to-noise vs K")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, format="svg")
    plt.close(fig)
    return out_path
