"""Empirical signal-to-noise measurement of gradient estimators.

For a configured estimator the harness draws ``n`` independent gradient
estimates at fixed parameters and reports, per parameter coordinate,
|sample mean| / sample std (the signal-to-noise ratio), aggregated across
coordinates by the median. Sweeps over grids of (M, K) then fit the
log-log scaling exponents of the aggregate against K and against M by
least squares.

Conventions baked into the protocol:

* measurement happens at parameters offset from the testbed optimum, so
  the inference-side gradient is not degenerate at K = 1;
* a zero-variance coordinate reports an infinite ratio and is excluded
  from aggregates (flagged in the row);
* scaling fits versus K use only K >= 4 (the asymptotic regime for the
  leading-order exponents); fits need at least 3 grid points.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .gaussian import TractableGaussianModel, gradient_samples

SNR_FAMILIES = ("vae", "iwae", "miwae", "ciwae", "piwae")
MIN_FIT_POINTS = 3
SLOPE_FIT_MIN_K = 4
MIN_SAMPLES_FOR_SLOPE = 1000


@dataclass
class SNRRow:
    family: str
    group: str
    M: int
    K: int
    n: int
    snr_median: float
    snr_iqr: float
    slope_K: float = math.nan
    slope_K_stderr: float = math.nan
    slope_M: float = math.nan
    slope_M_stderr: float = math.nan
    mean_abs_median: float = math.nan
    std_median: float = math.nan
    n_zero_variance: int = 0

    def csv_values(self):
        return [getattr(self, f.name) for f in fields(self)]


CSV_HEADER = [f.name for f in fields(SNRRow)]


def summarize_snr(samples: np.ndarray) -> dict:
    """Per-coordinate SNR statistics of an (n, P) array of estimates.

    Std uses the (n-1) denominator. Coordinates with exactly zero std get
    an infinite ratio, are excluded from the aggregate, and are counted
    in ``n_zero_variance``.
    """
    n = samples.shape[0]
    if n < 2:
        raise ValueError("need at least 2 gradient samples")
    mean_abs = np.abs(samples.mean(axis=0))
    std = samples.std(axis=0, ddof=1)
    # A coordinate whose samples are all bit-identical is deterministic;
    # mean-accumulation round-off can leave std at ulp scale, so detect
    # degeneracy on the samples themselves.
    zero = (std == 0.0) | (samples == samples[0]).all(axis=0)
    snr = np.full(samples.shape[1], np.inf)
    snr[~zero] = mean_abs[~zero] / std[~zero]
    finite = snr[~zero]
    if finite.size == 0:
        med, iqr = math.inf, 0.0
        mam, stdm = float(np.median(mean_abs)), 0.0
    else:
        med = float(np.median(finite))
        q75, q25 = np.percentile(finite, [75, 25])
        iqr = float(q75 - q25)
        mam = float(np.median(mean_abs[~zero]))
        stdm = float(np.median(std[~zero]))
    return {
        "snr_per_coord": snr,
        "snr_median": med,
        "snr_iqr": iqr,
        "mean_abs_median": mam,
        "std_median": stdm,
        "n_zero_variance": int(zero.sum()),
        "n": n,
    }


def snr_estimate(
    model: TractableGaussianModel,
    family: str,
    group: str,
    m_groups: int,
    k_samples: int,
    n_samples: int,
    seed: int,
    beta: float = 0.5,
    l_samples: int | None = None,
    noise_scale: float = 1.0,
) -> SNRRow:
    """Measure one grid point; see :func:`summarize_snr` for the statistics."""
    samples = gradient_samples(
        model, family, group, m_groups, k_samples, n_samples, seed,
        beta=beta, l_samples=l_samples, noise_scale=noise_scale,
    )
    s = summarize_snr(samples)
    return SNRRow(
        family=family, group=group, M=m_groups, K=k_samples, n=s["n"],
        snr_median=s["snr_median"], snr_iqr=s["snr_iqr"],
        mean_abs_median=s["mean_abs_median"], std_median=s["std_median"],
        n_zero_variance=s["n_zero_variance"],
    )


def fit_loglog_slope(xs, ys) -> tuple[float, float]:
    """Least-squares slope of log y on log x, with its standard error."""
    xs = np.log(np.asarray(xs, dtype=np.float64))
    ys = np.log(np.asarray(ys, dtype=np.float64))
    n = xs.size
    if n < MIN_FIT_POINTS:
        raise ValueError(f"slope fit needs >= {MIN_FIT_POINTS} points, got {n}")
    xc = xs - xs.mean()
    sxx = float(xc @ xc)
    slope = float(xc @ ys) / sxx
    resid = ys - ys.mean() - slope * xc
    stderr = float(np.sqrt((resid @ resid) / (n - 2) / sxx)) if n > 2 else math.nan
    return slope, stderr


@dataclass
class SNRReport:
    rows: list[SNRRow] = field(default_factory=list)

    def filter(self, **kw) -> list[SNRRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in kw.items())]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for r in self.rows:
                w.writerow(r.csv_values())


def snr_sweep(
    model: TractableGaussianModel,
    families,
    m_grid,
    k_grid,
    n_samples: int,
    seed: int,
    beta: float = 0.5,
) -> SNRReport:
    """Full factorial sweep with log-log scaling fits.

    For each (family, group): the K-exponent is fitted per M across the
    K >= 4 grid points and stamped onto that M's rows; the M-exponent is
    fitted per K across all M points and stamped onto that K's rows.
    Slopes are only reported when n_samples >= 1000 (below that the SNR
    estimates themselves are too noisy for a meaningful exponent).
    In every family the (M, K) pair shapes the weight matrix; ``iwae``
    rows with M > 1 therefore measure its M-group generalization (the
    same estimator ``miwae`` names).
    """
    m_grid = sorted(int(m) for m in m_grid)
    k_grid = sorted(int(k) for k in k_grid)
    report = SNRReport()
    for family in families:
        if family not in SNR_FAMILIES:
            raise ValueError(f"unknown family {family!r}")
        for group in ("phi", "theta"):
            rows = {}
            for mi, m_groups in enumerate(m_grid):
                for ki, k_samples in enumerate(k_grid):
                    cfg_seed = _point_seed(seed, family, group, mi, ki)
                    rows[(m_groups, k_samples)] = snr_estimate(
                        model, family, group, m_groups, k_samples, n_samples,
                        cfg_seed, beta=beta,
                    )
            fit_slopes = n_samples >= MIN_SAMPLES_FOR_SLOPE
            for m_groups in m_grid:
                ks = [k for k in k_grid if k >= SLOPE_FIT_MIN_K]
                if fit_slopes and len(ks) >= MIN_FIT_POINTS:
                    slope, err = fit_loglog_slope(ks, [rows[(m_groups, k)].snr_median for k in ks])
                    for k in k_grid:
                        rows[(m_groups, k)].slope_K = slope
                        rows[(m_groups, k)].slope_K_stderr = err
            for k_samples in k_grid:
                if fit_slopes and len(m_grid) >= MIN_FIT_POINTS:
                    slope, err = fit_loglog_slope(
                        m_grid, [rows[(m, k_samples)].snr_median for m in m_grid]
                    )
                    for m in m_grid:
                        rows[(m, k_samples)].slope_M = slope
                        rows[(m, k_samples)].slope_M_stderr = err
            report.rows.extend(rows[(m, k)] for m in m_grid for k in k_grid)
    return report


def _point_seed(seed: int, family: str, group: str, mi: int, ki: int) -> int:
    base = SNR_FAMILIES.index(family) * 2 + ("phi", "theta").index(group)
    return (seed * 1_000_003 + base * 10_007 + mi * 101 + ki) % (2**63)
