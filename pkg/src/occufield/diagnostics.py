"""Identifiability assessment and occupancy/detection summaries.

Estimator error (MSE), bias curves of estimated vs true occupancy,
2-D kernel density surfaces over parameter-pair point estimates,
prior-posterior overlap, and the trend summaries used on empirical fits.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import EncounterArray, clamped_logistic
from .errors import DataError, DataIntegrityWarning, UsageError

PPO_NODES = 2048
PPO_REPORTING_LINE = 30.0  # reporting heuristic, tagged but never enforced


def mse(estimates, truths) -> float:
    """Mean squared elementwise difference."""
    estimates = np.asarray(estimates, dtype=float)
    truths = np.asarray(truths, dtype=float)
    if estimates.shape != truths.shape:
        raise UsageError(f"shape mismatch {estimates.shape} vs {truths.shape}")
    return float(np.mean((estimates - truths) ** 2))


@dataclass(frozen=True)
class BinnedBias:
    """Equal-width bins of true occupancy with per-bin estimate means."""

    edges: np.ndarray
    mean_estimate: np.ndarray   # NaN where a bin is empty
    mean_truth: np.ndarray
    count: np.ndarray

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def empty(self) -> np.ndarray:
        return self.count == 0


def bias_curve(psi_hat, psi_true, n_bins: int = 20) -> BinnedBias:
    """Bin true psi on [0, 1]; report mean estimated psi per bin."""
    if n_bins < 2:
        raise UsageError("n_bins must be >= 2")
    psi_hat = np.asarray(psi_hat, dtype=float).ravel()
    psi_true = np.asarray(psi_true, dtype=float).ravel()
    if psi_hat.shape != psi_true.shape:
        raise UsageError("psi_hat and psi_true must have equal shapes")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip(np.digitize(psi_true, edges[1:-1]), 0, n_bins - 1)
    count = np.bincount(idx, minlength=n_bins)
    sum_est = np.bincount(idx, weights=psi_hat, minlength=n_bins)
    sum_tru = np.bincount(idx, weights=psi_true, minlength=n_bins)
    with np.errstate(invalid="ignore"):
        mean_est = np.where(count > 0, sum_est / np.maximum(count, 1), np.nan)
        mean_tru = np.where(count > 0, sum_tru / np.maximum(count, 1), np.nan)
    return BinnedBias(edges=edges, mean_estimate=mean_est, mean_truth=mean_tru, count=count)


@dataclass(frozen=True)
class DensityGrid:
    x_grid: np.ndarray
    y_grid: np.ndarray
    density: np.ndarray          # (len(x_grid), len(y_grid)), >= 0
    bandwidths: tuple

    def __post_init__(self):
        if np.any(np.diff(self.x_grid) <= 0) or np.any(np.diff(self.y_grid) <= 0):
            raise UsageError("grids must be strictly increasing")
        if np.any(self.density < 0):
            raise UsageError("density must be non-negative")
        if not (self.bandwidths[0] > 0 and self.bandwidths[1] > 0):
            raise UsageError("bandwidths must be positive")

    def argmax_point(self):
        ix, iy = np.unravel_index(np.argmax(self.density), self.density.shape)
        return float(self.x_grid[ix]), float(self.y_grid[iy])

    def mass_deciles(self) -> np.ndarray:
        """Decile cut points of positive density mass (contour levels)."""
        pos = np.sort(self.density[self.density > 0].ravel())
        if pos.size == 0:
            return np.zeros(9)
        return np.quantile(pos, np.linspace(0.1, 0.9, 9))


def _reference_bandwidth(values: np.ndarray) -> float:
    """Normal-reference rule 1.06 * min(sd, IQR/1.349) * n^(-1/5); when more
    than half the points tie (IQR 0) the sd alone sets the scale."""
    n = values.size
    sd = values.std(ddof=1)
    q75, q25 = np.percentile(values, [75, 25])
    iqr = q75 - q25
    spread = min(sd, iqr / 1.349) if iqr > 0 else sd
    return 1.06 * spread * n ** (-0.2)


def kde2d(points, grid_n: int = 128) -> DensityGrid:
    """Product-Gaussian kernel density on a grid spanning the data range
    padded by one bandwidth per axis."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise UsageError(f"points must be (n, 2), got {pts.shape}")
    if pts.shape[0] < 2:
        raise DataError("kde2d needs at least 2 points")
    if grid_n < 2:
        raise UsageError("grid_n must be >= 2")
    x, y = pts[:, 0], pts[:, 1]
    if x.std() == 0 or y.std() == 0:
        raise DataError("degenerate data: zero spread on an axis")
    hx, hy = _reference_bandwidth(x), _reference_bandwidth(y)
    x_grid = np.linspace(x.min() - hx, x.max() + hx, grid_n)
    y_grid = np.linspace(y.min() - hy, y.max() + hy, grid_n)
    kx = np.exp(-0.5 * ((x_grid[:, None] - x[None, :]) / hx) ** 2) / (hx * np.sqrt(2.0 * np.pi))
    ky = np.exp(-0.5 * ((y_grid[:, None] - y[None, :]) / hy) ** 2) / (hy * np.sqrt(2.0 * np.pi))
    density = kx @ ky.T / pts.shape[0]
    return DensityGrid(x_grid=x_grid, y_grid=y_grid, density=density, bandwidths=(hx, hy))


def prior_posterior_overlap(prior, draws) -> float:
    """Integrated min(prior density, posterior KDE density) in percent.

    Quadrature runs on 2048 equally spaced nodes over the prior's support
    (its 0.9999 central interval when the support is unbounded, widened to
    cover the draws). High overlap means the data barely moved the prior.
    """
    draws = np.asarray(draws, dtype=float).ravel()
    if draws.size < 100:
        raise UsageError("prior_posterior_overlap needs at least 100 draws")
    s_lo, s_hi = prior.support
    if np.any((draws < s_lo) | (draws > s_hi)):
        warnings.warn("posterior draws fall outside the prior support", DataIntegrityWarning, stacklevel=2)
    h = _reference_bandwidth(draws)
    if h <= 0:
        raise DataError("degenerate posterior draws (zero spread)")
    i_lo, i_hi = prior.interval(0.9999)
    lo = max(s_lo, min(i_lo, draws.min() - 3.0 * h))
    hi = min(s_hi, max(i_hi, draws.max() + 3.0 * h))
    x = np.linspace(lo, hi, PPO_NODES)
    post = np.exp(-0.5 * ((x[:, None] - draws[None, :]) / h) ** 2).sum(axis=1) / (
        draws.size * h * np.sqrt(2.0 * np.pi)
    )
    overlap = np.trapezoid(np.minimum(prior.pdf(x), post), x)
    return float(np.clip(overlap * 100.0, 0.0, 100.0))


@dataclass(frozen=True)
class OccupancySummaries:
    """Posterior mean and central 95% band of site means (over years) and
    year means (over sites) of psi."""

    site_mean: np.ndarray
    site_lo: np.ndarray
    site_hi: np.ndarray
    year_mean: np.ndarray
    year_lo: np.ndarray
    year_hi: np.ndarray


def occupancy_summaries(samples) -> OccupancySummaries:
    if samples.psi is None:
        raise UsageError("samples carry no psi draws")
    psi = samples.psi.reshape(-1, *samples.psi.shape[2:])  # (draws, I, T)
    site = psi.mean(axis=2)
    year = psi.mean(axis=1)
    return OccupancySummaries(
        site_mean=site.mean(axis=0),
        site_lo=np.quantile(site, 0.025, axis=0),
        site_hi=np.quantile(site, 0.975, axis=0),
        year_mean=year.mean(axis=0),
        year_lo=np.quantile(year, 0.025, axis=0),
        year_hi=np.quantile(year, 0.975, axis=0),
    )


def naive_occupancy(data: EncounterArray) -> np.ndarray:
    """Per-year share of sampled sites with a detection; NaN flags years
    with no sampled site."""
    sampled = data.g.any(axis=2)
    detected = (data.y == 1).any(axis=2)
    n_sampled = sampled.sum(axis=0).astype(float)
    n_detected = detected.sum(axis=0).astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(n_sampled > 0, n_detected / n_sampled, np.nan)
    return out


@dataclass(frozen=True)
class TrendCurve:
    grid_index: np.ndarray
    mean: np.ndarray
    lo: np.ndarray
    hi: np.ndarray


def detection_curve(samples, month_grid) -> TrendCurve:
    """Detection probability across month design rows, per retained draw."""
    month_grid = np.atleast_2d(np.asarray(month_grid, dtype=float))
    if month_grid.shape[1] != samples.alpha.shape[2]:
        raise UsageError(
            f"month rows have {month_grid.shape[1]} columns but alpha has {samples.alpha.shape[2]}"
        )
    alpha = samples.alpha.reshape(-1, samples.alpha.shape[2])
    p = clamped_logistic(alpha @ month_grid.T)  # (draws, M)
    return TrendCurve(
        grid_index=np.arange(month_grid.shape[0]),
        mean=p.mean(axis=0),
        lo=np.quantile(p, 0.025, axis=0),
        hi=np.quantile(p, 0.975, axis=0),
    )


@dataclass
class RunSummary:
    """One replicate's fit digest used by the study aggregator."""

    study_scenario: str
    sub_label: str
    replicate: int
    posterior_means: dict
    interval_lo: dict
    interval_hi: dict
    rhat: dict
    mse_psi: float
    mse_phi: float
    mse_rho: float

    def __post_init__(self):
        for v in (self.mse_psi, self.mse_phi, self.mse_rho):
            if v is not None and v < 0:
                raise UsageError("MSE must be non-negative")

    @classmethod
    def from_fit(cls, samples, truth_params, truth_psi, scenario: str, sub_label: str, replicate: int):
        means, lo, hi, rhat = {}, {}, {}, {}
        for name in samples.scalar_parameter_names():
            arr = samples.parameter_array(name)
            flat = arr.ravel()
            means[name] = float(flat.mean())
            lo[name] = float(np.quantile(flat, 0.025))
            hi[name] = float(np.quantile(flat, 0.975))
            if samples.n_chains >= 2 and samples.n_draws >= 10:
                from .convergence import gelman_rubin

                rhat[name] = gelman_rubin(arr)
        mse_psi = mse(samples.psi_mean(), truth_psi) if truth_psi is not None else None
        mse_phi = (means["phi"] - truth_params.phi) ** 2 if truth_params is not None else None
        mse_rho = (means["rho"] - truth_params.rho) ** 2 if truth_params is not None else None
        return cls(
            study_scenario=scenario,
            sub_label=sub_label,
            replicate=replicate,
            posterior_means=means,
            interval_lo=lo,
            interval_hi=hi,
            rhat=rhat,
            mse_psi=mse_psi,
            mse_phi=mse_phi,
            mse_rho=mse_rho,
        )

    def to_row(self) -> dict:
        row = {
            "study": self.study_scenario.split("-")[0],
            "scenario": self.study_scenario,
            "sub_scenario": self.sub_label,
            "replicate": self.replicate,
            "mse_psi": self.mse_psi,
            "mse_phi": self.mse_phi,
            "mse_rho": self.mse_rho,
        }
        for k, v in self.posterior_means.items():
            row[f"mean_{k}"] = v
        for k, v in self.interval_lo.items():
            row[f"q2.5_{k}"] = v
        for k, v in self.interval_hi.items():
            row[f"q97.5_{k}"] = v
        for k, v in self.rhat.items():
            row[f"rhat_{k}"] = v
        return row


def _write_rows(path, rows, fieldnames=None):
    rows = list(rows)
    if fieldnames is None:
        fieldnames = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return Path(path)


def write_mse_table(path, summaries):
    cols = ["study", "scenario", "sub_scenario", "replicate", "mse_psi", "mse_phi", "mse_rho"]
    rows = [{c: s.to_row()[c] for c in cols} for s in summaries]
    return _write_rows(path, rows, cols)


def write_pair_density(out_dir, name1: str, name2: str, grid: DensityGrid):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    safe1 = name1.replace("[", "").replace("]", "")
    safe2 = name2.replace("[", "").replace("]", "")
    path = out_dir / f"pair_density_{safe1}_{safe2}.csv"
    rows = []
    for ix, xv in enumerate(grid.x_grid):
        for iy, yv in enumerate(grid.y_grid):
            rows.append({"x": repr(float(xv)), "y": repr(float(yv)), "density": repr(float(grid.density[ix, iy]))})
    return _write_rows(path, rows, ["x", "y", "density"])


def write_ppo(path, entries):
    """entries: iterable of (parameter_name, ppo_percent)."""
    rows = [
        {"parameter": name, "ppo_percent": val, "above_30": bool(val >= PPO_REPORTING_LINE)}
        for name, val in entries
    ]
    return _write_rows(path, rows, ["parameter", "ppo_percent", "above_30"])


def write_trends(path, year_summary: OccupancySummaries = None, naive=None, detection: TrendCurve = None):
    rows = []
    if year_summary is not None:
        for t, (m, lo, hi) in enumerate(zip(year_summary.year_mean, year_summary.year_lo, year_summary.year_hi)):
            rows.append({"series": "psi_year", "index": t, "mean": m, "lo": lo, "hi": hi})
        for i, (m, lo, hi) in enumerate(zip(year_summary.site_mean, year_summary.site_lo, year_summary.site_hi)):
            rows.append({"series": "psi_site", "index": i, "mean": m, "lo": lo, "hi": hi})
    if naive is not None:
        for t, v in enumerate(naive):
            rows.append({"series": "naive_year", "index": t, "mean": v if np.isfinite(v) else "", "lo": "", "hi": ""})
    if detection is not None:
        for g, m, lo, hi in zip(detection.grid_index, detection.mean, detection.lo, detection.hi):
            rows.append({"series": "detection_month", "index": int(g), "mean": m, "lo": lo, "hi": hi})
    return _write_rows(path, rows, ["series", "index", "mean", "lo", "hi"])


def render_bias_curve(psi_hat, psi_true, binned: BinnedBias, path):
    """Raw estimate/truth pairs plus binned means, as a static SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot(np.ravel(psi_true), np.ravel(psi_hat), ".", ms=1.5, alpha=0.25, color="#4477aa")
    ok = ~binned.empty
    ax.plot(binned.midpoints[ok], binned.mean_estimate[ok], "o-", color="#cc3311", label="binned mean")
    ax.plot([0, 1], [0, 1], "--", color="grey", lw=1)
    ax.set_xlabel("true occupancy")
    ax.set_ylabel("estimated occupancy")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)


def render_pair_density(grid: DensityGrid, path, truth=None, labels=("param 1", "param 2")):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 4))
    levels = np.unique(grid.mass_deciles())
    if levels.size >= 2:
        ax.contourf(grid.x_grid, grid.y_grid, grid.density.T, levels=np.append(levels, grid.density.max()), cmap="viridis")
    else:
        ax.pcolormesh(grid.x_grid, grid.y_grid, grid.density.T, cmap="viridis")
    if truth is not None:
        ax.plot([truth[0]], [truth[1]], "r+", ms=12, mew=2)
    ax.set_xlabel(labels[0])
    ax.set_ylabel(labels[1])
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)


def render_trends(year_summary: OccupancySummaries, naive, path, detection: TrendCurve = None):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n_panels = 2 if detection is not None else 1
    fig, axes = plt.subplots(1, n_panels, figsize=(4.5 * n_panels, 3.5), squeeze=False)
    ax = axes[0, 0]
    t = np.arange(year_summary.year_mean.size)
    ax.fill_between(t, year_summary.year_lo, year_summary.year_hi, alpha=0.3, color="#4477aa")
    ax.plot(t, year_summary.year_mean, "-o", color="#4477aa", label="estimated")
    if naive is not None:
        ax.plot(t, naive, "s--", color="#cc3311", label="naive")
    ax.set_xlabel("year")
    ax.set_ylabel("occupancy")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False)
    if detection is not None:
        ax2 = axes[0, 1]
        ax2.fill_between(detection.grid_index, detection.lo, detection.hi, alpha=0.3, color="#4477aa")
        ax2.plot(detection.grid_index, detection.mean, "-o", color="#4477aa")
        ax2.set_xlabel("month")
        ax2.set_ylabel("detection probability")
        ax2.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)
