"""Occupancy-model domain types and the encounter-history likelihood.

Data model: a detection/non-detection array ``y[i, t, j]`` over sites i,
primary occasions t (years) and secondary occasions j (visits within a
year), with an explicit survey mask ``g[i, t, j]`` (1 = surveyed).
Missingness lives in the mask, never as a sentinel inside ``y``.

The occupancy state z[i, t] ~ Bernoulli(psi[i, t]) with
logit(psi) = x·beta + omega_i + eta_t; detections y ~ Bernoulli(z * p)
with logit(p) = v·alpha. The marginal likelihood sums, per site-year,
over both states when the species was never detected there.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, NumericalError, UsageError

# Probabilities are clamped before logs so degenerate coefficients cannot
# produce log(0) in the never-detected branch.
PROB_EPS = 1e-12


def clamped_logistic(x):
    """Logistic function clipped to [PROB_EPS, 1 - PROB_EPS]."""
    with np.errstate(over="ignore"):
        out = 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))
    return np.clip(out, PROB_EPS, 1.0 - PROB_EPS)


@dataclass(frozen=True)
class EncounterArray:
    """Detection history array with survey mask.

    y : uint8 array, shape (I, T, J), values in {0, 1}; must be 0 wherever
        g is 0 so that equality tests and hashing are well defined.
    g : uint8 array, shape (I, T, J), 1 where the cell was surveyed.
    """

    y: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        y = np.ascontiguousarray(self.y, dtype=np.uint8)
        g = np.ascontiguousarray(self.g, dtype=np.uint8)
        if y.ndim != 3 or g.shape != y.shape:
            raise UsageError(f"y and g must be 3-D with equal shape, got {y.shape} vs {g.shape}")
        if min(y.shape) < 1:
            raise UsageError(f"all dimensions must be positive, got {y.shape}")
        if not np.isin(y, (0, 1)).all() or not np.isin(g, (0, 1)).all():
            raise UsageError("y and g entries must be 0 or 1")
        if np.any((y == 1) & (g == 0)):
            i, t, j = np.argwhere((y == 1) & (g == 0))[0]
            raise DataError(f"detection recorded at unsurveyed cell (site={i}, primary={t}, secondary={j})")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "g", g)

    @property
    def I(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @property
    def J(self) -> int:
        return self.y.shape[2]

    def any_detection(self) -> np.ndarray:
        """Boolean (I, T): site-years with at least one detection."""
        return (self.y == 1).any(axis=2)

    def any_survey(self) -> np.ndarray:
        """Boolean (I, T): site-years with at least one surveyed occasion."""
        return (self.g == 1).any(axis=2)

    def to_csv(self, path, header_path=None, coordinate_columns=("x", "y")):
        """Write long-format CSV (site_id, primary, secondary, y; empty y = missing).

        A sidecar JSON header records dimensions and the coordinate column
        names used by the companion coords file.
        """
        path = Path(path)
        header_path = Path(header_path) if header_path else path.with_name(path.stem + "_header.json")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["site_id", "primary", "secondary", "y"])
            for i in range(self.I):
                for t in range(self.T):
                    for j in range(self.J):
                        val = str(int(self.y[i, t, j])) if self.g[i, t, j] else ""
                        w.writerow([i, t, j, val])
        header = {"I": self.I, "T": self.T, "J": self.J, "coordinate_columns": list(coordinate_columns)}
        header_path.write_text(json.dumps(header, sort_keys=True, indent=2) + "\n")
        return path, header_path

    @classmethod
    def from_csv(cls, path, header_path=None) -> "EncounterArray":
        path = Path(path)
        header_path = Path(header_path) if header_path else path.with_name(path.stem + "_header.json")
        if not header_path.exists():
            raise DataError(f"missing sidecar header {header_path}")
        header = json.loads(header_path.read_text())
        I, T, J = header["I"], header["T"], header["J"]
        y = np.zeros((I, T, J), dtype=np.uint8)
        g = np.zeros((I, T, J), dtype=np.uint8)
        with open(path, newline="") as fh:
            rd = csv.DictReader(fh)
            for row in rd:
                i, t, j = int(row["site_id"]), int(row["primary"]), int(row["secondary"])
                if row["y"] != "":
                    g[i, t, j] = 1
                    y[i, t, j] = int(row["y"])
        return cls(y=y, g=g)


@dataclass(frozen=True)
class Covariates:
    """Design rows for the occupancy and detection regressions.

    occ_design : float array (I, T, K_beta); first column is the intercept.
    det_design : float array (I, T, J, K_alpha); NaN allowed only at
                 unsurveyed cells (validated against a mask).
    """

    occ_design: np.ndarray
    det_design: np.ndarray

    def __post_init__(self):
        occ = np.ascontiguousarray(self.occ_design, dtype=float)
        det = np.ascontiguousarray(self.det_design, dtype=float)
        if occ.ndim != 3 or det.ndim != 4:
            raise UsageError(f"occ_design must be 3-D and det_design 4-D, got {occ.ndim}-D / {det.ndim}-D")
        if occ.shape[:2] != det.shape[:2]:
            raise UsageError(f"occupancy/detection designs disagree on (I, T): {occ.shape} vs {det.shape}")
        if not np.isfinite(occ).all():
            raise UsageError("occ_design must be finite everywhere")
        object.__setattr__(self, "occ_design", occ)
        object.__setattr__(self, "det_design", det)

    @property
    def k_beta(self) -> int:
        return self.occ_design.shape[2]

    @property
    def k_alpha(self) -> int:
        return self.det_design.shape[3]

    def validate_against(self, data: EncounterArray):
        """Check shape agreement and that NaN det rows occur only off-mask."""
        if self.occ_design.shape[:2] != (data.I, data.T) or self.det_design.shape[:3] != (data.I, data.T, data.J):
            raise UsageError(
                f"covariate shapes {self.occ_design.shape}/{self.det_design.shape} "
                f"do not match data ({data.I}, {data.T}, {data.J})"
            )
        bad = ~np.isfinite(self.det_design).all(axis=3) & (data.g == 1)
        if bad.any():
            i, t, j = np.argwhere(bad)[0]
            raise DataError(f"missing detection covariate at surveyed cell (site={i}, primary={t}, secondary={j})")


@dataclass(frozen=True)
class ModelParams:
    """Generative parameters; logit-scale coefficients with intercepts first."""

    beta: np.ndarray
    alpha: np.ndarray
    phi: float
    sigma2: float
    rho: float
    sigma2T: float

    def __post_init__(self):
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))
        object.__setattr__(self, "alpha", np.atleast_1d(np.asarray(self.alpha, dtype=float)))
        if not (np.isfinite(self.beta).all() and np.isfinite(self.alpha).all()):
            raise UsageError("beta and alpha must be finite")
        if not self.phi > 0:
            raise UsageError(f"phi must be > 0, got {self.phi}")
        if not self.sigma2 > 0:
            raise UsageError(f"sigma2 must be > 0, got {self.sigma2}")
        if not self.sigma2T > 0:
            raise UsageError(f"sigma2T must be > 0, got {self.sigma2T}")
        if not -1.0 < self.rho < 1.0:
            raise UsageError(f"rho must lie in (-1, 1), got {self.rho}")

    def to_dict(self) -> dict:
        return {
            "beta": [float(b) for b in self.beta],
            "alpha": [float(a) for a in self.alpha],
            "phi": float(self.phi),
            "sigma2": float(self.sigma2),
            "rho": float(self.rho),
            "sigma2T": float(self.sigma2T),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        return cls(
            beta=np.asarray(d["beta"], dtype=float),
            alpha=np.asarray(d["alpha"], dtype=float),
            phi=float(d["phi"]),
            sigma2=float(d["sigma2"]),
            rho=float(d["rho"]),
            sigma2T=float(d["sigma2T"]),
        )


@dataclass(frozen=True)
class RandomEffects:
    """Spatial effect per site (omega) and temporal effect per year (eta)."""

    omega: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        omega = np.atleast_1d(np.asarray(self.omega, dtype=float))
        eta = np.atleast_1d(np.asarray(self.eta, dtype=float))
        if not (np.isfinite(omega).all() and np.isfinite(eta).all()):
            raise UsageError("random effects must be finite")
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "eta", eta)


@dataclass(frozen=True)
class LatentStates:
    """True occupancy states and the probabilities that generated them.

    p is NaN at unsurveyed cells (no detection process realized there).
    """

    z: np.ndarray
    psi: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        z = np.ascontiguousarray(self.z, dtype=np.uint8)
        psi = np.asarray(self.psi, dtype=float)
        p = np.asarray(self.p, dtype=float)
        if z.shape != psi.shape or p.shape[:2] != z.shape:
            raise UsageError("z, psi, p shapes inconsistent")
        if not np.isin(z, (0, 1)).all():
            raise UsageError("z entries must be 0 or 1")
        if np.any((psi <= 0) | (psi >= 1)):
            raise UsageError("psi must lie strictly in (0, 1)")
        finite_p = p[np.isfinite(p)]
        if np.any((finite_p <= 0) | (finite_p >= 1)):
            raise UsageError("p must lie strictly in (0, 1) where defined")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "p", p)

    def check_consistency(self, data: EncounterArray):
        """z must be 1 at every site-year with a detection."""
        viol = data.any_detection() & (self.z == 0)
        if viol.any():
            i, t = np.argwhere(viol)[0]
            raise DataError(f"z=0 at site-year with detection (site={i}, primary={t})")


def occupancy_probability(occ_row, beta, omega_i: float, eta_t: float) -> float:
    """Occupancy probability for one site-year: logistic(x·beta + omega + eta)."""
    occ_row = np.atleast_1d(np.asarray(occ_row, dtype=float))
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if occ_row.shape != beta.shape:
        raise UsageError(f"design row length {occ_row.size} != beta length {beta.size}")
    if not (np.isfinite(occ_row).all() and np.isfinite(beta).all() and np.isfinite([omega_i, eta_t]).all()):
        raise UsageError("occupancy_probability inputs must be finite")
    return float(clamped_logistic(occ_row @ beta + omega_i + eta_t))


def detection_probability(det_row, alpha) -> float:
    """Per-visit detection probability: logistic(v·alpha)."""
    det_row = np.atleast_1d(np.asarray(det_row, dtype=float))
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    if det_row.shape != alpha.shape:
        raise UsageError(f"design row length {det_row.size} != alpha length {alpha.size}")
    return float(clamped_logistic(det_row @ alpha))


def occupancy_field(cov: Covariates, beta, effects: RandomEffects) -> np.ndarray:
    """Vectorized psi over all site-years: logistic(X·beta + omega_i + eta_t)."""
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if cov.k_beta != beta.size:
        raise UsageError(f"occ_design has {cov.k_beta} columns but beta has {beta.size}")
    lin = cov.occ_design @ beta + effects.omega[:, None] + effects.eta[None, :]
    return clamped_logistic(lin)


def detection_field(cov: Covariates, alpha) -> np.ndarray:
    """Vectorized p over all cells; NaN propagates where covariates are missing."""
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    if cov.k_alpha != alpha.size:
        raise UsageError(f"det_design has {cov.k_alpha} columns but alpha has {alpha.size}")
    lin = cov.det_design @ alpha
    out = clamped_logistic(lin)
    out[~np.isfinite(lin)] = np.nan
    return out


def _log_primary_occasion_probability(y_row, mask_row, psi_it, p_row):
    """Log probability of one site-year's encounter history.

    Detected at least once: log psi + sum over surveyed j of the Bernoulli
    log-density. Surveyed but never detected: both states possible,
    logaddexp(log psi + sum log(1-p), log(1-psi)). No survey: 0 (the history
    carries no information).
    """
    surveyed = mask_row == 1
    if not surveyed.any():
        return 0.0
    ys = y_row[surveyed].astype(float)
    ps = np.clip(p_row[surveyed], PROB_EPS, 1.0 - PROB_EPS)
    log_psi = np.log(psi_it)
    if ys.any():
        return log_psi + float(np.sum(ys * np.log(ps) + (1.0 - ys) * np.log1p(-ps)))
    return float(np.logaddexp(log_psi + np.sum(np.log1p(-ps)), np.log1p(-psi_it)))


def primary_occasion_probability(y_row, mask_row, psi_it: float, p_row) -> float:
    """Probability of one site-year's encounter history given psi and p."""
    y_row = np.atleast_1d(np.asarray(y_row))
    mask_row = np.atleast_1d(np.asarray(mask_row)).astype(np.uint8)
    p_row = np.atleast_1d(np.asarray(p_row, dtype=float))
    if y_row.shape != mask_row.shape or p_row.shape != y_row.shape:
        raise UsageError("y_row, mask_row, p_row must share one shape")
    if np.any((np.asarray(y_row) == 1) & (mask_row == 0)):
        raise DataError("detection recorded at unsurveyed occasion")
    if not 0.0 < psi_it < 1.0:
        raise UsageError(f"psi must lie in (0, 1), got {psi_it}")
    if np.any(~np.isfinite(p_row[mask_row == 1])):
        raise UsageError("p undefined at a surveyed occasion")
    return float(np.exp(_log_primary_occasion_probability(y_row, mask_row, psi_it, p_row)))


def marginal_log_likelihood(
    data: EncounterArray, cov: Covariates, params: ModelParams, effects: RandomEffects
) -> float:
    """Log likelihood of the encounter array with z marginalized out.

    Site-years factorize given the random effects, so the total is the sum
    of per-(i, t) log history probabilities; the detected/never-detected
    split is chosen per site-year by the branch above.
    """
    cov.validate_against(data)
    if effects.omega.size != data.I or effects.eta.size != data.T:
        raise UsageError(
            f"random-effect lengths ({effects.omega.size}, {effects.eta.size}) "
            f"do not match data ({data.I}, {data.T})"
        )
    psi = occupancy_field(cov, params.beta, effects)
    p = detection_field(cov, params.alpha)

    g = data.g == 1
    yf = data.y.astype(float)
    log_p = np.zeros_like(p)
    log_1mp = np.zeros_like(p)
    np.log(p, out=log_p, where=g)
    np.log1p(-p, out=log_1mp, where=g)

    det_ll = np.sum(np.where(g, yf * log_p + (1.0 - yf) * log_1mp, 0.0), axis=2)
    all_absent_ll = np.sum(np.where(g, log_1mp, 0.0), axis=2)

    any_det = data.any_detection()
    any_surv = data.any_survey()
    log_psi = np.log(psi)
    per_cell = np.where(
        any_det,
        log_psi + det_ll,
        np.logaddexp(log_psi + all_absent_ll, np.log1p(-psi)),
    )
    per_cell = np.where(any_surv, per_cell, 0.0)
    if not np.isfinite(per_cell).all():
        i, t = np.argwhere(~np.isfinite(per_cell))[0]
        raise NumericalError(f"non-finite likelihood term at (site={i}, primary={t})")
    return float(per_cell.sum())
