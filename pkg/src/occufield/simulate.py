"""Synthetic dataset generation for the study-scenario matrix.

Scenario identifiers map onto a sampling design and a covariate
combination:

  1-0  Bernoulli visits p=(1, 0.1, 0, 0, 0); occupancy X_it, detection v_itj
  1-1  as 1-0 with slow spatial decay (phi in {0.5, 1})
  2-0  Poisson(1.1) visits spread uniformly over occasions; same covariates
  2-1  Poisson; occupancy uses site latitude L_i, detection keeps v_itj
  2-2  Poisson; L_i on both sides (complete covariate overlap)
  2-3  Poisson; detection uses v_itj and L_i (partial overlap)
  3-1  Poisson counts placed on the occasions with the largest mid-season
       weights (phenology + observer preference), J=10
  3-2  3-1 restricted to a fixed mid-latitude observation spot holding 25%
       of sites; all other sites are never surveyed

Within a scenario, the 16 sub-scenarios are the Cartesian product of
low/high values of (phi, sigma2, rho, sigma2T).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np
from scipy.stats import rankdata

from .core import Covariates, EncounterArray, LatentStates, ModelParams, RandomEffects, detection_field, occupancy_field
from .errors import UsageError
from .fields import SiteCoords, SpatialSpec, TemporalSpec, sample_spatial_effects, sample_temporal_effects

SCENARIO_IDS = ("1-0", "1-1", "2-0", "2-1", "2-2", "2-3", "3-1", "3-2")

_DESIGN_BY_SCENARIO = {
    "1-0": "bernoulli",
    "1-1": "bernoulli",
    "2-0": "poisson",
    "2-1": "poisson",
    "2-2": "poisson",
    "2-3": "poisson",
    "3-1": "phenology",
    "3-2": "cluster",
}
_COVARIATES_BY_SCENARIO = {
    "1-0": ("X", "v"),
    "1-1": ("X", "v"),
    "2-0": ("X", "v"),
    "2-1": ("L", "v"),
    "2-2": ("L", "L"),
    "2-3": ("L", "v+L"),
    "3-1": ("L", "v+L"),
    "3-2": ("L", "v+L"),
}

BERNOULLI_P = (1.0, 0.1, 0.0, 0.0, 0.0)
POISSON_LAMBDA = 1.1
CLUSTER_FRACTION = 0.25

TRUE_BETA = (0.0, 0.5)
TRUE_ALPHA_SLOPE = -0.5
PHI_VALUES = {"default": (3.75, 15.0), "slow": (0.5, 1.0)}
SIGMA2_VALUES = (0.3, 1.5)
RHO_VALUES = (0.5, 0.9)
SIGMA2T_VALUES = (0.3, 1.5)


def default_dims(scenario_id: str):
    """Paper-scale dimensions: 1200 sites, 10 years; 5 occasions for
    studies 1-2 and 10 for study 3."""
    if scenario_id not in SCENARIO_IDS:
        raise UsageError(f"unknown scenario {scenario_id!r}; expected one of {SCENARIO_IDS}")
    return 1200, 10, 10 if scenario_id.startswith("3") else 5


def true_alpha(det_kind: str) -> tuple:
    n_slopes = {"v": 1, "L": 1, "v+L": 2}[det_kind]
    return (0.0,) + (TRUE_ALPHA_SLOPE,) * n_slopes


def sub_scenario_grid(scenario_id: str, det_kind: str = None):
    """The 16 (label, ModelParams) combinations for one scenario."""
    det_kind = det_kind or _COVARIATES_BY_SCENARIO[scenario_id][1]
    phis = PHI_VALUES["slow" if scenario_id == "1-1" else "default"]
    out = []
    for phi, s2, rho, s2t in product(phis, SIGMA2_VALUES, RHO_VALUES, SIGMA2T_VALUES):
        label = f"phi{phi:g}-sig{s2:g}-rho{rho:g}-tau{s2t:g}"
        out.append(
            (
                label,
                ModelParams(beta=TRUE_BETA, alpha=true_alpha(det_kind), phi=phi, sigma2=s2, rho=rho, sigma2T=s2t),
            )
        )
    return out


def resolve_sub_scenario(scenario_id: str, sub):
    """Map 'low' / 'high' / an index / a label to (label, ModelParams)."""
    grid = sub_scenario_grid(scenario_id)
    if sub == "low":
        return grid[0]
    if sub == "high":
        return grid[-1]
    if isinstance(sub, int):
        if not 0 <= sub < len(grid):
            raise UsageError(f"sub-scenario index {sub} out of range 0..{len(grid) - 1}")
        return grid[sub]
    for label, params in grid:
        if label == sub:
            return label, params
    raise UsageError(f"unknown sub-scenario {sub!r} for scenario {scenario_id}")


@dataclass(frozen=True)
class ScenarioSpec:
    """One fully-resolved simulation setting (scenario x sub-scenario x dims)."""

    study_scenario: str
    I: int
    T: int
    J: int
    params: ModelParams
    design_kind: str
    occ_covariate: str
    det_covariate: str
    lam: float = POISSON_LAMBDA
    bernoulli_p: tuple = BERNOULLI_P
    cluster_fraction: float = CLUSTER_FRACTION
    sub_label: str = ""

    def __post_init__(self):
        if self.study_scenario not in SCENARIO_IDS:
            raise UsageError(f"unknown scenario {self.study_scenario!r}")
        if self.design_kind not in ("bernoulli", "poisson", "phenology", "cluster"):
            raise UsageError(f"unknown design kind {self.design_kind!r}")
        if self.occ_covariate not in ("X", "L") or self.det_covariate not in ("v", "L", "v+L"):
            raise UsageError("invalid covariate kinds")
        if min(self.I, self.T, self.J) < 1:
            raise UsageError("dimensions must be positive")
        if not 0.0 < self.cluster_fraction < 1.0:
            raise UsageError("cluster_fraction must lie in (0, 1)")
        if self.design_kind == "bernoulli" and len(self.bernoulli_p) != self.J:
            object.__setattr__(self, "bernoulli_p", tuple(self.bernoulli_p[: self.J]))
            if len(self.bernoulli_p) != self.J:
                raise UsageError("bernoulli_p length must equal J")

    @classmethod
    def build(cls, scenario_id: str, sub="low", I=None, T=None, J=None) -> "ScenarioSpec":
        di, dt, dj = default_dims(scenario_id)
        label, params = resolve_sub_scenario(scenario_id, sub)
        occ_kind, det_kind = _COVARIATES_BY_SCENARIO[scenario_id]
        return cls(
            study_scenario=scenario_id,
            I=I or di,
            T=T or dt,
            J=J or dj,
            params=params,
            design_kind=_DESIGN_BY_SCENARIO[scenario_id],
            occ_covariate=occ_kind,
            det_covariate=det_kind,
            sub_label=label,
        )

    def to_dict(self):
        return {
            "study_scenario": self.study_scenario,
            "I": self.I,
            "T": self.T,
            "J": self.J,
            "params": self.params.to_dict(),
            "design_kind": self.design_kind,
            "occ_covariate": self.occ_covariate,
            "det_covariate": self.det_covariate,
            "lam": self.lam,
            "bernoulli_p": list(self.bernoulli_p),
            "cluster_fraction": self.cluster_fraction,
            "sub_label": self.sub_label,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["params"] = ModelParams.from_dict(d["params"])
        d["bernoulli_p"] = tuple(d["bernoulli_p"])
        return cls(**d)


@dataclass(frozen=True)
class SimulatedDataset:
    data: EncounterArray
    cov: Covariates
    coords: SiteCoords
    params: ModelParams
    effects: RandomEffects
    latent: LatentStates
    spec: ScenarioSpec
    seed: int = None


def latitude_covariate(coords: SiteCoords) -> np.ndarray:
    """Rank of the first coordinate, standardized to mean 0 and (population)
    sd 1; equal latitudes share a rank."""
    ranks = rankdata(coords.coords[:, 0], method="average")
    centered = ranks - ranks.mean()
    sd = centered.std()
    if sd == 0:
        return np.zeros_like(centered)
    return centered / sd


def generate_covariates(occ_kind: str, det_kind: str, I: int, T: int, J: int, coords: SiteCoords, rng) -> Covariates:
    """Fully random standard-normal X_it / v_itj, or the latitude gradient L_i."""
    if occ_kind not in ("X", "L") or det_kind not in ("v", "L", "v+L"):
        raise UsageError(f"invalid covariate kinds ({occ_kind!r}, {det_kind!r})")
    lat = latitude_covariate(coords) if (occ_kind == "L" or "L" in det_kind) else None
    ones_it = np.ones((I, T))
    if occ_kind == "X":
        occ = np.stack([ones_it, rng.standard_normal((I, T))], axis=2)
    else:
        occ = np.stack([ones_it, np.broadcast_to(lat[:, None], (I, T))], axis=2)
    ones_itj = np.ones((I, T, J))
    cols = [ones_itj]
    if "v" in det_kind:
        cols.append(rng.standard_normal((I, T, J)))
    if "L" in det_kind:
        cols.append(np.broadcast_to(lat[:, None, None], (I, T, J)))
    det = np.stack(cols, axis=3)
    return Covariates(occ_design=occ, det_design=det)


def design_bernoulli(I: int, T: int, J: int, p_vec, rng) -> np.ndarray:
    """Independent Bernoulli(p_j) survey indicator per cell."""
    p_vec = np.asarray(p_vec, dtype=float)
    if p_vec.shape != (J,):
        raise UsageError(f"p_vec must have length J={J}")
    if np.any((p_vec < 0) | (p_vec > 1)):
        raise UsageError("p_vec entries must lie in [0, 1]")
    return (rng.random((I, T, J)) < p_vec[None, None, :]).astype(np.uint8)


def _poisson_counts(I: int, T: int, J: int, lam: float, rng) -> np.ndarray:
    if not lam > 0:
        raise UsageError("lambda must be > 0")
    # clip, don't resample: P(D > J) is negligible at the study's intensity
    return np.minimum(rng.poisson(lam, size=(I, T)), J)


def design_poisson(I: int, T: int, J: int, lam: float, rng) -> np.ndarray:
    """Poisson(lam) visits per site-year, spread uniformly without
    replacement over the J occasions."""
    counts = _poisson_counts(I, T, J, lam, rng)
    ranks = np.argsort(rng.random((I, T, J)), axis=2).argsort(axis=2)
    return (ranks < counts[:, :, None]).astype(np.uint8)


def phenology_weights(J: int, rng, a: float = None) -> np.ndarray:
    """Mid-season occasion weights exp(A - ((j - J/2) / (J/4))^2) for
    1-based occasions j; A ~ N(0, 0.33) perturbs the whole curve."""
    if J < 2:
        raise UsageError("phenology weights need J >= 2")
    if a is None:
        a = float(rng.normal(0.0, 0.33))
    j = np.arange(1, J + 1, dtype=float)
    mu = J / 2.0
    sigma = J / 4.0
    return np.exp(a - ((j - mu) / sigma) ** 2)


def _phenology_ranks(T: int, J: int, rng) -> np.ndarray:
    """Per year, occasion rank by decreasing weight (ties to lower index)."""
    ranks = np.empty((T, J), dtype=np.int64)
    for t in range(T):
        w = phenology_weights(J, rng)
        order = np.lexsort((np.arange(J), -w))
        ranks[t, order] = np.arange(J)
    return ranks


def design_phenology(I: int, T: int, J: int, lam: float, rng) -> np.ndarray:
    """Poisson(lam) visits placed on the occasions with the largest
    mid-season weights; one weight draw per year, shared across sites."""
    if J < 2:
        raise UsageError("phenology design needs J >= 2")
    counts = _poisson_counts(I, T, J, lam, rng)
    ranks = _phenology_ranks(T, J, rng)
    return (ranks[None, :, :] < counts[:, :, None]).astype(np.uint8)


def cluster_spot(I: int, fraction: float, coords: SiteCoords, rng) -> np.ndarray:
    """Indices of the ceil(fraction * I) sites with the largest mid-latitude
    weights exp(A - ((r - I/2) / (I/2))^2) over latitude ranks r.

    The shared A shifts all weights equally, so the spot is a deterministic
    function of the latitude ordering; it is drawn once and reused for
    every year (a fixed observation spot).
    """
    if not 0.0 < fraction < 1.0:
        raise UsageError("fraction must lie in (0, 1)")
    order = np.lexsort((np.arange(I), coords.coords[:, 0]))
    ranks = np.empty(I, dtype=float)
    ranks[order] = np.arange(1, I + 1)
    a = float(rng.normal(0.0, 0.33))
    weights = np.exp(a - ((ranks - I / 2.0) / (I / 2.0)) ** 2)
    n_spot = int(np.ceil(fraction * I))
    return np.sort(np.lexsort((np.arange(I), -weights))[:n_spot])


def design_cluster(I: int, T: int, J: int, lam: float, fraction: float, coords: SiteCoords, rng) -> np.ndarray:
    """Phenology design restricted to a fixed mid-latitude observation spot;
    sites outside the spot have fully missing histories."""
    spot = cluster_spot(I, fraction, coords, rng)
    g = design_phenology(I, T, J, lam, rng)
    mask = np.zeros(I, dtype=bool)
    mask[spot] = True
    g[~mask] = 0
    return g


def _design_mask(spec: ScenarioSpec, coords: SiteCoords, rng) -> np.ndarray:
    if spec.design_kind == "bernoulli":
        return design_bernoulli(spec.I, spec.T, spec.J, spec.bernoulli_p, rng)
    if spec.design_kind == "poisson":
        return design_poisson(spec.I, spec.T, spec.J, spec.lam, rng)
    if spec.design_kind == "phenology":
        return design_phenology(spec.I, spec.T, spec.J, spec.lam, rng)
    return design_cluster(spec.I, spec.T, spec.J, spec.lam, spec.cluster_fraction, coords, rng)


def simulate_dataset(spec: ScenarioSpec, rng_or_seed) -> SimulatedDataset:
    """Generate one dataset: lattice coords -> covariates -> spatial and
    temporal effects -> psi -> z -> p -> survey mask -> y."""
    if isinstance(rng_or_seed, np.random.Generator):
        rng, seed = rng_or_seed, None
    else:
        seed = int(rng_or_seed)
        rng = np.random.default_rng(seed)
    coords = SiteCoords.unit_lattice(spec.I)
    cov = generate_covariates(spec.occ_covariate, spec.det_covariate, spec.I, spec.T, spec.J, coords, rng)
    omega = sample_spatial_effects(coords, SpatialSpec(spec.params.phi, spec.params.sigma2), rng)
    eta = sample_temporal_effects(spec.T, TemporalSpec(spec.params.rho, spec.params.sigma2T), rng)
    effects = RandomEffects(omega=omega, eta=eta)
    psi = occupancy_field(cov, spec.params.beta, effects)
    z = (rng.random((spec.I, spec.T)) < psi).astype(np.uint8)
    p_full = detection_field(cov, spec.params.alpha)
    g = _design_mask(spec, coords, rng)
    y = ((rng.random((spec.I, spec.T, spec.J)) < p_full) & (z[:, :, None] == 1) & (g == 1)).astype(np.uint8)
    p_truth = np.where(g == 1, p_full, np.nan)
    latent = LatentStates(z=z, psi=psi, p=p_truth)
    data = EncounterArray(y=y, g=g)
    latent.check_consistency(data)
    return SimulatedDataset(
        data=data, cov=cov, coords=coords, params=spec.params, effects=effects, latent=latent, spec=spec, seed=seed
    )


def poisson_design_report(lam: float = POISSON_LAMBDA, T: int = 10, J: int = 5) -> dict:
    """Analytic gap probabilities of the Poisson design."""
    if not lam > 0:
        raise UsageError("lambda must be > 0")
    from scipy.stats import poisson as poisson_dist

    p_zero = float(np.exp(-lam))
    return {
        "lambda": lam,
        "p_zero_visits_year": p_zero,
        "p_zero_visits_all_years": p_zero**T,
        "p_count_truncated": float(poisson_dist.sf(J, lam)),
        "mean_visits_per_site_year": lam,
    }
