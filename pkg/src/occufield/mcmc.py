"""Bayesian inference for the occupancy model with NNGP + AR(1) effects.

`fit` runs per-chain compiled Gibbs sweeps (see _engine) targeting the
posterior of (beta, alpha, omega, eta, z, phi, sigma2, rho, sigma2T);
`predict` kriges the spatial effect to new sites draw by draw.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from . import _engine
from .core import Covariates, EncounterArray, clamped_logistic
from .errors import DataError, NumericalError, UsageError
from .fields import NeighborGraph, SiteCoords, build_neighbor_graph
from .convergence import effective_sample_size, gelman_rubin

_INIT_STEP = 0.5


@dataclass(frozen=True)
class NormalPrior:
    mean: float
    var: float

    def __post_init__(self):
        if not self.var > 0:
            raise UsageError("normal prior variance must be > 0")

    support = (-np.inf, np.inf)

    def pdf(self, x):
        return stats.norm.pdf(x, self.mean, np.sqrt(self.var))

    def interval(self, mass=0.9999):
        return stats.norm.interval(mass, self.mean, np.sqrt(self.var))

    def to_dict(self):
        return {"kind": "normal", "mean": self.mean, "var": self.var}


@dataclass(frozen=True)
class InverseGammaPrior:
    shape: float
    scale: float

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise UsageError("inverse-gamma shape and scale must be > 0")

    support = (0.0, np.inf)

    def pdf(self, x):
        return stats.invgamma.pdf(x, self.shape, scale=self.scale)

    def interval(self, mass=0.9999):
        q = (1.0 - mass) / 2.0
        return (
            float(stats.invgamma.ppf(q, self.shape, scale=self.scale)),
            float(stats.invgamma.ppf(1.0 - q, self.shape, scale=self.scale)),
        )

    def to_dict(self):
        return {"kind": "inverse_gamma", "shape": self.shape, "scale": self.scale}


@dataclass(frozen=True)
class UniformPrior:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise UsageError(f"uniform prior bounds must be ordered, got ({self.lo}, {self.hi})")

    @property
    def support(self):
        return (self.lo, self.hi)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where((x >= self.lo) & (x <= self.hi), 1.0 / (self.hi - self.lo), 0.0)

    def interval(self, mass=0.9999):
        return (self.lo, self.hi)

    def to_dict(self):
        return {"kind": "uniform", "lo": self.lo, "hi": self.hi}


def _prior_from_dict(d):
    kind = d["kind"]
    if kind == "normal":
        return NormalPrior(d["mean"], d["var"])
    if kind == "inverse_gamma":
        return InverseGammaPrior(d["shape"], d["scale"])
    if kind == "uniform":
        return UniformPrior(d["lo"], d["hi"])
    raise UsageError(f"unknown prior kind {kind!r}")


@dataclass(frozen=True)
class PriorSpec:
    """Independent priors for every top-level parameter."""

    beta: tuple
    alpha: tuple
    sigma2: InverseGammaPrior
    sigma2T: InverseGammaPrior
    phi: UniformPrior
    rho: UniformPrior = UniformPrior(-1.0, 1.0)

    @classmethod
    def default(cls, k_beta: int, k_alpha: int, coords: SiteCoords = None, phi_bounds=None) -> "PriorSpec":
        """Weak defaults: N(0, 2.72) coefficients, IG(2, 1) variances,
        phi uniform over effective ranges spanned by the observed distances
        (3/d_max, 3/d_min) unless explicit bounds are given."""
        if phi_bounds is None:
            if coords is None:
                raise UsageError("need coords or explicit phi_bounds for the default phi prior")
            d = coords.distance_matrix()
            pos = d[d > 0]
            if pos.size == 0:
                raise UsageError("phi prior needs at least two distinct sites")
            phi_bounds = (3.0 / float(pos.max()), 3.0 / float(pos.min()))
        return cls(
            beta=tuple(NormalPrior(0.0, 2.72) for _ in range(k_beta)),
            alpha=tuple(NormalPrior(0.0, 2.72) for _ in range(k_alpha)),
            sigma2=InverseGammaPrior(2.0, 1.0),
            sigma2T=InverseGammaPrior(2.0, 1.0),
            phi=UniformPrior(*phi_bounds),
        )

    def entry(self, name: str):
        """Marginal prior for a named scalar parameter, e.g. 'beta[1]', 'phi'."""
        if name.startswith("beta["):
            return self.beta[int(name[5:-1])]
        if name.startswith("alpha["):
            return self.alpha[int(name[6:-1])]
        try:
            return {"phi": self.phi, "rho": self.rho, "sigma2": self.sigma2, "sigma2T": self.sigma2T}[name]
        except KeyError:
            raise UsageError(f"no prior entry named {name!r}") from None

    def to_dict(self):
        return {
            "beta": [p.to_dict() for p in self.beta],
            "alpha": [p.to_dict() for p in self.alpha],
            "sigma2": self.sigma2.to_dict(),
            "sigma2T": self.sigma2T.to_dict(),
            "phi": self.phi.to_dict(),
            "rho": self.rho.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            beta=tuple(_prior_from_dict(p) for p in d["beta"]),
            alpha=tuple(_prior_from_dict(p) for p in d["alpha"]),
            sigma2=_prior_from_dict(d["sigma2"]),
            sigma2T=_prior_from_dict(d["sigma2T"]),
            phi=_prior_from_dict(d["phi"]),
            rho=_prior_from_dict(d["rho"]),
        )


@dataclass(frozen=True)
class MCMCConfig:
    n_chains: int = 3
    n_iter: int = 25000
    n_burn: int = 15000
    thin: int = 10
    batch_length: int = 100
    m_neighbors: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_chains < 1 or self.n_iter < 1:
            raise UsageError("n_chains and n_iter must be >= 1")
        if not 0 <= self.n_burn < self.n_iter:
            raise UsageError("need 0 <= n_burn < n_iter")
        if self.thin < 1 or self.batch_length < 1 or self.m_neighbors < 1:
            raise UsageError("thin, batch_length and m_neighbors must be >= 1")

    @property
    def retained_per_chain(self) -> int:
        return (self.n_iter - self.n_burn) // self.thin

    def to_dict(self):
        return {
            "n_chains": self.n_chains,
            "n_iter": self.n_iter,
            "n_burn": self.n_burn,
            "thin": self.thin,
            "batch_length": self.batch_length,
            "m_neighbors": self.m_neighbors,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass
class PosteriorSamples:
    """Per-chain post-burn, post-thinning draws of everything the model samples."""

    beta: np.ndarray      # (C, D, Kb)
    alpha: np.ndarray     # (C, D, Ka)
    phi: np.ndarray       # (C, D)
    sigma2: np.ndarray
    rho: np.ndarray
    sigma2T: np.ndarray
    omega: np.ndarray     # (C, D, I)
    eta: np.ndarray       # (C, D, T)
    z: np.ndarray         # (C, D, I, T) uint8, None when loaded without --full draws
    psi: np.ndarray       # (C, D, I, T)
    config: MCMCConfig
    priors: PriorSpec
    accept_rates: np.ndarray = None
    meta: dict = field(default_factory=dict)

    @property
    def n_chains(self) -> int:
        return self.phi.shape[0]

    @property
    def n_draws(self) -> int:
        return self.phi.shape[1]

    def scalar_parameter_names(self):
        names = [f"beta[{k}]" for k in range(self.beta.shape[2])]
        names += [f"alpha[{k}]" for k in range(self.alpha.shape[2])]
        names += ["phi", "sigma2", "rho", "sigma2T"]
        return names

    def parameter_array(self, name: str) -> np.ndarray:
        """(chains, draws) array for a named parameter component."""
        if name.startswith("beta["):
            return self.beta[:, :, int(name[5:-1])]
        if name.startswith("alpha["):
            return self.alpha[:, :, int(name[6:-1])]
        if name.startswith("omega["):
            return self.omega[:, :, int(name[6:-1])]
        if name.startswith("eta["):
            return self.eta[:, :, int(name[4:-1])]
        try:
            return {"phi": self.phi, "sigma2": self.sigma2, "rho": self.rho, "sigma2T": self.sigma2T}[name]
        except KeyError:
            raise UsageError(f"unknown parameter {name!r}") from None

    def posterior_mean(self, name: str) -> float:
        return float(self.parameter_array(name).mean())

    def psi_mean(self) -> np.ndarray:
        """Posterior-mean occupancy probability per site-year."""
        return self.psi.reshape(-1, *self.psi.shape[2:]).mean(axis=0)

    def summary_table(self):
        import pandas as pd

        rows = []
        names = self.scalar_parameter_names()
        names += [f"eta[{t}]" for t in range(self.eta.shape[2])]
        names += [f"omega[{i}]" for i in range(self.omega.shape[2])]
        for name in names:
            arr = self.parameter_array(name)
            flat = arr.reshape(-1)
            rows.append(
                {
                    "parameter": name,
                    "mean": flat.mean(),
                    "sd": flat.std(ddof=1),
                    "q2.5": np.quantile(flat, 0.025),
                    "q97.5": np.quantile(flat, 0.975),
                    "rhat": gelman_rubin(arr) if self.n_chains >= 2 and self.n_draws >= 10 else np.nan,
                    "ess": effective_sample_size(arr) if arr.size >= 100 else np.nan,
                }
            )
        return pd.DataFrame(rows)

    def to_dir(self, path, include_fields: bool = False):
        """Persist draws.csv (long format), summary.csv and manifest.json.

        z and psi are derived fields and large; they are written only with
        include_fields=True. psi is always reconstructible from the stored
        beta/omega/eta draws plus the dataset covariates.
        """
        import pandas as pd

        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        C, D = self.n_chains, self.n_draws
        blocks = [("beta", self.beta), ("alpha", self.alpha), ("omega", self.omega), ("eta", self.eta)]
        blocks += [(n, arr[:, :, None]) for n, arr in
                   (("phi", self.phi), ("sigma2", self.sigma2), ("rho", self.rho), ("sigma2T", self.sigma2T))]
        if include_fields and self.z is not None:
            blocks.append(("z", self.z.reshape(C, D, -1).astype(float)))
            blocks.append(("psi", self.psi.reshape(C, D, -1)))
        frames = []
        chain_col = np.repeat(np.arange(C), D)
        draw_col = np.tile(np.arange(D), C)
        for name, arr in blocks:
            width = arr.shape[2]
            frames.append(
                pd.DataFrame(
                    {
                        "chain": np.repeat(chain_col, width),
                        "draw": np.repeat(draw_col, width),
                        "parameter": name,
                        "index": np.tile(np.arange(width), C * D),
                        "value": arr.reshape(-1),
                    }
                )
            )
        pd.concat(frames, ignore_index=True).to_csv(path / "draws.csv", index=False)
        self.summary_table().to_csv(path / "summary.csv", index=False)
        manifest = {
            "config": self.config.to_dict(),
            "priors": self.priors.to_dict(),
            "seed": self.config.seed,
            "accept_rates": None if self.accept_rates is None else self.accept_rates.tolist(),
            **self.meta,
        }
        (path / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
        return path

    @classmethod
    def from_dir(cls, path, cov: Covariates = None):
        """Load persisted draws; psi is recomputed when covariates are given."""
        import pandas as pd

        path = Path(path)
        if not (path / "manifest.json").exists():
            raise DataError(f"missing manifest.json in {path}")
        manifest = json.loads((path / "manifest.json").read_text())
        config = MCMCConfig.from_dict(manifest["config"])
        priors = PriorSpec.from_dict(manifest["priors"])
        df = pd.read_csv(path / "draws.csv")
        n_chains = int(df["chain"].max()) + 1
        n_draws = int(df["draw"].max()) + 1

        def grab(name):
            sub = df[df["parameter"] == name]
            width = int(sub["index"].max()) + 1
            arr = np.empty((n_chains, n_draws, width))
            arr[sub["chain"].to_numpy(), sub["draw"].to_numpy(), sub["index"].to_numpy()] = sub["value"].to_numpy()
            return arr

        beta = grab("beta")
        alpha = grab("alpha")
        omega = grab("omega")
        eta = grab("eta")
        phi = grab("phi")[:, :, 0]
        sigma2 = grab("sigma2")[:, :, 0]
        rho = grab("rho")[:, :, 0]
        sigma2T = grab("sigma2T")[:, :, 0]
        psi = None
        if cov is not None:
            lin = np.einsum("itk,cdk->cdit", cov.occ_design, beta)
            psi = clamped_logistic(lin + omega[:, :, :, None] + eta[:, :, None, :])
        meta = {k: v for k, v in manifest.items() if k not in ("config", "priors", "seed", "accept_rates")}
        return cls(
            beta=beta, alpha=alpha, phi=phi, sigma2=sigma2, rho=rho, sigma2T=sigma2T,
            omega=omega, eta=eta, z=None, psi=psi, config=config, priors=priors, meta=meta,
        )


def _children_csr(graph: NeighborGraph):
    """For each ordered site, the (child, slot) pairs that reference it."""
    n = graph.coords.n_sites
    counts = np.zeros(n, dtype=np.int64)
    for k in range(n):
        for s in range(graph.nbr_count[k]):
            counts[graph.nbr_idx[k, s]] += 1
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    idx = np.zeros(ptr[-1], dtype=np.int64)
    slot = np.zeros(ptr[-1], dtype=np.int64)
    fill = ptr[:-1].copy()
    for k in range(n):
        for s in range(graph.nbr_count[k]):
            parent = graph.nbr_idx[k, s]
            idx[fill[parent]] = k
            slot[fill[parent]] = s
            fill[parent] += 1
    return ptr, idx, slot


def _initial_state(chain: int, rng, k_beta, k_alpha, priors, data, fixed, overrides=None):
    """Chain 0 starts at neutral values; later chains get dispersed starts
    so split-chain diagnostics are meaningful. `overrides` pins chosen
    state entries (warm starts, stationarity checks)."""
    if chain == 0:
        beta = np.zeros(k_beta)
        alpha = np.zeros(k_alpha)
        sigma2 = 1.0
        sigma2t = 1.0
        phi = 0.5 * (priors.phi.lo + priors.phi.hi)
        rho = 0.0
    else:
        beta = rng.normal(0.0, 1.0, k_beta)
        alpha = rng.normal(0.0, 1.0, k_alpha)
        sigma2 = float(np.exp(rng.normal(0.0, 0.5)))
        sigma2t = float(np.exp(rng.normal(0.0, 0.5)))
        width = priors.phi.hi - priors.phi.lo
        phi = float(rng.uniform(priors.phi.lo + 0.1 * width, priors.phi.hi - 0.1 * width))
        rho = float(rng.uniform(-0.5, 0.5))
    z0 = (data.any_detection() | (rng.random((data.I, data.T)) < 0.5)).astype(np.uint8)
    state = {
        "beta": beta, "alpha": alpha, "sigma2": sigma2, "sigma2T": sigma2t,
        "phi": phi, "rho": rho, "z": z0,
        "omega": np.zeros(data.I), "eta": np.zeros(data.T),
    }
    for key, val in (overrides or {}).items():
        if key not in state:
            raise UsageError(f"cannot initialize unknown state entry {key!r}")
        state[key] = np.asarray(val, dtype=state[key].dtype) if isinstance(state[key], np.ndarray) else float(val)
    for key, val in (fixed or {}).items():
        if key not in ("phi", "sigma2", "rho", "sigma2T"):
            raise UsageError(f"cannot fix parameter {key!r}")
        state[key] = float(val)
    return state


def fit(
    data: EncounterArray,
    cov: Covariates,
    coords: SiteCoords,
    priors: PriorSpec = None,
    config: MCMCConfig = None,
    fixed: dict = None,
    init_overrides: dict = None,
) -> PosteriorSamples:
    """Run the Gibbs sampler and return retained draws from every chain.

    `fixed` may pin any of phi, sigma2, rho, sigma2T to a constant
    (used for exactness checks against enumeration/importance oracles);
    `init_overrides` sets starting values for any state entry in every
    chain (beta, alpha, omega, eta, z, phi, sigma2, rho, sigma2T).
    """
    config = config or MCMCConfig()
    cov.validate_against(data)
    if coords.n_sites != data.I:
        raise UsageError(f"coords have {coords.n_sites} sites but data has {data.I}")
    if not data.any_survey().any():
        raise UsageError("dataset has no surveyed cells")
    if priors is None:
        priors = PriorSpec.default(cov.k_beta, cov.k_alpha, coords=coords)
    if len(priors.beta) != cov.k_beta or len(priors.alpha) != cov.k_alpha:
        raise UsageError("prior lengths do not match design columns")

    t_start = time.perf_counter()
    graph = build_neighbor_graph(coords, config.m_neighbors)
    child_ptr, child_idx, child_slot = _children_csr(graph)

    v_det = np.nan_to_num(cov.det_design, nan=0.0)
    y_f = data.y.astype(np.float64)
    g_f = data.g.astype(np.float64)
    any_det = data.any_detection().astype(np.uint8)

    n_d = config.retained_per_chain
    if n_d < 1:
        raise UsageError("config retains no draws; increase n_iter or lower n_burn/thin")
    C = config.n_chains
    kb, ka = cov.k_beta, cov.k_alpha
    out = {
        "beta": np.empty((C, n_d, kb)),
        "alpha": np.empty((C, n_d, ka)),
        "phi": np.empty((C, n_d)),
        "sigma2": np.empty((C, n_d)),
        "rho": np.empty((C, n_d)),
        "sigma2T": np.empty((C, n_d)),
        "omega": np.empty((C, n_d, data.I)),
        "eta": np.empty((C, n_d, data.T)),
        "z": np.empty((C, n_d, data.I, data.T), dtype=np.uint8),
        "psi": np.empty((C, n_d, data.I, data.T)),
    }
    rates = np.empty((C, 5))

    fixed = fixed or {}
    seeds = np.random.SeedSequence(config.seed).spawn(C)
    for c in range(C):
        rng = np.random.default_rng(seeds[c])
        init = _initial_state(c, rng, kb, ka, priors, data, fixed, overrides=init_overrides)
        status = np.zeros(2, dtype=np.int64)
        _engine.run_chain(
            rng,
            y_f, g_f, any_det, cov.occ_design, v_det,
            graph.order, graph.inverse_order,
            graph.nbr_idx, graph.nbr_count, graph.d_self, graph.d_cross,
            child_ptr, child_idx, child_slot,
            np.array([p.mean for p in priors.beta]), np.array([p.var for p in priors.beta]),
            np.array([p.mean for p in priors.alpha]), np.array([p.var for p in priors.alpha]),
            priors.sigma2.shape, priors.sigma2.scale, priors.sigma2T.shape, priors.sigma2T.scale,
            priors.phi.lo, priors.phi.hi,
            config.n_iter, config.n_burn, config.thin, config.batch_length,
            np.uint8("phi" in fixed), np.uint8("sigma2" in fixed),
            np.uint8("rho" in fixed), np.uint8("sigma2T" in fixed),
            np.uint8((cov.occ_design[:, :, 0] == 1.0).all()),
            np.uint8(bool(((v_det[:, :, :, 0] == 1.0) | (data.g == 0)).all())),
            init["beta"].astype(float), init["alpha"].astype(float),
            np.asarray(init["omega"], dtype=float)[graph.order], np.asarray(init["eta"], dtype=float),
            np.ascontiguousarray(init["z"], dtype=np.uint8),
            init["phi"], init["sigma2"], init["rho"], init["sigma2T"],
            _INIT_STEP, _INIT_STEP,
            out["beta"][c], out["alpha"][c], out["phi"][c], out["sigma2"][c],
            out["rho"][c], out["sigma2T"][c], out["omega"][c], out["eta"][c],
            out["z"][c], out["psi"][c], rates[c], status,
        )
        if status[0] == 1:
            raise NumericalError(f"chain {c}: factorization failure at iteration {status[1]}")
        if status[0] == 2:
            raise NumericalError(f"chain {c}: non-finite state at iteration {status[1]}")

    wall = time.perf_counter() - t_start
    return PosteriorSamples(
        **out,
        config=config,
        priors=priors,
        accept_rates=rates,
        meta={"wall_time_s": wall, "fixed": {k: float(v) for k, v in fixed.items()}, "layout": "unit_lattice_convention"},
    )


def predict(
    samples: PosteriorSamples,
    fit_coords: SiteCoords,
    new_coords: SiteCoords,
    new_cov: Covariates,
    rng: np.random.Generator = None,
    return_omega: bool = False,
):
    """Draw psi for new sites from each retained draw.

    The spatial effect at a new site is its conditional normal given the m
    nearest fitted sites' effects under that draw's (phi, sigma2); a site
    coincident with a fitted one reuses the fitted effect exactly.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if new_cov.k_beta != samples.beta.shape[2]:
        raise UsageError("new covariate rows do not match beta length")
    n_new = new_coords.n_sites
    n_t = samples.eta.shape[2]
    if new_cov.occ_design.shape[:2] != (n_new, n_t):
        raise UsageError(
            f"new occ_design must be ({n_new}, {n_t}, k), got {new_cov.occ_design.shape}"
        )
    m = min(samples.config.m_neighbors, fit_coords.n_sites)
    d_all = np.linalg.norm(new_coords.coords[:, None, :] - fit_coords.coords[None, :, :], axis=2)
    exact = np.full(n_new, -1, dtype=np.int64)
    nbrs = np.empty((n_new, m), dtype=np.int64)
    for s in range(n_new):
        hit = np.where(d_all[s] < 1e-12)[0]
        if hit.size:
            exact[s] = hit[0]
        nbrs[s] = np.lexsort((np.arange(fit_coords.n_sites), d_all[s]))[:m]
    d_self = np.take_along_axis(d_all, nbrs, axis=1)
    diff = fit_coords.coords[nbrs][:, :, None, :] - fit_coords.coords[nbrs][:, None, :, :]
    d_cross = np.sqrt((diff**2).sum(axis=3))

    C, D = samples.n_chains, samples.n_draws
    omega_new = np.empty((C, D, n_new))
    eye = np.eye(m)
    for c in range(C):
        for d in range(D):
            phi = samples.phi[c, d]
            sigma2 = samples.sigma2[c, d]
            corr_cross = np.exp(-phi * d_cross)
            corr_self = np.exp(-phi * d_self)
            try:
                bmat = np.linalg.solve(corr_cross, corr_self[..., None])[..., 0]
            except np.linalg.LinAlgError:
                bmat = np.linalg.solve(corr_cross + 1e-8 * eye[None], corr_self[..., None])[..., 0]
            mean = np.einsum("sm,sm->s", bmat, samples.omega[c, d][nbrs])
            var = sigma2 * np.maximum(1.0 - np.einsum("sm,sm->s", bmat, corr_self), 0.0)
            draw = mean + np.sqrt(var) * rng.standard_normal(n_new)
            hit = exact >= 0
            if hit.any():
                draw[hit] = samples.omega[c, d][exact[hit]]
            omega_new[c, d] = draw

    lin = np.einsum("itk,cdk->cdit", new_cov.occ_design, samples.beta)
    psi = clamped_logistic(lin + omega_new[:, :, :, None] + samples.eta[:, :, None, :])
    if return_omega:
        return psi, omega_new
    return psi
