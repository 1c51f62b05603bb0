"""Gaussian-process spatial machinery and the AR(1) temporal process.

The spatial effect is a zero-mean GP with exponential covariance
sigma2 * exp(-phi * d). Simulation draws use the exact dense factorization;
inference uses the nearest-neighbor (NNGP) factorization: ordered sites,
each conditioned on up to m nearest previously-ordered sites, giving a
product of univariate conditional normals.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NumericalError, UsageError

_LOG_2PI = float(np.log(2.0 * np.pi))
_JITTER = 1e-8


@dataclass(frozen=True)
class SiteCoords:
    """2-D site locations with Euclidean distances.

    First coordinate plays the role of latitude throughout (covariate L,
    neighbor ordering, mid-latitude clustering).
    """

    coords: np.ndarray

    def __post_init__(self):
        coords = np.ascontiguousarray(np.atleast_2d(self.coords), dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise UsageError(f"coords must be (I, 2), got {coords.shape}")
        if not np.isfinite(coords).all():
            raise UsageError("coordinates must be finite")
        uniq = np.unique(coords, axis=0)
        if uniq.shape[0] != coords.shape[0]:
            raise UsageError("duplicate site coordinates are not allowed")
        object.__setattr__(self, "coords", coords)

    @property
    def n_sites(self) -> int:
        return self.coords.shape[0]

    def distance_matrix(self) -> np.ndarray:
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        return np.sqrt((diff**2).sum(axis=2))

    @classmethod
    def unit_lattice(cls, n_sites: int) -> "SiteCoords":
        """Nearly-square regular lattice scaled to the unit square.

        Sites fill rows bottom-up; when n_sites is not a perfect square the
        last row is partial. This layout is a convention of this package
        (flagged in run manifests), chosen so latitude-based designs are
        reproducible.
        """
        if n_sites < 1:
            raise UsageError("n_sites must be >= 1")
        nx = int(np.ceil(np.sqrt(n_sites)))
        ny = int(np.ceil(n_sites / nx))
        k = np.arange(n_sites)
        rows = k // nx
        cols = k % nx
        lat = rows / max(ny - 1, 1)
        lon = cols / max(nx - 1, 1)
        return cls(np.column_stack([lat, lon]))


@dataclass(frozen=True)
class SpatialSpec:
    """Exponential-correlation GP parameters: corr(d) = exp(-phi * d)."""

    phi: float
    sigma2: float

    def __post_init__(self):
        if not self.phi > 0:
            raise UsageError(f"phi must be > 0, got {self.phi}")
        if not self.sigma2 > 0:
            raise UsageError(f"sigma2 must be > 0, got {self.sigma2}")


@dataclass(frozen=True)
class TemporalSpec:
    """Stationary AR(1) parameters: Cov(eta_t, eta_s) = sigma2T * rho^|t-s|."""

    rho: float
    sigma2T: float

    def __post_init__(self):
        if not -1.0 < self.rho < 1.0:
            raise UsageError(f"rho must lie in (-1, 1), got {self.rho}")
        if not self.sigma2T > 0:
            raise UsageError(f"sigma2T must be > 0, got {self.sigma2T}")


def exp_correlation(d, phi: float):
    """Exponential correlation exp(-phi * d); effective range is about 3/phi."""
    d = np.asarray(d, dtype=float)
    if not phi > 0:
        raise UsageError(f"phi must be > 0, got {phi}")
    if np.any(d < 0):
        raise UsageError("distances must be non-negative")
    out = np.exp(-phi * d)
    return float(out) if out.ndim == 0 else out


def covariance_matrix(coords: SiteCoords, spec: SpatialSpec) -> np.ndarray:
    return spec.sigma2 * exp_correlation(coords.distance_matrix(), spec.phi)


def _cholesky_with_jitter(cov: np.ndarray, jitter_scale: float) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        bumped = cov + _JITTER * jitter_scale * np.eye(cov.shape[0])
        try:
            return np.linalg.cholesky(bumped)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("covariance factorization failed even after jitter") from exc


def sample_spatial_effects(coords: SiteCoords, spec: SpatialSpec, rng: np.random.Generator, size=None):
    """Exact GP draw(s) omega ~ N(0, sigma2 * exp(-phi * D)).

    With size=None returns a length-I vector; otherwise (size, I).
    """
    cov = covariance_matrix(coords, spec)
    lower = _cholesky_with_jitter(cov, spec.sigma2)
    n = coords.n_sites
    if size is None:
        return lower @ rng.standard_normal(n)
    return rng.standard_normal((size, n)) @ lower.T


@dataclass(frozen=True)
class NeighborGraph:
    """Ordered-site neighbor sets for the NNGP factorization.

    order     : ordered position -> original site index (sorted by first
                coordinate, ties by second).
    neighbors : per ordered position k, array of ordered positions of its
                up-to-m nearest previously-ordered sites.
    """

    coords: SiteCoords
    m: int
    order: np.ndarray
    neighbors: tuple
    # padded views used by density evaluation and the sampler
    nbr_idx: np.ndarray = field(repr=False, default=None)
    nbr_count: np.ndarray = field(repr=False, default=None)
    d_self: np.ndarray = field(repr=False, default=None)
    d_cross: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        n = self.coords.n_sites
        m = int(self.m)
        ordered = self.coords.coords[self.order]
        nbr_idx = np.full((n, m), -1, dtype=np.int64)
        nbr_count = np.zeros(n, dtype=np.int64)
        d_self = np.full((n, m), np.inf)
        d_cross = np.full((n, m, m), np.inf)
        d_cross[:, np.arange(m), np.arange(m)] = 0.0
        for k, nb in enumerate(self.neighbors):
            nb = np.asarray(nb, dtype=np.int64)
            if nb.size != min(m, k):
                raise UsageError(f"site {k} must have {min(m, k)} neighbors, got {nb.size}")
            if nb.size and nb.max() >= k:
                raise UsageError(f"site {k} references a later-ordered neighbor")
            c = nb.size
            nbr_idx[k, :c] = nb
            nbr_count[k] = c
            if c:
                d_self[k, :c] = np.linalg.norm(ordered[nb] - ordered[k], axis=1)
                diff = ordered[nb][:, None, :] - ordered[nb][None, :, :]
                d_cross[k, :c, :c] = np.sqrt((diff**2).sum(axis=2))
        object.__setattr__(self, "order", np.asarray(self.order, dtype=np.int64))
        object.__setattr__(self, "nbr_idx", nbr_idx)
        object.__setattr__(self, "nbr_count", nbr_count)
        object.__setattr__(self, "d_self", d_self)
        object.__setattr__(self, "d_cross", d_cross)

    @property
    def inverse_order(self) -> np.ndarray:
        inv = np.empty_like(self.order)
        inv[self.order] = np.arange(self.order.size)
        return inv

    def to_json(self, path=None) -> str:
        payload = {
            "m": int(self.m),
            "coords": self.coords.coords.tolist(),
            "ordering": self.order.tolist(),
            "neighbors": [np.asarray(nb).tolist() for nb in self.neighbors],
        }
        text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, source) -> "NeighborGraph":
        if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
            source = Path(source).read_text()
        d = json.loads(source)
        return cls(
            coords=SiteCoords(np.asarray(d["coords"])),
            m=int(d["m"]),
            order=np.asarray(d["ordering"], dtype=np.int64),
            neighbors=tuple(np.asarray(nb, dtype=np.int64) for nb in d["neighbors"]),
        )


def build_neighbor_graph(coords: SiteCoords, m: int) -> NeighborGraph:
    """Order sites by first coordinate (ties by second); connect each to its
    min(m, k) nearest predecessors. Ties in distance break by earlier order."""
    if m < 1:
        raise UsageError(f"m must be >= 1, got {m}")
    order = np.lexsort((coords.coords[:, 1], coords.coords[:, 0]))
    ordered = coords.coords[order]
    neighbors = []
    for k in range(coords.n_sites):
        if k == 0:
            neighbors.append(np.empty(0, dtype=np.int64))
            continue
        d = np.linalg.norm(ordered[:k] - ordered[k], axis=1)
        take = min(m, k)
        sel = np.lexsort((np.arange(k), d))[:take]
        neighbors.append(np.sort(sel))
    return NeighborGraph(coords=coords, m=m, order=order, neighbors=tuple(neighbors))


def nngp_factors(graph: NeighborGraph, phi: float):
    """Per-site conditional coefficients b and correlation-scale variances f.

    omega_(k) | parents ~ N(b_k . omega_parents, sigma2 * f_k); b and f
    depend only on phi because the exponential kernel separates variance.
    """
    if not phi > 0:
        raise UsageError(f"phi must be > 0, got {phi}")
    with np.errstate(under="ignore"):
        cross = np.exp(-phi * graph.d_cross)
        self_corr = np.exp(-phi * graph.d_self)
    self_corr[~np.isfinite(graph.d_self)] = 0.0
    try:
        b = np.linalg.solve(cross, self_corr[..., None])[..., 0]
    except np.linalg.LinAlgError:
        cross = cross + _JITTER * np.eye(graph.m)[None, :, :]
        try:
            b = np.linalg.solve(cross, self_corr[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise NumericalError("singular neighbor covariance after jitter retry") from exc
    f = 1.0 - np.einsum("km,km->k", b, self_corr)
    if np.any(f <= 0):
        raise NumericalError("non-positive conditional variance in neighbor factorization")
    return b, f


def nngp_log_density(omega, spec: SpatialSpec, graph: NeighborGraph) -> float:
    """Sum of univariate conditional normal log densities over ordered sites."""
    omega = np.asarray(omega, dtype=float)
    if omega.shape != (graph.coords.n_sites,):
        raise UsageError(f"omega length {omega.size} != site count {graph.coords.n_sites}")
    b, f = nngp_factors(graph, spec.phi)
    om = omega[graph.order]
    padded = np.concatenate([om, [0.0]])
    mean = np.einsum("km,km->k", b, padded[graph.nbr_idx])
    var = spec.sigma2 * f
    resid = om - mean
    return float(-0.5 * np.sum(_LOG_2PI + np.log(var) + resid**2 / var))


def ar1_covariance(lag: int, spec: TemporalSpec) -> float:
    """Stationary AR(1) covariance sigma2T * rho^lag."""
    if lag < 0 or int(lag) != lag:
        raise UsageError(f"lag must be a non-negative integer, got {lag}")
    return float(spec.sigma2T * spec.rho ** int(lag))


def ar1_log_density(eta, spec: TemporalSpec) -> float:
    """Joint log density of a stationary AR(1) path."""
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    out = -0.5 * (_LOG_2PI + np.log(spec.sigma2T) + eta[0] ** 2 / spec.sigma2T)
    if eta.size > 1:
        v = spec.sigma2T * (1.0 - spec.rho**2)
        resid = eta[1:] - spec.rho * eta[:-1]
        out += -0.5 * np.sum(_LOG_2PI + np.log(v) + resid**2 / v)
    return float(out)


def sample_temporal_effects(n_occasions: int, spec: TemporalSpec, rng: np.random.Generator, size=None):
    """Stationary AR(1) draw(s): eta_1 ~ N(0, sigma2T), then
    eta_t = rho * eta_{t-1} + N(0, sigma2T * (1 - rho^2)), so the marginal
    covariance matches sigma2T * rho^|lag| at every lag.

    With size=None returns a length-T vector; otherwise (size, T).
    """
    if n_occasions < 1:
        raise UsageError("n_occasions must be >= 1")
    squeeze = size is None
    n = 1 if squeeze else int(size)
    eta = np.empty((n, n_occasions))
    eta[:, 0] = np.sqrt(spec.sigma2T) * rng.standard_normal(n)
    innov_sd = np.sqrt(spec.sigma2T * (1.0 - spec.rho**2))
    for t in range(1, n_occasions):
        eta[:, t] = spec.rho * eta[:, t - 1] + innov_sd * rng.standard_normal(n)
    return eta[0] if squeeze else eta
