import numpy as np
import pytest

from occufield.core import Covariates, EncounterArray, ModelParams, RandomEffects
from occufield.fields import SiteCoords


def random_instance(rng, n_i=None, n_t=None, n_j=None, k_alpha=2):
    """Small random (data, cov, params, effects) tuple for likelihood tests."""
    n_i = n_i or int(rng.integers(1, 4))
    n_t = n_t or int(rng.integers(1, 3))
    n_j = n_j or int(rng.integers(1, 3))
    occ = np.concatenate([np.ones((n_i, n_t, 1)), rng.standard_normal((n_i, n_t, 1))], axis=2)
    det = np.concatenate([np.ones((n_i, n_t, n_j, 1)), rng.standard_normal((n_i, n_t, n_j, k_alpha - 1))], axis=3)
    cov = Covariates(occ_design=occ, det_design=det)
    params = ModelParams(
        beta=rng.normal(0, 1, 2),
        alpha=rng.normal(0, 1, k_alpha),
        phi=float(rng.uniform(1, 10)),
        sigma2=float(rng.uniform(0.2, 2)),
        rho=float(rng.uniform(-0.9, 0.9)),
        sigma2T=float(rng.uniform(0.2, 2)),
    )
    effects = RandomEffects(omega=rng.normal(0, 0.7, n_i), eta=rng.normal(0, 0.7, n_t))
    g = (rng.random((n_i, n_t, n_j)) < 0.75).astype(np.uint8)
    from occufield.core import detection_field, occupancy_field

    psi = occupancy_field(cov, params.beta, effects)
    p = detection_field(cov, params.alpha)
    z = (rng.random((n_i, n_t)) < psi).astype(np.uint8)
    y = ((rng.random((n_i, n_t, n_j)) < p) & (z[:, :, None] == 1) & (g == 1)).astype(np.uint8)
    return EncounterArray(y=y, g=g), cov, params, effects


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture(scope="session")
def tiny_fit():
    """One small fitted dataset shared by cheap sampler assertions."""
    import occufield as of
    from occufield.mcmc import MCMCConfig

    spec = of.ScenarioSpec.build("1-0", sub="low", I=36, T=3, J=5)
    ds = of.simulate_dataset(spec, 7)
    samples = of.fit(
        ds.data, ds.cov, ds.coords,
        config=MCMCConfig(n_chains=2, n_iter=600, n_burn=300, thin=3, seed=11),
    )
    return ds, samples
