import numpy as np
import pytest

import occufield as of
from occufield.core import Covariates, EncounterArray, detection_field, occupancy_field, RandomEffects
from occufield.diagnostics import prior_posterior_overlap
from occufield.errors import UsageError
from occufield.fields import SiteCoords, SpatialSpec, TemporalSpec, sample_spatial_effects, sample_temporal_effects
from occufield.mcmc import MCMCConfig, NormalPrior, PosteriorSamples, PriorSpec, fit, predict
from occufield.simulate import ScenarioSpec, simulate_dataset


def make_priors(k_beta, k_alpha, phi_bounds=(2.0, 40.0)):
    return PriorSpec.default(k_beta, k_alpha, phi_bounds=phi_bounds)


class TestConfig:
    def test_paper_settings_arithmetic(self):
        config = MCMCConfig(n_chains=3, n_iter=25000, n_burn=15000, thin=10)
        assert config.retained_per_chain == 1000
        assert config.n_chains * config.retained_per_chain == 3000

    def test_validation(self):
        with pytest.raises(UsageError):
            MCMCConfig(n_iter=100, n_burn=100)
        with pytest.raises(UsageError):
            MCMCConfig(thin=0)


class TestFitBasics:
    def test_detections_force_z(self, tiny_fit):
        ds, samples = tiny_fit
        det = ds.data.any_detection()
        assert (samples.z[:, :, det] == 1).all()

    def test_psi_strictly_inside_unit_interval(self, tiny_fit):
        _, samples = tiny_fit
        assert (samples.psi > 0).all() and (samples.psi < 1).all()

    def test_draw_counts(self, tiny_fit):
        _, samples = tiny_fit
        assert samples.n_chains == 2
        assert samples.n_draws == (600 - 300) // 3

    def test_determinism(self):
        spec = ScenarioSpec.build("1-0", sub="low", I=25, T=3, J=5)
        ds = simulate_dataset(spec, 3)
        config = MCMCConfig(n_chains=2, n_iter=200, n_burn=100, thin=2, seed=17)
        a = fit(ds.data, ds.cov, ds.coords, config=config)
        b = fit(ds.data, ds.cov, ds.coords, config=config)
        assert (a.psi == b.psi).all()
        assert (a.phi == b.phi).all() and (a.beta == b.beta).all() and (a.z == b.z).all()

    def test_no_surveys_rejected(self):
        data = EncounterArray(y=np.zeros((4, 2, 2), dtype=np.uint8), g=np.zeros((4, 2, 2), dtype=np.uint8))
        cov = Covariates(occ_design=np.ones((4, 2, 1)), det_design=np.ones((4, 2, 2, 1)))
        with pytest.raises(UsageError):
            fit(data, cov, SiteCoords.unit_lattice(4), priors=make_priors(1, 1), config=MCMCConfig(n_iter=10, n_burn=0, thin=1))

    def test_prior_length_mismatch(self):
        spec = ScenarioSpec.build("1-0", sub="low", I=9, T=2, J=2)
        ds = simulate_dataset(spec, 4)
        with pytest.raises(UsageError):
            fit(ds.data, ds.cov, ds.coords, priors=make_priors(3, 2), config=MCMCConfig(n_iter=10, n_burn=0, thin=1))

    def test_prior_dominance_with_no_detections(self):
        # a dataset without a single detection leaves alpha at its prior
        rng = np.random.default_rng(5)
        n_i, n_t, n_j = 36, 3, 4
        g = (rng.random((n_i, n_t, n_j)) < 0.8).astype(np.uint8)
        data = EncounterArray(y=np.zeros((n_i, n_t, n_j), dtype=np.uint8), g=g)
        occ = np.ones((n_i, n_t, 1))
        det = np.concatenate([np.ones((n_i, n_t, n_j, 1)), rng.standard_normal((n_i, n_t, n_j, 1))], axis=3)
        cov = Covariates(occ_design=occ, det_design=det)
        priors = make_priors(1, 2)
        samples = fit(
            data, cov, SiteCoords.unit_lattice(n_i), priors=priors,
            config=MCMCConfig(n_chains=2, n_iter=1500, n_burn=500, thin=2, seed=9),
        )
        ppo = prior_posterior_overlap(priors.alpha[1], samples.parameter_array("alpha[1]").ravel())
        assert ppo > 80.0


class TestTinyScaleExactness:
    def test_posterior_mean_psi_matches_importance_sampling(self):
        """Gibbs posterior means against a 1e6-draw importance-sampling
        oracle on a 3-site model with fixed covariance parameters."""
        rng = np.random.default_rng(42)
        n_i, n_t, n_j = 3, 2, 2
        coords = SiteCoords(np.array([[0.0, 0.0], [0.4, 0.1], [0.9, 0.8]]))
        phi, sigma2, rho, sigma2t = 3.0, 0.8, 0.5, 0.6
        occ = np.concatenate([np.ones((n_i, n_t, 1)), rng.standard_normal((n_i, n_t, 1))], axis=2)
        det = np.concatenate([np.ones((n_i, n_t, n_j, 1)), rng.standard_normal((n_i, n_t, n_j, 1))], axis=3)
        cov = Covariates(occ_design=occ, det_design=det)
        g = np.ones((n_i, n_t, n_j), dtype=np.uint8)
        y = np.zeros_like(g)
        y[0, 0, 0] = 1
        y[2, 1, 1] = 1
        y[1, 0, 0] = 1
        data = EncounterArray(y=y, g=g)
        priors = make_priors(2, 2)

        samples = fit(
            data, cov, coords, priors=priors,
            config=MCMCConfig(n_chains=3, n_iter=30_000, n_burn=5_000, thin=5, seed=1),
            fixed={"phi": phi, "sigma2": sigma2, "rho": rho, "sigma2T": sigma2t},
        )
        psi_gibbs = samples.psi_mean()

        # importance sampling: prior draws weighted by the marginal likelihood
        n_mc = 1_000_000
        orng = np.random.default_rng(7)
        beta = orng.normal(0.0, np.sqrt(2.72), (n_mc, 2))
        alpha = orng.normal(0.0, np.sqrt(2.72), (n_mc, 2))
        omega = sample_spatial_effects(coords, SpatialSpec(phi, sigma2), orng, size=n_mc)
        eta = sample_temporal_effects(n_t, TemporalSpec(rho, sigma2t), orng, size=n_mc)
        lin_occ = occ[None, :, :, 0] + 0.0
        lin = np.einsum("itk,mk->mit", occ, beta) + omega[:, :, None] + eta[:, None, :]
        psi = 1.0 / (1.0 + np.exp(-lin))
        lin_det = np.einsum("itjk,mk->mitj", det, alpha)
        p = 1.0 / (1.0 + np.exp(-lin_det))
        det_mask = y[None, :, :, :] == 1
        ll_det = np.where(y[None] == 1, np.log(p), np.log1p(-p)).sum(axis=3, where=(g[None] == 1))
        any_det = (y == 1).any(axis=2)
        log_all_absent = np.log1p(-p).sum(axis=3, where=(g[None] == 1))
        per_cell = np.where(
            any_det[None],
            np.log(psi) + ll_det,
            np.logaddexp(np.log(psi) + log_all_absent, np.log1p(-psi)),
        )
        logw = per_cell.sum(axis=(1, 2))
        w = np.exp(logw - logw.max())
        w /= w.sum()
        ess = 1.0 / np.sum(w**2)
        assert ess > 5000  # the oracle itself must be reliable
        psi_is = np.einsum("m,mit->it", w, psi)
        assert np.abs(psi_gibbs - psi_is).max() < 0.02


class TestGettingItRight:
    def test_one_step_updates_centered_on_truth(self):
        """100 independent datasets from one truth; a single Gibbs sweep
        started at the generative values must not drift systematically."""
        spec = ScenarioSpec.build("1-0", sub="low", I=20, T=4, J=5)
        base = simulate_dataset(spec, 0)
        priors = make_priors(2, 2)
        beta0, beta1, alpha0 = [], [], []
        for r in range(100):
            ds = simulate_dataset(spec, 1000 + r)
            init = {
                "beta": ds.params.beta, "alpha": ds.params.alpha,
                "omega": ds.effects.omega, "eta": ds.effects.eta, "z": ds.latent.z,
            }
            samples = fit(
                ds.data, ds.cov, ds.coords, priors=priors,
                config=MCMCConfig(n_chains=1, n_iter=1, n_burn=0, thin=1, seed=2000 + r),
                fixed={"phi": ds.params.phi, "sigma2": ds.params.sigma2,
                       "rho": ds.params.rho, "sigma2T": ds.params.sigma2T},
                init_overrides=init,
            )
            beta0.append(samples.beta[0, 0, 0])
            beta1.append(samples.beta[0, 0, 1])
            alpha0.append(samples.alpha[0, 0, 0])
        for vals, truth in ((beta0, 0.0), (beta1, 0.5), (alpha0, 0.0)):
            vals = np.asarray(vals)
            se = vals.std(ddof=1) / np.sqrt(vals.size)
            assert abs(vals.mean() - truth) < 5 * se, f"one-step mean {vals.mean():.3f} vs {truth}"


class TestMonotoneDataConstraint:
    def test_adding_detection_never_lowers_cell_estimate(self):
        rng = np.random.default_rng(31)
        worse = 0
        for k in range(20):
            data, cov, params, effects = None, None, None, None
            n_i, n_t, n_j = 6, 2, 2
            spec = ScenarioSpec.build("1-0", sub="low", I=n_i, T=n_t, J=n_j)
            ds = simulate_dataset(spec, 400 + k)
            g = ds.data.g.copy()
            y = ds.data.y.copy()
            surveyed = np.argwhere((g == 1) & (y == 0))
            if surveyed.size == 0:
                continue
            i, t, j = surveyed[rng.integers(len(surveyed))]
            config = MCMCConfig(n_chains=2, n_iter=2500, n_burn=500, thin=1, seed=900 + k)
            priors = make_priors(2, 2)
            base = fit(EncounterArray(y=y, g=g), ds.cov, ds.coords, priors=priors, config=config)
            y2 = y.copy()
            y2[i, t, j] = 1
            bumped = fit(EncounterArray(y=y2, g=g), ds.cov, ds.coords, priors=priors, config=config)
            delta = bumped.psi_mean()[i, t] - base.psi_mean()[i, t]
            assert delta > -0.02, f"detection lowered psi-hat by {-delta:.3f}"
            if delta < 0:
                worse += 1
        assert worse <= 2  # strictly positive up to Monte-Carlo noise


@pytest.fixture(scope="module")
def fitted():
    spec = ScenarioSpec.build("2-1", sub="low", I=49, T=3, J=5)
    ds = simulate_dataset(spec, 21)
    samples = fit(
        ds.data, ds.cov, ds.coords,
        config=MCMCConfig(n_chains=2, n_iter=2000, n_burn=1000, thin=1, seed=3),
    )
    return ds, samples


class TestPredict:
    def test_coincident_site_reuses_fitted_effect(self, fitted):
        ds, samples = fitted
        new_coords = SiteCoords(ds.coords.coords[[5]])
        new_cov = Covariates(
            occ_design=ds.cov.occ_design[[5]], det_design=np.zeros((1, ds.data.T, 1, samples.alpha.shape[2]))
        )
        psi, omega = predict(samples, ds.coords, new_coords, new_cov,
                             rng=np.random.default_rng(0), return_omega=True)
        assert np.allclose(omega[:, :, 0], samples.omega[:, :, 5])

    def test_far_site_reverts_to_prior_marginal(self, fitted):
        ds, samples = fitted
        new_coords = SiteCoords(np.array([[30.0, 30.0]]))
        new_cov = Covariates(
            occ_design=np.ones((1, ds.data.T, 2)), det_design=np.zeros((1, ds.data.T, 1, samples.alpha.shape[2]))
        )
        # at this distance exp(-phi d) < 0.01 for every retained phi draw
        d = np.linalg.norm(ds.coords.coords - np.array([30.0, 30.0]), axis=1).min()
        assert np.exp(-samples.phi.min() * d) < 0.01
        pooled = []
        for k in range(20):  # several predictive draws per posterior draw
            _, omega = predict(samples, ds.coords, new_coords, new_cov,
                               rng=np.random.default_rng(k), return_omega=True)
            pooled.append(omega[:, :, 0].ravel())
        var_pred = np.concatenate(pooled).var(ddof=1)
        mean_sigma2 = samples.sigma2.mean()
        assert abs(var_pred - mean_sigma2) / mean_sigma2 < 0.05

    def test_psi_draws_in_unit_interval(self, fitted):
        ds, samples = fitted
        rng = np.random.default_rng(2)
        new_coords = SiteCoords(rng.random((4, 2)) + np.array([0.0, 1.5]))
        new_cov = Covariates(
            occ_design=np.concatenate([np.ones((4, ds.data.T, 1)), rng.standard_normal((4, ds.data.T, 1))], axis=2),
            det_design=np.zeros((4, ds.data.T, 1, samples.alpha.shape[2])),
        )
        psi = predict(samples, ds.coords, new_coords, new_cov, rng=rng)
        assert (psi > 0).all() and (psi < 1).all()

    def test_row_length_checked(self, fitted):
        ds, samples = fitted
        new_coords = SiteCoords(np.array([[0.5, 2.0]]))
        bad_cov = Covariates(occ_design=np.ones((1, ds.data.T, 3)), det_design=np.zeros((1, ds.data.T, 1, 2)))
        with pytest.raises(UsageError):
            predict(samples, ds.coords, new_coords, bad_cov)


class TestInformativePrior:
    def test_informative_phi_prior_constrains_sampler(self):
        # narrow decay prior: draws respect the bounds and overlap stays
        # substantial (the sampler is confined to the prior's region)
        spec = ScenarioSpec.build("2-0", sub="low", I=49, T=3, J=5)
        ds = simulate_dataset(spec, 77)
        config = MCMCConfig(n_chains=2, n_iter=1200, n_burn=400, thin=2, seed=5)
        inform = PriorSpec.default(2, 2, phi_bounds=(0.5, 3.0))
        s_inf = fit(ds.data, ds.cov, ds.coords, priors=inform, config=config)
        phi_draws = s_inf.parameter_array("phi").ravel()
        assert (phi_draws > 0.5).all() and (phi_draws < 3.0).all()
        ppo_inf = prior_posterior_overlap(inform.phi, phi_draws)
        assert ppo_inf > 30.0

    def test_persistence_round_trip(self, tiny_fit, tmp_path):
        ds, samples = tiny_fit
        out = samples.to_dir(tmp_path / "fit")
        back = PosteriorSamples.from_dir(out, cov=ds.cov)
        assert np.allclose(back.beta, samples.beta)
        assert np.allclose(back.omega, samples.omega)
        assert np.allclose(back.psi, samples.psi)
        assert back.config.to_dict() == samples.config.to_dict()
