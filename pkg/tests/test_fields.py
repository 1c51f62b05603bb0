import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from occufield.errors import UsageError
from occufield.fields import (
    NeighborGraph,
    SiteCoords,
    SpatialSpec,
    TemporalSpec,
    ar1_covariance,
    ar1_log_density,
    build_neighbor_graph,
    covariance_matrix,
    exp_correlation,
    nngp_factors,
    nngp_log_density,
    sample_spatial_effects,
    sample_temporal_effects,
)


class TestExpCorrelation:
    def test_zero_distance(self):
        assert exp_correlation(0.0, 3.75) == pytest.approx(1.0)

    def test_low_decay_at_effective_range(self):
        # e^-3 at d = 3/phi, the conventional effective range
        assert exp_correlation(0.8, 3.75) == pytest.approx(0.049787068367863944, abs=1e-12)

    def test_high_decay(self):
        assert exp_correlation(0.2, 15.0) == pytest.approx(0.049787068367863944, abs=1e-12)

    def test_negative_distance_rejected(self):
        with pytest.raises(UsageError):
            exp_correlation(-0.1, 1.0)

    def test_strictly_decreasing(self):
        d = np.linspace(0, 2, 50)
        vals = exp_correlation(d, 2.5)
        assert np.all(np.diff(vals) < 0)
        phis = np.linspace(0.5, 8, 30)
        at_fixed_d = np.array([exp_correlation(0.7, p) for p in phis])
        assert np.all(np.diff(at_fixed_d) < 0)

    @given(d=st.floats(0.01, 5.0), phi=st.floats(0.1, 20.0), c=st.floats(0.1, 10.0))
    @settings(max_examples=60, deadline=None)
    def test_scale_duality(self, d, phi, c):
        assert exp_correlation(c * d, phi / c) == pytest.approx(exp_correlation(d, phi), rel=1e-12)


class TestSiteCoords:
    def test_duplicates_rejected(self):
        with pytest.raises(UsageError):
            SiteCoords(np.array([[0.0, 0.0], [0.0, 0.0]]))

    def test_unit_lattice_shape(self):
        coords = SiteCoords.unit_lattice(200)
        assert coords.n_sites == 200
        assert coords.coords.min() >= 0.0 and coords.coords.max() <= 1.0

    def test_unit_lattice_square(self):
        coords = SiteCoords.unit_lattice(9)
        xs = np.unique(coords.coords[:, 1])
        assert np.allclose(xs, [0.0, 0.5, 1.0])


class TestSpatialSampling:
    def test_single_site_variance(self):
        rng = np.random.default_rng(1)
        spec = SpatialSpec(phi=3.75, sigma2=0.7)
        draws = sample_spatial_effects(SiteCoords([[0.3, 0.4]]), spec, rng, size=100_000)
        mc_se = np.sqrt(2.0 / (draws.size - 1)) * spec.sigma2
        assert abs(draws.var(ddof=1) - spec.sigma2) < 3 * mc_se

    def test_pair_covariance(self):
        rng = np.random.default_rng(2)
        coords = SiteCoords([[0.0, 0.0], [0.2, 0.0], [0.5, 0.5], [1.0, 0.2], [0.7, 0.9]])
        spec = SpatialSpec(phi=3.75, sigma2=1.5)
        draws = sample_spatial_effects(coords, spec, rng, size=10_000)
        target = covariance_matrix(coords, spec)
        emp = np.cov(draws.T)
        n = draws.shape[0]
        for k in range(5):
            for l in range(5):
                se = np.sqrt((target[k, k] * target[l, l] + target[k, l] ** 2) / (n - 1))
                assert abs(emp[k, l] - target[k, l]) < 3 * se

    def test_zero_mean(self):
        rng = np.random.default_rng(3)
        spec = SpatialSpec(phi=2.0, sigma2=1.0)
        draws = sample_spatial_effects(SiteCoords.unit_lattice(9), spec, rng, size=20_000)
        se = draws.std(ddof=1, axis=0) / np.sqrt(draws.shape[0])
        assert np.all(np.abs(draws.mean(axis=0)) < 3 * se)


class TestNeighborGraph:
    def test_first_site_has_no_neighbors(self):
        g = build_neighbor_graph(SiteCoords.unit_lattice(9), m=3)
        assert g.neighbors[0].size == 0

    def test_full_neighborhood_when_m_large(self):
        g = build_neighbor_graph(SiteCoords.unit_lattice(8), m=7)
        assert set(g.neighbors[-1].tolist()) == set(range(7))

    def test_m5_large_lattice(self):
        # every site beyond the 6th has exactly 5 neighbors
        g = build_neighbor_graph(SiteCoords.unit_lattice(1200), m=5)
        counts = np.array([nb.size for nb in g.neighbors])
        assert (counts[6:] == 5).all()
        assert counts[:6].tolist() == [0, 1, 2, 3, 4, 5]

    def test_neighbors_precede(self):
        g = build_neighbor_graph(SiteCoords.unit_lattice(30), m=4)
        for k, nb in enumerate(g.neighbors):
            assert (np.asarray(nb) < k).all()

    def test_json_round_trip(self, tmp_path):
        g = build_neighbor_graph(SiteCoords.unit_lattice(12), m=3)
        path = tmp_path / "graph.json"
        g.to_json(path)
        back = NeighborGraph.from_json(path.read_text())
        assert (back.order == g.order).all()
        assert all((a == b).all() for a, b in zip(back.neighbors, g.neighbors))


class TestNNGPDensity:
    def test_exact_when_full_neighbors(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            n = int(rng.integers(2, 51))
            coords = SiteCoords(rng.random((n, 2)) * rng.uniform(0.5, 2.0))
            spec = SpatialSpec(phi=float(rng.uniform(0.5, 20)), sigma2=float(rng.uniform(0.2, 2)))
            omega = rng.normal(0, 1, n)
            graph = build_neighbor_graph(coords, m=n - 1)
            ours = nngp_log_density(omega, spec, graph)
            exact = multivariate_normal.logpdf(omega, mean=np.zeros(n), cov=covariance_matrix(coords, spec))
            assert ours == pytest.approx(exact, abs=1e-8)

    def test_single_site(self):
        spec = SpatialSpec(phi=1.0, sigma2=0.5)
        graph = build_neighbor_graph(SiteCoords([[0.0, 0.0]]), m=1)
        val = nngp_log_density([0.3], spec, graph)
        expected = -0.5 * (np.log(2 * np.pi * 0.5) + 0.09 / 0.5)
        assert val == pytest.approx(expected, abs=1e-12)

    def test_large_decay_approaches_independence(self):
        rng = np.random.default_rng(11)
        coords = SiteCoords(rng.random((20, 2)))
        spec = SpatialSpec(phi=1e4, sigma2=0.8)
        omega = rng.normal(0, 1, 20)
        graph = build_neighbor_graph(coords, m=5)
        indep = np.sum(-0.5 * (np.log(2 * np.pi * 0.8) + omega**2 / 0.8))
        assert nngp_log_density(omega, spec, graph) == pytest.approx(indep, abs=1e-6)

    def test_logdet_identity_full_neighbors(self):
        rng = np.random.default_rng(12)
        coords = SiteCoords(rng.random((25, 2)))
        spec = SpatialSpec(phi=3.0, sigma2=1.2)
        graph = build_neighbor_graph(coords, m=24)
        _, f = nngp_factors(graph, spec.phi)
        _, logdet = np.linalg.slogdet(covariance_matrix(coords, spec))
        assert np.sum(np.log(spec.sigma2 * f)) == pytest.approx(logdet, abs=1e-8)

    def test_insensitive_to_tiny_jitter(self):
        # density against an exact MVN whose diagonal carries jitter <= 1e-10
        rng = np.random.default_rng(13)
        for _ in range(10):
            n = int(rng.integers(3, 31))
            coords = SiteCoords(rng.random((n, 2)))
            spec = SpatialSpec(phi=2.5, sigma2=0.9)
            omega = rng.normal(0, 1, n)
            graph = build_neighbor_graph(coords, m=n - 1)
            cov = covariance_matrix(coords, spec) + 1e-10 * np.eye(n)
            jittered = multivariate_normal.logpdf(omega, mean=np.zeros(n), cov=cov)
            assert nngp_log_density(omega, spec, graph) == pytest.approx(jittered, abs=1e-6)


class TestAR1:
    def test_lag_zero(self):
        assert ar1_covariance(0, TemporalSpec(rho=0.9, sigma2T=1.5)) == pytest.approx(1.5)

    def test_high_values_lag_two(self):
        assert ar1_covariance(2, TemporalSpec(rho=0.9, sigma2T=1.5)) == pytest.approx(1.215, abs=1e-12)

    def test_low_values_lag_one(self):
        assert ar1_covariance(1, TemporalSpec(rho=0.5, sigma2T=0.3)) == pytest.approx(0.15, abs=1e-12)

    def test_negative_lag_rejected(self):
        with pytest.raises(UsageError):
            ar1_covariance(-1, TemporalSpec(rho=0.5, sigma2T=0.3))

    def test_single_occasion_variance(self):
        rng = np.random.default_rng(21)
        spec = TemporalSpec(rho=0.9, sigma2T=1.5)
        draws = sample_temporal_effects(1, spec, rng, size=100_000)
        mc_se = np.sqrt(2.0 / (draws.size - 1)) * spec.sigma2T
        assert abs(draws.var(ddof=1) - spec.sigma2T) < 3 * mc_se

    def test_lag_one_autocovariance(self):
        rng = np.random.default_rng(22)
        spec = TemporalSpec(rho=0.9, sigma2T=1.5)
        draws = sample_temporal_effects(10, spec, rng, size=10_000)
        pairs_a = draws[:, :-1].ravel()
        pairs_b = draws[:, 1:].ravel()
        emp = np.mean(pairs_a * pairs_b)
        target = ar1_covariance(1, spec)
        se = np.std(pairs_a * pairs_b, ddof=1) / np.sqrt(pairs_a.size / 10)  # conservative: correlated pairs
        assert abs(emp - target) < 3 * se

    def test_rho_zero_uncorrelated(self):
        rng = np.random.default_rng(23)
        spec = TemporalSpec(rho=0.0, sigma2T=1.0)
        draws = sample_temporal_effects(2, spec, rng, size=50_000)
        corr = np.corrcoef(draws[:, 0], draws[:, 1])[0, 1]
        assert abs(corr) < 3.0 / np.sqrt(draws.shape[0])

    def test_stationary_marginal_variance(self):
        rng = np.random.default_rng(24)
        spec = TemporalSpec(rho=0.5, sigma2T=0.3)
        draws = sample_temporal_effects(8, spec, rng, size=40_000)
        for t in range(8):
            v = draws[:, t].var(ddof=1)
            mc_se = np.sqrt(2.0 / (draws.shape[0] - 1)) * spec.sigma2T
            assert abs(v - spec.sigma2T) < 3 * mc_se

    def test_log_density_matches_mvn(self):
        rng = np.random.default_rng(25)
        spec = TemporalSpec(rho=0.7, sigma2T=0.9)
        eta = rng.normal(0, 1, 6)
        lags = np.abs(np.subtract.outer(np.arange(6), np.arange(6)))
        cov = spec.sigma2T * spec.rho ** lags
        assert ar1_log_density(eta, spec) == pytest.approx(
            multivariate_normal.logpdf(eta, mean=np.zeros(6), cov=cov), abs=1e-9
        )
