"""Multi-season site-occupancy models with spatiotemporal random effects:
simulation designs, NNGP/AR(1) Gibbs inference, identifiability
diagnostics, and a config-driven study harness."""

from .core import (
    Covariates,
    EncounterArray,
    LatentStates,
    ModelParams,
    RandomEffects,
    detection_field,
    detection_probability,
    marginal_log_likelihood,
    occupancy_field,
    occupancy_probability,
    primary_occasion_probability,
)
from .convergence import effective_sample_size, gelman_rubin
from .errors import DataError, DataIntegrityWarning, NumericalError, OccufieldError, UsageError
from .fields import (
    NeighborGraph,
    SiteCoords,
    SpatialSpec,
    TemporalSpec,
    ar1_covariance,
    ar1_log_density,
    build_neighbor_graph,
    exp_correlation,
    nngp_log_density,
    sample_spatial_effects,
    sample_temporal_effects,
)
from .mcmc import MCMCConfig, PosteriorSamples, PriorSpec, fit, predict
from .simulate import (
    ScenarioSpec,
    SimulatedDataset,
    design_bernoulli,
    design_cluster,
    design_phenology,
    design_poisson,
    generate_covariates,
    phenology_weights,
    simulate_dataset,
    sub_scenario_grid,
)

__version__ = "0.1.0"
