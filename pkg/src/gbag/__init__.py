"""Nonstationary spatiotemporal Gaussian process regression via local
mixtures of directed acyclic graphs over domain partitions."""

from .covariance import (CondMoments, CovarianceParams, base_cov, cond_moments,
                         cov_block, cov_surface, dag_joint_precision,
                         dag_log_density, induced_cov_given_z,
                         induced_cov_marginal, induced_cov_marginal_mc,
                         induced_cov_matrix)
from .dagbag import (DagConfig, DirectionBag, check_acyclic, common_z_configs,
                     enumerate_bag_dags, greedy_coloring, precision_sparsity,
                     resolve_parents, topological_order)
from .domain import (NumericalError, PartitionedData, PartitionScheme,
                     ValidationError, assign_partition, build_partition,
                     load_csv, split_reference, write_csv)
from .mcmc import (ChainResult, ChainSettings, GibbsSampler, PosteriorSample,
                   RamAdapter, run_chain, substream)
from .model import ModelState, Priors, log_joint, purpleair_calibrate
from .predict import (MetricReport, PredictionResult, compute_metrics,
                      direction_posterior, predict_at)
from .simulate import (SimData, SimScenario, direction_layout,
                       covariance_surface_experiments, generate_gbag_data,
                       generate_matern_drift_data, preset_scenario,
                       regular_grid, subsample_to_grid)

__version__ = "0.1.0"
