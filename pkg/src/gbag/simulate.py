"""Synthetic data generation: ancestral sampling along a known partition
DAG, preset scenarios, and the covariance-surface experiments.

Ground-truth direction layouts vary over space and time; the two standard
layouts (3x3x4 and 6x6x8 partition lattices) are checked in under
``gbag/data`` and reproduced exactly by :func:`direction_layout`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy.linalg import solve_triangular

from .covariance import (CovarianceParams, base_cov, cond_moments, cov_surface,
                         ref_parent_stack, robust_cholesky)
from .dagbag import DagConfig, DirectionBag, common_z_configs, resolve_parents, topological_order
from .domain import (PartitionedData, PartitionScheme, ValidationError,
                     build_partition, split_reference)
from .mcmc import substream

__all__ = [
    "SimScenario",
    "SimData",
    "regular_grid",
    "direction_layout",
    "load_layout",
    "generate_gbag_data",
    "generate_matern_drift_data",
    "subsample_to_grid",
    "covariance_surface_experiments",
    "preset_scenario",
    "PRESET_NAMES",
]

STEP_SIM_X, STEP_SIM_W, STEP_SIM_EPS = 201, 202, 203

DEFAULT_BAG = ("W", "NW", "N", "NE")


@dataclass
class SimScenario:
    """Everything needed to draw one synthetic dataset."""

    grid: tuple[int, int, int]
    partition_dims: tuple[int, int, int]
    theta: CovarianceParams
    layout: np.ndarray                      # per-partition direction index
    bag: DirectionBag = field(default_factory=lambda: DirectionBag(DEFAULT_BAG))
    beta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tau2: float = 0.01
    x_var: float = 0.1

    def __post_init__(self):
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        self.layout = np.asarray(self.layout, dtype=int)
        M = int(np.prod(self.partition_dims))
        if self.layout.shape != (M,):
            raise ValidationError("layout must assign one direction per partition")
        if np.any((self.layout < 0) | (self.layout >= self.bag.K)):
            raise ValidationError("layout directions must index into the bag")
        if self.tau2 < 0:
            raise ValidationError("tau2 must be non-negative")


@dataclass
class SimData:
    locations: np.ndarray
    X: np.ndarray
    y: np.ndarray
    w: np.ndarray
    z_true: np.ndarray
    scheme: PartitionScheme
    config: DagConfig
    pdata: PartitionedData


def regular_grid(dims: tuple[int, int, int]) -> np.ndarray:
    """Inclusive regular grid on [0,1]^3, ordered x fastest then y then time."""
    axes = [np.linspace(0.0, 1.0, n) if n > 1 else np.array([0.5]) for n in dims]
    xx, yy, tt = np.meshgrid(axes[0], axes[1], axes[2], indexing="ij")
    return np.column_stack([xx.ravel(order="F"), yy.ravel(order="F"), tt.ravel(order="F")])


def direction_layout(spatial_dims: tuple[int, int], n_time: int,
                     bag_names: tuple[str, ...] = DEFAULT_BAG) -> np.ndarray:
    """Space-time-varying ground-truth directions on the partition lattice.

    Slices cycle through four regimes resembling a wind field veering over
    time: uniform NW; uniform N; N along the west column with NE elsewhere;
    W along the north edge with NW elsewhere.  The layout is indexed like
    partitions (time slowest, then x, y).
    """
    n1, n2 = spatial_dims
    name_to_idx = {n: i for i, n in enumerate(bag_names)}
    for needed in ("W", "NW", "N", "NE"):
        if needed not in name_to_idx:
            raise ValidationError("layout requires directions W, NW, N, NE in the bag")
    out = np.empty(n_time * n1 * n2, dtype=int)
    pos = 0
    for t in range(n_time):
        for i1 in range(n1):
            for i2 in range(n2):
                regime = t % 4
                if regime == 0:
                    name = "NW"
                elif regime == 1:
                    name = "N"
                elif regime == 2:
                    name = "N" if i1 == 0 else "NE"
                else:
                    name = "W" if i2 == n2 - 1 else "NW"
                out[pos] = name_to_idx[name]
                pos += 1
    return out


def load_layout(spatial_dims: tuple[int, int], n_time: int) -> np.ndarray:
    """Checked-in layout file for the standard lattices."""
    fname = f"layout_{spatial_dims[0]}x{spatial_dims[1]}x{n_time}.csv"
    with resources.files("gbag.data").joinpath(fname).open() as fh:
        rows = list(csv.DictReader(fh))
    out = np.empty(len(rows), dtype=int)
    names = list(DEFAULT_BAG)
    for row in rows:
        out[int(row["partition"])] = names.index(row["direction"])
    return out


def _scheme_for(locations, partition_dims) -> PartitionScheme:
    return build_partition(locations, partition_dims)


def _ancestral_w(pdata: PartitionedData, config: DagConfig,
                 theta: CovarianceParams, seed: int) -> np.ndarray:
    """Draw the latent surface by sampling nodes in topological order from
    their parent conditionals."""
    w = np.zeros(pdata.k)
    for i in topological_order(config):
        ki = int(pdata.k_i[i])
        if ki == 0:
            continue
        coords, stack_idx, _ = ref_parent_stack(pdata, config, int(i))
        mom = cond_moments(pdata.ref_coords(int(i)), coords, theta)
        L, _ = robust_cholesky(mom.R, theta.sigma2)
        mean = mom.H @ w[stack_idx] if len(stack_idx) else 0.0
        rng = substream(seed, 0, STEP_SIM_W, int(i) + 1)
        w[pdata.ref_slice(int(i))] = mean + L @ rng.standard_normal(ki)
    return w


def generate_gbag_data(scenario: SimScenario, seed: int = 0) -> SimData:
    """Simulate y = X beta + w + eps with w drawn along the true DAG."""
    locations = regular_grid(scenario.grid)
    n = len(locations)
    scheme = _scheme_for(locations, scenario.partition_dims)
    p = len(scenario.beta)
    rng_x = substream(seed, 0, STEP_SIM_X)
    X = rng_x.normal(0.0, np.sqrt(scenario.x_var), size=(n, p)) if p else np.zeros((n, 0))
    # geometry first: all simulated locations are reference points
    pdata = split_reference(locations, np.zeros(n), X, scheme)
    config = resolve_parents(scheme, scenario.bag, scenario.layout, counts=pdata.k_i)
    w_stacked = _ancestral_w(pdata, config, scenario.theta, seed)
    w = np.empty(n)
    w[pdata.ref_rows_flat] = w_stacked
    rng_e = substream(seed, 0, STEP_SIM_EPS)
    eps = rng_e.normal(0.0, np.sqrt(scenario.tau2), size=n) if scenario.tau2 > 0 else np.zeros(n)
    y = (X @ scenario.beta if p else 0.0) + w + eps
    pdata = split_reference(locations, y, X, scheme)
    return SimData(locations=locations, X=X, y=y, w=w, z_true=scenario.layout,
                   scheme=scheme, config=config, pdata=pdata)


def generate_matern_drift_data(scenario: SimScenario, seed: int = 0) -> SimData:
    """Fixed-direction surface under the smoothness-nu base covariance."""
    if scenario.theta.nu is None:
        raise ValidationError("drift scenario requires a Matern smoothness nu")
    return generate_gbag_data(scenario, seed=seed)


def subsample_to_grid(sim: SimData, keep: tuple[int, int, int]) -> dict[str, np.ndarray]:
    """Coordinate-filter a generated dataset to a coarser inclusive grid.

    Rows are kept when every coordinate matches the coarser per-axis value
    sets; no re-simulation happens.
    """
    mask = np.ones(len(sim.locations), dtype=bool)
    for ax, n_keep in enumerate(keep):
        vals = np.unique(sim.locations[:, ax])
        if n_keep > len(vals):
            raise ValidationError("cannot keep more grid lines than exist")
        idx = np.round(np.linspace(0, len(vals) - 1, n_keep)).astype(int)
        keep_vals = vals[idx]
        mask &= np.isin(sim.locations[:, ax], keep_vals)
    return {"mask": mask, "locations": sim.locations[mask], "y": sim.y[mask],
            "X": sim.X[mask], "w": sim.w[mask]}


def covariance_surface_experiments() -> dict[str, dict]:
    """Covariance-surface studies on the two standard reference grids.

    'orientation': a 30x30x4 reference grid over 3x3x4 partitions, mixing
    the all-W / all-NW / all-N configurations with weights 0.5 / 0.4 / 0.1
    at (a, c, kappa, sigma2) = (0.7, 0.8, 0, 1); surfaces are covariances
    between the central reference point and every grid point, with the
    stationary base covariance as a baseline.

    'persistence': a 3x3x30 grid with one partition per grid point, a single
    all-W configuration and faster temporal decay a = 2; returns covariance
    curves from the central point to its west and east neighbors over time.
    """
    out: dict[str, dict] = {}

    # orientation study
    grid = regular_grid((30, 30, 4))
    scheme = build_partition(grid, (3, 3, 4))
    pdata = split_reference(grid, np.zeros(len(grid)), np.zeros((len(grid), 0)), scheme)
    bag = DirectionBag(("W", "NW", "N"))
    params = CovarianceParams(a=0.7, c=0.8, kappa=0.0, sigma2=1.0)
    target = np.array([0.5, 0.5, 1.0 / 3.0])
    ref_row = int(np.argmin(np.sum((grid - target) ** 2, axis=1)))
    ref_loc = grid[ref_row]
    configs = [
        (resolve_parents(scheme, bag, z, counts=pdata.k_i), prob)
        for z, prob in common_z_configs(bag, scheme.M, (0.5, 0.4, 0.1))
    ]
    mixture = cov_surface(ref_loc, grid, pdata, configs, params)
    lag_s = grid[:, :2] - ref_loc[:2]
    lag_t = grid[:, 2] - ref_loc[2]
    stationary = base_cov(lag_s, lag_t, params)
    out["orientation"] = {
        "locations": grid, "reference": ref_loc, "mixture": mixture,
        "stationary": np.asarray(stationary), "params": params,
        "pdata": pdata, "configs": configs, "bag": bag,
    }

    # persistence study
    grid_b = regular_grid((3, 3, 30))
    scheme_b = build_partition(grid_b, (3, 3, 30))
    pdata_b = split_reference(grid_b, np.zeros(len(grid_b)), np.zeros((len(grid_b), 0)), scheme_b)
    bag_b = DirectionBag(("W",))
    params_b = CovarianceParams(a=2.0, c=0.8, kappa=0.0, sigma2=1.0)
    times = np.unique(grid_b[:, 2])
    t_star = times[14]
    ref_loc_b = np.array([0.5, 0.5, t_star])
    config_b = resolve_parents(scheme_b, bag_b, np.zeros(scheme_b.M, dtype=int),
                               counts=pdata_b.k_i)
    surface = cov_surface(ref_loc_b, grid_b, pdata_b, [(config_b, 1.0)], params_b)
    west_rows = np.flatnonzero((grid_b[:, 0] == 0.0) & (grid_b[:, 1] == 0.5))
    east_rows = np.flatnonzero((grid_b[:, 0] == 1.0) & (grid_b[:, 1] == 0.5))
    west_rows = west_rows[np.argsort(grid_b[west_rows, 2])]
    east_rows = east_rows[np.argsort(grid_b[east_rows, 2])]
    lag_w = grid_b[west_rows, :2] - ref_loc_b[:2]
    lag_e = grid_b[east_rows, :2] - ref_loc_b[:2]
    out["persistence"] = {
        "locations": grid_b, "reference": ref_loc_b, "times": times,
        "t_star": float(t_star), "surface": surface,
        "upstream": surface[west_rows], "downstream": surface[east_rows],
        "upstream_stationary": np.asarray(base_cov(lag_w, grid_b[west_rows, 2] - t_star, params_b)),
        "downstream_stationary": np.asarray(base_cov(lag_e, grid_b[east_rows, 2] - t_star, params_b)),
        "params": params_b, "pdata": pdata_b, "config": config_b,
    }
    return out


THETA1 = CovarianceParams(a=5.0, c=0.5, kappa=0.9, sigma2=2.0)
THETA2 = CovarianceParams(a=10.0, c=0.1, kappa=0.2, sigma2=2.0)
THETA3 = CovarianceParams(a=5.0, c=20.0, kappa=1.0, sigma2=150.0, nu=1.5)
THETA4 = CovarianceParams(a=10.0, c=20.0, kappa=1.0, sigma2=150.0, nu=1.5)

PRESET_NAMES = ("sim1-theta1", "sim1-theta2", "sim1-desk",
                "sim2-theta3", "sim2-theta4")


def preset_scenario(name: str, full_lattice: bool = False) -> SimScenario:
    """Named scenarios for the standard experiments."""
    if name == "sim1-theta1" or name == "sim1-theta2":
        theta = THETA1 if name.endswith("theta1") else THETA2
        return SimScenario(grid=(40, 40, 8), partition_dims=(6, 6, 8), theta=theta,
                           layout=direction_layout((6, 6), 8), beta=np.array([2.0]),
                           tau2=0.01, x_var=0.1)
    if name == "sim1-desk":
        return SimScenario(grid=(20, 20, 4), partition_dims=(3, 3, 4), theta=THETA1,
                           layout=direction_layout((3, 3), 4), beta=np.array([2.0]),
                           tau2=0.01, x_var=0.1)
    if name in ("sim2-theta3", "sim2-theta4"):
        theta = THETA3 if name.endswith("theta3") else THETA4
        bag = DirectionBag(("N",))
        if full_lattice:
            dims, parts = (193, 193, 59), (1, 193, 59)
        else:
            dims, parts = (25, 25, 30), (1, 25, 30)
        M = int(np.prod(parts))
        return SimScenario(grid=dims, partition_dims=parts, theta=theta,
                           layout=np.zeros(M, dtype=int), bag=bag,
                           beta=np.zeros(0), tau2=0.1)
    raise ValidationError(f"unknown preset {name!r}; valid presets: {', '.join(PRESET_NAMES)}")
