"""Bayesian hierarchical regression with a graph-mixture Gaussian process
prior on the latent surface.

The observation model is y(t) = x(t)' beta + w(t) + eps(t), eps ~ N(0, tau2),
with w given the mixture-of-DAGs process prior over the partitioned domain.
Unknowns are {w_S, w_U, z, pi, beta, tau2, theta}; priors are normal for
beta, inverse-gamma for tau2 and sigma2, independent uniforms for (a, c,
kappa), and symmetric Dirichlet for each partition's direction weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln

from .covariance import (CovarianceParams, cond_moments, dag_log_density,
                         point_parent_stack, robust_cholesky)
from .dagbag import DagConfig, DirectionBag, resolve_parents
from .domain import PartitionedData, ValidationError

__all__ = [
    "Priors",
    "ModelState",
    "log_joint",
    "purpleair_calibrate",
    "log_invgamma",
    "log_dirichlet",
    "log_normal_vec",
]


@dataclass
class Priors:
    """Prior hyperparameters for every model unknown."""

    mu_beta: np.ndarray = field(default_factory=lambda: np.zeros(1))
    v_beta: np.ndarray = field(default_factory=lambda: np.eye(1) * 100.0)
    a_tau: float = 2.0
    b_tau: float = 0.1
    a_sigma: float = 2.0
    b_sigma: float = 1.0
    a_bounds: tuple[float, float] = (0.1, 20.0)
    c_bounds: tuple[float, float] = (0.1, 20.0)
    kappa_bounds: tuple[float, float] = (0.0, 1.0)
    alpha: float = 0.25

    def __post_init__(self):
        self.mu_beta = np.atleast_1d(np.asarray(self.mu_beta, dtype=float))
        self.v_beta = np.atleast_2d(np.asarray(self.v_beta, dtype=float))
        if self.v_beta.shape != (len(self.mu_beta),) * 2:
            raise ValidationError("v_beta must be square and match mu_beta")
        if not np.allclose(self.v_beta, self.v_beta.T):
            raise ValidationError("v_beta must be symmetric")
        for nm, (lo, hi) in [("a", self.a_bounds), ("c", self.c_bounds),
                             ("kappa", self.kappa_bounds)]:
            if not lo < hi:
                raise ValidationError(f"{nm} bounds must satisfy lo < hi")
        if min(self.a_tau, self.b_tau, self.a_sigma, self.b_sigma, self.alpha) <= 0:
            raise ValidationError("shape/scale/concentration must be positive")

    @property
    def theta_bounds(self) -> list[tuple[float, float]]:
        return [self.a_bounds, self.c_bounds, self.kappa_bounds]


@dataclass
class ModelState:
    """All latent values and parameters at one sampler iteration."""

    w_s: np.ndarray
    w_u: np.ndarray
    z: np.ndarray
    pi: np.ndarray
    beta: np.ndarray
    tau2: float
    theta: CovarianceParams

    def copy(self) -> "ModelState":
        return ModelState(
            w_s=self.w_s.copy(), w_u=self.w_u.copy(), z=self.z.copy(),
            pi=self.pi.copy(), beta=self.beta.copy(), tau2=float(self.tau2),
            theta=self.theta,
        )


def log_normal_vec(x, mean, var) -> float:
    """Sum of independent normal log densities."""
    x = np.asarray(x, dtype=float)
    mean = np.broadcast_to(np.asarray(mean, dtype=float), x.shape)
    var = np.broadcast_to(np.asarray(var, dtype=float), x.shape)
    return float(-0.5 * np.sum(np.log(2.0 * np.pi * var) + (x - mean) ** 2 / var))


def log_invgamma(x: float, shape: float, scale: float) -> float:
    if x <= 0:
        return -np.inf
    return float(shape * np.log(scale) - gammaln(shape)
                 - (shape + 1.0) * np.log(x) - scale / x)


def log_dirichlet(p, alpha) -> float:
    p = np.asarray(p, dtype=float)
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), p.shape)
    if np.any(p <= 0):
        return -np.inf
    return float(gammaln(alpha.sum()) - gammaln(alpha).sum()
                 + np.sum((alpha - 1.0) * np.log(p)))


def _log_uniform(x: float, bounds: tuple[float, float]) -> float:
    lo, hi = bounds
    return -np.log(hi - lo) if lo <= x <= hi else -np.inf


def gather_w_observed(pdata: PartitionedData, w_s, w_u) -> tuple[np.ndarray, np.ndarray]:
    """(row indices, latent values) for every observed location, in original
    row order."""
    n = len(pdata.locations)
    w_by_row = np.full(n, np.nan)
    w_by_row[pdata.ref_rows_flat] = w_s
    if pdata.n_u:
        w_by_row[pdata.u_rows_flat] = w_u
    obs = np.flatnonzero(np.isfinite(pdata.y))
    return obs, w_by_row[obs]


def log_joint(state: ModelState, pdata: PartitionedData, priors: Priors,
              bag: DirectionBag) -> float:
    """Full log posterior kernel (likelihood plus all prior terms).

    The latent reference term is always evaluated through the factorized
    node conditionals.  A non-finite result raises with the offending term
    named.
    """
    terms: dict[str, float] = {}
    config = resolve_parents(pdata.scheme, bag, state.z, counts=pdata.k_i)

    obs, w_obs = gather_w_observed(pdata, state.w_s, state.w_u)
    if len(obs):
        mean = pdata.X[obs] @ state.beta + w_obs if pdata.p else w_obs
        terms["likelihood"] = log_normal_vec(pdata.y[obs], mean, state.tau2)
    else:
        terms["likelihood"] = 0.0

    terms["w_reference"] = dag_log_density(pdata, config, state.theta, state.w_s)

    t_u = 0.0
    for i in range(pdata.M):
        sl = pdata.u_slice(i)
        if sl.stop == sl.start:
            continue
        coords, stack_idx, _ = point_parent_stack(pdata, config, i)
        mom = cond_moments(pdata.u_coords(i), coords, state.theta)
        mean = mom.H @ state.w_s[stack_idx] if len(stack_idx) else np.zeros(sl.stop - sl.start)
        t_u += log_normal_vec(state.w_u[sl], mean, np.diag(mom.R))
    terms["w_nonreference"] = t_u

    terms["z"] = float(np.sum(np.log(state.pi[np.arange(pdata.M), state.z])))
    terms["pi"] = float(sum(log_dirichlet(state.pi[i], priors.alpha * np.ones(bag.K))
                            for i in range(pdata.M)))
    if pdata.p:
        L, _ = robust_cholesky(priors.v_beta, 1.0)
        dev = solve_triangular(L, state.beta - priors.mu_beta, lower=True)
        terms["beta"] = float(-0.5 * len(dev) * np.log(2.0 * np.pi)
                              - np.sum(np.log(np.diag(L))) - 0.5 * dev @ dev)
    else:
        terms["beta"] = 0.0
    terms["tau2"] = log_invgamma(state.tau2, priors.a_tau, priors.b_tau)
    terms["sigma2"] = log_invgamma(state.theta.sigma2, priors.a_sigma, priors.b_sigma)
    terms["theta"] = (_log_uniform(state.theta.a, priors.a_bounds)
                      + _log_uniform(state.theta.c, priors.c_bounds)
                      + _log_uniform(state.theta.kappa, priors.kappa_bounds))

    total = 0.0
    for name, val in terms.items():
        if not np.isfinite(val):
            raise ValidationError(f"log joint term {name!r} is non-finite ({val})")
        total += val
    return float(total)


def purpleair_calibrate(pa_cf1, rh):
    """Calibrate raw low-cost PM2.5 sensor readings against regulatory
    monitors.

    For readings at or below 343 ug/m3 the humidity-adjusted linear fit
    5.75 + 0.52*PA - 0.09*RH applies; above that a quadratic in the raw
    reading takes over: 2.97 + 0.46*PA + 3.93e-4*PA^2.
    """
    pa = np.asarray(pa_cf1, dtype=float)
    rh_arr = np.asarray(rh, dtype=float)
    if np.any(pa < 0):
        raise ValidationError("raw PM2.5 readings must be non-negative")
    if np.any((rh_arr < 0) | (rh_arr > 100)):
        raise ValidationError("relative humidity must lie in [0, 100]")
    low = 5.75 + 0.52 * pa - 0.09 * rh_arr
    high = 2.97 + 0.46 * pa + 3.93e-4 * pa ** 2
    out = np.where(pa <= 343.0, low, high)
    return float(out) if out.ndim == 0 else out
