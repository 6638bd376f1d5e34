"""Posterior predictive sampling at arbitrary locations and evaluation
metrics.

For each retained sample, a new location draws its latent value from the
Gaussian conditional given that sample's reference values, membership vector
and covariance parameters, through the parent set its partition resolves to;
locations already carried by the chain reuse their stored values.  The
response adds the regression mean and nugget noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .covariance import CovarianceParams, cond_moments, point_parent_stack
from .dagbag import DirectionBag, resolve_parents
from .domain import PartitionedData, ValidationError
from .mcmc import ChainResult, substream

__all__ = [
    "PredictionResult",
    "MetricReport",
    "predict_at",
    "compute_metrics",
    "direction_posterior",
]

STEP_PREDICT = 101


@dataclass
class PredictionResult:
    """Per-location posterior predictive summaries of the response."""

    locations: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    lo95: np.ndarray
    hi95: np.ndarray
    w_mean: np.ndarray
    y_samples: np.ndarray | None = None


@dataclass
class MetricReport:
    rmspe: float
    mape: float
    ci_coverage_95: float
    ci_width_95: float


def predict_at(locations, chain: ChainResult, pdata: PartitionedData,
               bag: DirectionBag, X_new=None, seed: int = 0,
               keep_samples: bool = False) -> PredictionResult:
    """Posterior predictive draws of y at `locations` from a fitted chain.

    Locations matching a chain-state location by exact coordinates reuse the
    stored latent draws; all others are sampled conditionally on each
    retained sample's reference values through the resolved parent stack of
    their partition.
    """
    locations = np.atleast_2d(np.asarray(locations, dtype=float))
    n_loc = len(locations)
    n_samp = chain.n_samples
    if n_samp < 1:
        raise ValidationError("need at least one retained sample to predict")
    if n_loc == 0:
        empty = np.empty(0)
        return PredictionResult(locations=locations, mean=empty, sd=empty,
                                lo95=empty, hi95=empty, w_mean=empty)
    X_new = (np.zeros((n_loc, 0)) if X_new is None
             else np.asarray(X_new, dtype=float).reshape(n_loc, -1))
    if X_new.shape[1] != pdata.p:
        raise ValidationError("covariate count mismatch with the fitted model")

    # rows whose latent values the chain already carries
    stored_kind = np.full(n_loc, -1, dtype=int)   # 0 -> w_s, 1 -> w_u
    stored_pos = np.full(n_loc, -1, dtype=int)
    lookup: dict[bytes, tuple[int, int]] = {}
    for pos, row in enumerate(pdata.ref_rows_flat):
        lookup[pdata.locations[row].tobytes()] = (0, pos)
    for pos, row in enumerate(pdata.u_rows_flat):
        lookup[pdata.locations[row].tobytes()] = (1, pos)
    for r in range(n_loc):
        hit = lookup.get(np.ascontiguousarray(locations[r]).tobytes())
        if hit is not None:
            stored_kind[r], stored_pos[r] = hit
    fresh = np.flatnonzero(stored_kind < 0)
    cells = pdata.scheme.assign(locations[fresh]) if len(fresh) else np.empty(0, int)
    by_cell: dict[int, np.ndarray] = {}
    for cell in np.unique(cells):
        by_cell[int(cell)] = fresh[cells == cell]

    counts = pdata.k_i
    w_draws = np.empty((n_samp, n_loc))
    y_draws = np.empty((n_samp, n_loc))
    for j in range(n_samp):
        theta = CovarianceParams(a=chain.theta[j, 0], c=chain.theta[j, 1],
                                 kappa=chain.theta[j, 2], sigma2=chain.theta[j, 3],
                                 nu=chain.nu)
        w_s = chain.w_s[j]
        w_row = w_draws[j]
        reuse = stored_kind >= 0
        if np.any(reuse):
            is_ref = reuse & (stored_kind == 0)
            is_u = reuse & (stored_kind == 1)
            w_row[is_ref] = w_s[stored_pos[is_ref]]
            w_row[is_u] = chain.w_u[j][stored_pos[is_u]]
        if len(fresh):
            config = resolve_parents(pdata.scheme, bag, chain.z[j], counts=counts)
            for cell, rows in by_cell.items():
                coords, stack_idx, _ = point_parent_stack(pdata, config, cell)
                mom = cond_moments(locations[rows], coords, theta)
                mu = mom.H @ w_s[stack_idx] if len(stack_idx) else np.zeros(len(rows))
                var = np.maximum(np.diag(mom.R), 0.0)
                rng = substream(seed, j, STEP_PREDICT, cell + 1)
                w_row[rows] = mu + np.sqrt(var) * rng.standard_normal(len(rows))
        mean_y = w_row + (X_new @ chain.beta[j] if pdata.p else 0.0)
        rng_y = substream(seed, j, STEP_PREDICT)
        y_draws[j] = mean_y + np.sqrt(chain.tau2[j]) * rng_y.standard_normal(n_loc)

    lo, hi = np.quantile(y_draws, [0.025, 0.975], axis=0)
    return PredictionResult(
        locations=locations,
        mean=y_draws.mean(axis=0),
        sd=y_draws.std(axis=0, ddof=1) if n_samp > 1 else np.zeros(n_loc),
        lo95=lo,
        hi95=hi,
        w_mean=w_draws.mean(axis=0),
        y_samples=y_draws if keep_samples else None,
    )


def compute_metrics(truth, result: PredictionResult) -> MetricReport:
    """Held-out error and interval metrics against known responses."""
    truth = np.asarray(truth, dtype=float)
    if truth.shape != result.mean.shape:
        raise ValidationError("truth and prediction lengths differ")
    err = result.mean - truth
    inside = (truth >= result.lo95) & (truth <= result.hi95)
    return MetricReport(
        rmspe=float(np.sqrt(np.mean(err ** 2))),
        mape=float(np.mean(np.abs(err))),
        ci_coverage_95=float(np.mean(inside)),
        ci_width_95=float(np.mean(result.hi95 - result.lo95)),
    )


def direction_posterior(chain: ChainResult) -> tuple[np.ndarray, np.ndarray]:
    """Per-partition posterior direction frequencies and the modal direction.

    Ties break toward the lower direction index for determinism.
    """
    if chain.n_samples < 1:
        raise ValidationError("need at least one retained sample")
    n_samp, M = chain.z.shape
    K = chain.bag.K
    freq = np.zeros((M, K))
    for h in range(K):
        freq[:, h] = np.sum(chain.z == h, axis=0) / n_samp
    modal = np.argmax(freq, axis=1)
    return freq, modal
