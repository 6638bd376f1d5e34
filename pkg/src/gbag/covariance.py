"""Base space-time covariances, Gaussian conditionals, and the graph-induced
nonstationary covariance.

The base family is the nonseparable space-time covariance

    C(h, u) = sigma2 / (a|u| + 1) * exp(-c ||h|| / (a|u| + 1)^(kappa/2))

with temporal decay a > 0, spatial decay c > 0 and interaction kappa in
[0, 1]; kappa = 0 factorizes exactly into spatial and temporal parts.  With a
smoothness nu the exponential part is replaced by the Matern form
x^nu K_nu(x) / (2^(nu-1) Gamma(nu)) at x = c||h|| / (a|u|+1)^(kappa/2); at
nu = 1/2 this reduces to the exponential family.

Everything downstream is standard Gaussian conditioning per graph node: with
parent stack covariance C_p and cross block C_xp, the regression matrix is
H = C_xp C_p^{-1} and the residual covariance R = C_x - C_xp C_p^{-1} C_px.
Stacking the block rows (I - H) and the block-diagonal R gives the sparse
precision (I - H)^T R^{-1} (I - H) of the latent vector over the reference
set, whose fill is exactly the moral graph of the partition DAG.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import sparse
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.sparse.linalg import splu
from scipy.spatial.distance import cdist
from scipy.special import gammaln, kv

from .dagbag import DagConfig
from .domain import NumericalError, PartitionedData, ValidationError

__all__ = [
    "CovarianceParams",
    "CondMoments",
    "base_cov",
    "cov_from_lags",
    "cov_block",
    "robust_cholesky",
    "cond_moments",
    "ref_parent_stack",
    "point_parent_stack",
    "dag_joint_precision",
    "dag_log_density",
    "induced_cov_matrix",
    "induced_cov_given_z",
    "induced_cov_marginal",
    "induced_cov_marginal_mc",
    "cov_surface",
    "sparse_to_coo_rows",
]

JITTER_START = 1e-10
JITTER_MAX = 1e-4


@dataclass(frozen=True)
class CovarianceParams:
    """Base covariance parameters (a, c, kappa, sigma2) plus optional nu."""

    a: float
    c: float
    kappa: float
    sigma2: float
    nu: float | None = None

    def __post_init__(self):
        if not (self.a > 0 and self.c > 0 and self.sigma2 > 0):
            raise ValidationError("a, c, sigma2 must be positive")
        if not (0.0 <= self.kappa <= 1.0):
            raise ValidationError("kappa must lie in [0, 1]")
        if self.nu is not None and not self.nu > 0:
            raise ValidationError("nu must be positive when present")

    def unit_variance(self) -> "CovarianceParams":
        return replace(self, sigma2=1.0)

    def with_(self, **kw) -> "CovarianceParams":
        return replace(self, **kw)


def cov_from_lags(sdist, tdist, params: CovarianceParams):
    """Covariance from precomputed spatial distances and absolute time lags."""
    sdist = np.asarray(sdist, dtype=float)
    tdist = np.abs(np.asarray(tdist, dtype=float))
    psi = params.a * tdist + 1.0
    x = params.c * sdist / psi ** (params.kappa / 2.0)
    if params.nu is None:
        radial = np.exp(-x)
    else:
        nu = params.nu
        with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
            log_m = nu * np.log(x) + np.log(kv(nu, x)) - (nu - 1) * np.log(2.0) - gammaln(nu)
            radial = np.where(x > 1e-12, np.exp(log_m), 1.0)
    return params.sigma2 / psi * radial


def base_cov(h, u, params: CovarianceParams):
    """Covariance at spatial lag vector(s) h and temporal lag(s) u."""
    h = np.asarray(h, dtype=float)
    if h.ndim == 0:
        sdist = np.abs(h)
    else:
        sdist = np.sqrt(np.sum(np.atleast_2d(h) ** 2, axis=-1))
        if np.asarray(h).ndim == 1:
            sdist = sdist[0]
    return cov_from_lags(sdist, u, params)


def cov_block(A, B, params: CovarianceParams) -> np.ndarray:
    """|A| x |B| covariance matrix between two location lists."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.size == 0 or B.size == 0:
        return np.zeros((A.shape[0], B.shape[0]))
    sdist = cdist(A[:, :-1], B[:, :-1])
    tdist = np.abs(A[:, -1:] - B[:, -1:].T)
    return cov_from_lags(sdist, tdist, params)


def robust_cholesky(mat: np.ndarray, scale: float) -> tuple[np.ndarray, float]:
    """Lower Cholesky with escalating diagonal jitter relative to `scale`.

    Jitter starts at 1e-10*scale and grows tenfold up to 1e-4*scale before
    giving up.
    """
    if mat.shape[0] == 0:
        return np.zeros((0, 0)), 0.0
    jitter = 0.0
    while True:
        try:
            L = cholesky(mat + jitter * np.eye(mat.shape[0]), lower=True)
            return L, jitter
        except np.linalg.LinAlgError:
            jitter = JITTER_START * scale if jitter == 0.0 else jitter * 10.0
            if jitter > JITTER_MAX * scale:
                raise NumericalError(
                    f"Cholesky failed at jitter {jitter:.1e} (scale {scale:.3g})"
                ) from None


@dataclass
class CondMoments:
    """Gaussian conditional of child locations given a parent stack.

    H maps stacked parent values to the conditional mean; R is the residual
    covariance.  parent_index_map records which global reference positions
    the columns of H address (empty when unset by the caller).
    """

    H: np.ndarray
    R: np.ndarray
    parent_index_map: np.ndarray | None = None

    @property
    def n_parents(self) -> int:
        return self.H.shape[1]


def cond_moments(child, parents, params: CovarianceParams,
                 parent_index_map=None) -> CondMoments:
    """Conditional moments of `child` given `parents` under the base GP.

    With no parents H has zero columns and R is the child marginal
    covariance.
    """
    child = np.atleast_2d(np.asarray(child, dtype=float))
    parents = np.atleast_2d(np.asarray(parents, dtype=float))
    nc = child.shape[0]
    C_c = cov_block(child, child, params)
    if parents.size == 0:
        return CondMoments(H=np.zeros((nc, 0)), R=C_c, parent_index_map=parent_index_map)
    C_p = cov_block(parents, parents, params)
    C_cp = cov_block(child, parents, params)
    L, _ = robust_cholesky(C_p, params.sigma2)
    # H = C_cp C_p^{-1} via two triangular solves
    H = cho_solve((L, True), C_cp.T).T
    R = C_c - H @ C_cp.T
    R = 0.5 * (R + R.T)
    return CondMoments(H=H, R=R, parent_index_map=parent_index_map)


def ref_parent_stack(pdata: PartitionedData, config: DagConfig, i: int):
    """Parent stack of reference node i: spatial parent refs then temporal.

    Returns (coords, global reference positions, block layout) where the
    layout lists (partition, col_lo, col_hi) for each non-empty component.
    """
    coords, idx, blocks = [], [], []
    off = 0
    for j in (int(config.spatial_parent[i]), int(config.temporal_parent[i])):
        if j < 0:
            continue
        kj = int(pdata.k_i[j])
        if kj == 0:
            continue
        coords.append(pdata.ref_coords(j))
        sl = pdata.ref_slice(j)
        idx.append(np.arange(sl.start, sl.stop))
        blocks.append((j, off, off + kj))
        off += kj
    if not coords:
        d = pdata.locations.shape[1]
        return np.zeros((0, d)), np.zeros(0, dtype=int), []
    return np.vstack(coords), np.concatenate(idx), blocks


def point_parent_stack(pdata: PartitionedData, config: DagConfig, i: int):
    """Parent stack for non-reference points of partition i: own references
    first, then the node's spatial and temporal parents."""
    coords, idx, blocks = [], [], []
    off = 0
    ki = int(pdata.k_i[i])
    if ki > 0:
        coords.append(pdata.ref_coords(i))
        sl = pdata.ref_slice(i)
        idx.append(np.arange(sl.start, sl.stop))
        blocks.append((i, 0, ki))
        off = ki
    p_coords, p_idx, p_blocks = ref_parent_stack(pdata, config, i)
    if len(p_idx):
        coords.append(p_coords)
        idx.append(p_idx)
        blocks.extend((j, lo + off, hi + off) for j, lo, hi in p_blocks)
    if not coords:
        d = pdata.locations.shape[1]
        return np.zeros((0, d)), np.zeros(0, dtype=int), []
    return np.vstack(coords), np.concatenate(idx), blocks


def dag_joint_precision(pdata: PartitionedData, config: DagConfig,
                        params: CovarianceParams) -> sparse.csc_matrix:
    """Sparse precision of the stacked reference vector under one DAG.

    Assembled block-row by block-row as (I - H)^T R^{-1} (I - H): node i
    contributes R_i^{-1} on its diagonal block, -R_i^{-1} H_{i,j} toward each
    parent block j, and H_{i,j1}^T R_i^{-1} H_{i,j2} between parent pairs
    (the married co-parents of the moral graph).
    """
    k = pdata.k
    rows, cols, vals = [], [], []

    def add(block, r0, c0):
        rr, cc = np.nonzero(np.ones_like(block, dtype=bool))
        rows.append(rr + r0)
        cols.append(cc + c0)
        vals.append(block.ravel())

    for i in range(pdata.M):
        ki = int(pdata.k_i[i])
        if ki == 0:
            continue
        stack, _, blocks = ref_parent_stack(pdata, config, i)
        mom = cond_moments(pdata.ref_coords(i), stack, params)
        L, _ = robust_cholesky(mom.R, params.sigma2)
        Rinv = cho_solve((L, True), np.eye(ki))
        Rinv = 0.5 * (Rinv + Rinv.T)
        i0 = pdata.ref_offsets[i]
        add(Rinv, i0, i0)
        for j, lo, hi in blocks:
            Hj = mom.H[:, lo:hi]
            j0 = pdata.ref_offsets[j]
            RiH = Rinv @ Hj
            add(-RiH, i0, j0)
            add(-RiH.T, j0, i0)
            for j2, lo2, hi2 in blocks:
                Hj2 = mom.H[:, lo2:hi2]
                add(Hj.T @ Rinv @ Hj2, j0, pdata.ref_offsets[j2])
    if not rows:
        return sparse.csc_matrix((k, k))
    mat = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(k, k),
    )
    return mat.tocsc()


def dag_log_density(pdata: PartitionedData, config: DagConfig,
                    params: CovarianceParams, w_s: np.ndarray) -> float:
    """Log density of the stacked reference vector as a product of node
    conditionals; never forms the dense covariance."""
    w_s = np.asarray(w_s, dtype=float)
    if w_s.shape != (pdata.k,):
        raise ValidationError("w_s length must equal the reference count")
    total = 0.0
    for i in range(pdata.M):
        ki = int(pdata.k_i[i])
        if ki == 0:
            continue
        stack, stack_idx, _ = ref_parent_stack(pdata, config, i)
        mom = cond_moments(pdata.ref_coords(i), stack, params)
        L, _ = robust_cholesky(mom.R, params.sigma2)
        resid = w_s[pdata.ref_slice(i)] - mom.H @ w_s[stack_idx]
        alpha = solve_triangular(L, resid, lower=True)
        total += (-0.5 * ki * np.log(2.0 * np.pi)
                  - np.sum(np.log(np.diag(L)))
                  - 0.5 * float(alpha @ alpha))
    return float(total)


def _classify_locations(locs: np.ndarray, pdata: PartitionedData):
    """Match rows of `locs` against the reference set by exact coordinates.

    Returns per-row reference positions (-1 for non-reference rows).
    """
    lookup = {}
    ref_rows = pdata.ref_rows_flat
    for pos, row in enumerate(ref_rows):
        lookup[pdata.locations[row].tobytes()] = pos
    out = np.full(len(locs), -1, dtype=int)
    for r in range(len(locs)):
        out[r] = lookup.get(np.ascontiguousarray(locs[r]).tobytes(), -1)
    return out


def _ctilde_columns(pdata, config, params, cols: np.ndarray) -> np.ndarray:
    """Selected columns of the implied reference covariance via sparse solves."""
    prec = dag_joint_precision(pdata, config, params)
    lu = splu(prec)
    rhs = np.zeros((pdata.k, len(cols)))
    rhs[cols, np.arange(len(cols))] = 1.0
    return lu.solve(rhs)


def induced_cov_matrix(locs, pdata: PartitionedData, config: DagConfig,
                       params: CovarianceParams) -> np.ndarray:
    """Covariance matrix of process values at arbitrary locations, given one
    DAG configuration.

    Three cases per pair: reference-reference entries read the implied
    reference covariance; non-reference rows regress onto their parent stack
    (own partition references plus the node's parents); two non-reference
    rows add the residual variance only at identical coordinates.
    """
    locs = np.atleast_2d(np.asarray(locs, dtype=float))
    nl = len(locs)
    ref_pos = _classify_locations(locs, pdata)
    stacks = {}
    for r in np.flatnonzero(ref_pos < 0):
        cell = int(pdata.scheme.assign(locs[r: r + 1])[0])
        if cell not in stacks:
            stacks[cell] = point_parent_stack(pdata, config, cell)
        coords, stack_idx, _ = stacks[cell]
        mom = cond_moments(locs[r: r + 1], coords, params)
        stacks[(r, "mom")] = (cell, mom, stack_idx)

    needed = set(int(p) for p in ref_pos if p >= 0)
    for r in np.flatnonzero(ref_pos < 0):
        needed.update(int(v) for v in stacks[(r, "mom")][2])
    cols = np.array(sorted(needed), dtype=int)
    col_pos = {int(c): t for t, c in enumerate(cols)}
    ct_cols = (_ctilde_columns(pdata, config, params, cols)
               if len(cols) else np.zeros((pdata.k, 0)))

    def ct(idx_a, idx_b) -> np.ndarray:
        ta = np.asarray(idx_a, dtype=int)
        tb = np.array([col_pos[int(b)] for b in np.asarray(idx_b, dtype=int)], dtype=int)
        return ct_cols[np.ix_(ta, tb)]

    out = np.empty((nl, nl))
    for r1 in range(nl):
        for r2 in range(r1, nl):
            p1, p2 = ref_pos[r1], ref_pos[r2]
            if p1 >= 0 and p2 >= 0:
                v = ct([p1], [p2])[0, 0]
            elif p1 < 0 and p2 >= 0:
                _, mom, sidx = stacks[(r1, "mom")]
                v = float((mom.H @ ct(sidx, [p2]))[0, 0]) if len(sidx) else 0.0
            elif p1 >= 0 and p2 < 0:
                _, mom, sidx = stacks[(r2, "mom")]
                v = float((mom.H @ ct(sidx, [p1]))[0, 0]) if len(sidx) else 0.0
            else:
                _, mom1, sidx1 = stacks[(r1, "mom")]
                _, mom2, sidx2 = stacks[(r2, "mom")]
                v = 0.0
                if len(sidx1) and len(sidx2):
                    v = float((mom1.H @ ct(sidx1, sidx2) @ mom2.H.T)[0, 0])
                if np.array_equal(locs[r1], locs[r2]):
                    v += float(mom1.R[0, 0])
            out[r1, r2] = v
            out[r2, r1] = v
    return out


def induced_cov_given_z(l1, l2, pdata: PartitionedData, config: DagConfig,
                        params: CovarianceParams) -> float:
    """Process covariance between two locations for a fixed configuration."""
    locs = np.vstack([np.asarray(l1, dtype=float), np.asarray(l2, dtype=float)])
    return float(induced_cov_matrix(locs, pdata, config, params)[0, 1])


def induced_cov_marginal(l1, l2, pdata: PartitionedData, weighted_configs,
                         params: CovarianceParams) -> float:
    """Mixture covariance: probability-weighted sum over configurations."""
    total = 0.0
    for config, prob in weighted_configs:
        if prob == 0.0:
            continue
        total += prob * induced_cov_given_z(l1, l2, pdata, config, params)
    return float(total)


def induced_cov_marginal_mc(l1, l2, pdata, scheme, bag, pi, params,
                            n_draws: int = 10_000, seed: int = 0):
    """Monte-Carlo mixture covariance over independent per-partition draws.

    Returns (estimate, standard error).  Used when exhaustive enumeration of
    the K^M configurations is out of reach.
    """
    from .dagbag import resolve_parents  # local import to avoid cycle noise

    pi = np.asarray(pi, dtype=float)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    counts = np.asarray(pdata.k_i)
    vals = np.empty(n_draws)
    cache: dict[bytes, float] = {}
    for t in range(n_draws):
        z = np.array([rng.choice(bag.K, p=pi[i]) for i in range(scheme.M)])
        key = z.tobytes()
        if key not in cache:
            cfg = resolve_parents(scheme, bag, z, counts=counts)
            cache[key] = induced_cov_given_z(l1, l2, pdata, cfg, params)
        vals[t] = cache[key]
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_draws))


def cov_surface(ref_loc, grid, pdata: PartitionedData, weighted_configs,
                params: CovarianceParams) -> np.ndarray:
    """Mixture covariance between one reference location and a grid.

    The reference location must belong to the reference set; one sparse
    solve per configuration then serves every grid point.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    ref_loc = np.asarray(ref_loc, dtype=float).reshape(1, -1)
    ref_pos = _classify_locations(ref_loc, pdata)[0]
    if ref_pos < 0:
        raise ValidationError("surface reference point must be in the reference set")
    out = np.zeros(len(grid))
    for config, prob in weighted_configs:
        if prob == 0.0:
            continue
        col = _ctilde_columns(pdata, config, params, np.array([ref_pos]))[:, 0]
        grid_pos = _classify_locations(grid, pdata)
        vals = np.empty(len(grid))
        stacks = {}
        for r in range(len(grid)):
            p = grid_pos[r]
            if p >= 0:
                vals[r] = col[p]
                continue
            cell = int(pdata.scheme.assign(grid[r: r + 1])[0])
            if cell not in stacks:
                stacks[cell] = point_parent_stack(pdata, config, cell)
            coords, stack_idx, _ = stacks[cell]
            mom = cond_moments(grid[r: r + 1], coords, params)
            vals[r] = float((mom.H @ col[stack_idx])[0]) if len(stack_idx) else 0.0
        out += prob * vals
    return out


def sparse_to_coo_rows(mat: sparse.spmatrix) -> list[tuple[int, int, float]]:
    """Coordinate triplets (row, col, value) for inspection exports."""
    coo = mat.tocoo()
    return sorted(zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist()))
