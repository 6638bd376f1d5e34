"""Posterior sampler: Gibbs updates for beta, tau2, z, pi, w and sigma2, and
a robust adaptive Metropolis step for the covariance decays (a, c, kappa).

Per-iteration cost is linear in the data size when partitions grow
proportionally to it: every update touches fixed-size per-partition blocks,
and the conditional moments of all K candidate directions are cached per
partition and refreshed only when (a, c, kappa) moves.

Randomness is fully keyed: each (iteration, step, partition) triple owns an
independent counter-based substream, so the sample path is bitwise
reproducible for any thread count and any scheduling of the within-color
partition updates.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import expit

from scipy.spatial.distance import cdist

from . import model as model_mod
from .covariance import CovarianceParams, cond_moments, cov_from_lags, robust_cholesky
from .dagbag import (DagConfig, DirectionBag, greedy_coloring, resolve_parents,
                     union_moral_adjacency)
from .domain import NumericalError, PartitionedData, ValidationError

__all__ = [
    "ChainSettings",
    "PosteriorSample",
    "ChainResult",
    "RamAdapter",
    "GibbsSampler",
    "run_chain",
    "substream",
]

# step ids keying the per-(iteration, step, partition) random substreams
STEP_BETA, STEP_TAU2, STEP_Z, STEP_PI, STEP_WS, STEP_WU, STEP_THETA, STEP_SIGMA2 = range(8)


def substream(seed: int, iteration: int, step: int, unit: int = 0) -> np.random.Generator:
    """Independent counter-based generator for one update of one unit."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(iteration), int(step), int(unit)))
    return np.random.Generator(np.random.Philox(ss))


def _invgamma_draw(rng: np.random.Generator, shape: float, scale: float) -> float:
    return float(scale / rng.gamma(shape, 1.0))


@dataclass
class ChainSettings:
    """MCMC run configuration."""

    n_iter: int = 1000
    n_burn: int = 500
    thin: int = 1
    seed: int = 0
    target_accept: float = 0.234
    ram_scale: float = 0.1
    ram_decay: float = 0.6
    threads: int = 1
    w_update: str = "colored"
    sample_theta: bool = True
    sample_sigma2: bool = True
    log_joint_on_retain: bool = True

    def __post_init__(self):
        if not 0 <= self.n_burn < self.n_iter:
            raise ValidationError("need 0 <= n_burn < n_iter")
        if self.thin < 1:
            raise ValidationError("thin must be >= 1")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")
        if self.w_update not in ("colored", "sequential"):
            raise ValidationError("w_update must be 'colored' or 'sequential'")


@dataclass(frozen=True)
class PosteriorSample:
    """Immutable snapshot of the model state at one retained iteration."""

    iteration: int
    state: model_mod.ModelState


@dataclass
class ChainResult:
    """Stacked retained samples plus run diagnostics."""

    iterations: np.ndarray
    beta: np.ndarray
    tau2: np.ndarray
    theta: np.ndarray          # columns a, c, kappa, sigma2
    z: np.ndarray
    pi: np.ndarray
    w_s: np.ndarray
    w_u: np.ndarray
    log_joint: np.ndarray
    accept_rate: float
    step_seconds: dict[str, float]
    bag: DirectionBag
    nu: float | None

    @property
    def n_samples(self) -> int:
        return len(self.iterations)

    def sample(self, j: int) -> PosteriorSample:
        theta = CovarianceParams(a=self.theta[j, 0], c=self.theta[j, 1],
                                 kappa=self.theta[j, 2], sigma2=self.theta[j, 3],
                                 nu=self.nu)
        state = model_mod.ModelState(
            w_s=self.w_s[j].copy(), w_u=self.w_u[j].copy(), z=self.z[j].copy(),
            pi=self.pi[j].copy(), beta=self.beta[j].copy(),
            tau2=float(self.tau2[j]), theta=theta,
        )
        return PosteriorSample(iteration=int(self.iterations[j]), state=state)


class RamAdapter:
    """Robust adaptive Metropolis proposal shape (lower-triangular factor).

    After each step the factor S is updated so that S S' absorbs
    eta_n (alpha - target) along the proposal increment direction, with
    eta_n = n^(-decay); acceptance converges to `target` on a wide class of
    targets.  Adaptation can be frozen (post burn-in) to keep the retained
    chain a fixed-kernel Metropolis sampler.
    """

    def __init__(self, dim: int, scale: float = 0.1, decay: float = 0.6,
                 target: float = 0.234):
        self.S = np.eye(dim) * scale
        self.decay = decay
        self.target = target
        self.n_adapt = 0
        self.frozen = False

    def propose(self, v: np.ndarray, rng: np.random.Generator):
        xi = rng.standard_normal(len(v))
        return v + self.S @ xi, xi

    def adapt(self, xi: np.ndarray, alpha: float) -> None:
        if self.frozen:
            return
        self.n_adapt += 1
        eta = min(1.0, self.n_adapt ** (-self.decay))
        nrm = float(xi @ xi)
        if nrm == 0.0:
            return
        dim = len(xi)
        inner = np.eye(dim) + eta * (alpha - self.target) * np.outer(xi, xi) / nrm
        target_mat = self.S @ inner @ self.S.T
        self.S, _ = robust_cholesky(0.5 * (target_mat + target_mat.T), 1.0)


def box_link(theta_vals, bounds):
    """Per-coordinate scaled logit mapping a box onto the whole real line."""
    out = np.empty(len(theta_vals))
    for j, (x, (lo, hi)) in enumerate(zip(theta_vals, bounds)):
        out[j] = np.log(x - lo) - np.log(hi - x)
    return out


def box_link_inverse(v, bounds):
    return np.array([lo + (hi - lo) * expit(vj) for vj, (lo, hi) in zip(v, bounds)])


def box_link_log_jacobian(v, bounds) -> float:
    """log |d theta / d v|, summed over coordinates."""
    total = 0.0
    for vj, (lo, hi) in zip(v, bounds):
        total += np.log(hi - lo) - np.logaddexp(0.0, vj) - np.logaddexp(0.0, -vj)
    return float(total)


def _lag_pack(A: np.ndarray, B: np.ndarray):
    """Spatial distances and absolute time lags between two location sets."""
    return cdist(A[:, :-1], B[:, :-1]), np.abs(A[:, -1:] - B[:, -1:].T)


def _moments_from_geom(geom, params: CovarianceParams):
    """(H, R-cholesky ingredients) from cached lag matrices.

    geom is ((cc_s, cc_t), (cs_s, cs_t), (ss_s, ss_t)) with the stack parts
    None when the parent stack is empty.
    """
    cc, cs, ss = geom
    C_c = cov_from_lags(*cc, params)
    if ss is None:
        return np.zeros((C_c.shape[0], 0)), C_c
    C_p = cov_from_lags(*ss, params)
    C_cp = cov_from_lags(*cs, params)
    L, _ = robust_cholesky(C_p, params.sigma2)
    H = cho_solve((L, True), C_cp.T).T
    R = C_c - H @ C_cp.T
    return H, 0.5 * (R + R.T)


@dataclass
class _RefCand:
    """Cached unit-variance conditional of one reference node for one
    candidate direction."""
    H: np.ndarray
    L: np.ndarray              # chol of the unit-variance residual
    Rinv: np.ndarray
    logdet_half: float         # sum log diag L
    stack: np.ndarray          # global reference positions of the H columns
    blocks: list[tuple[int, int, int]]
    coords: np.ndarray = field(repr=False, default=None)


@dataclass
class _UCand:
    """Cached unit-variance conditionals of one partition's non-reference
    points for one candidate direction (residuals are independent scalars)."""
    H: np.ndarray
    r: np.ndarray
    stack: np.ndarray
    blocks: list[tuple[int, int, int]]
    coords: np.ndarray = field(repr=False, default=None)


class GibbsSampler:
    """One chain owning its state, caches, and update schedule."""

    def __init__(self, pdata: PartitionedData, bag: DirectionBag,
                 priors: model_mod.Priors, settings: ChainSettings,
                 theta0: CovarianceParams | None = None,
                 nu: float | None = None):
        self.pdata = pdata
        self.bag = bag
        self.priors = priors
        self.settings = settings
        self.nu = theta0.nu if theta0 is not None else nu
        if pdata.p and len(priors.mu_beta) != pdata.p:
            raise ValidationError("prior mean dimension must match covariate count")

        M, K = pdata.M, bag.K
        counts = pdata.k_i
        # direction-h parent maps, resolved once (emptiness-aware)
        self._cfg_by_h = [
            resolve_parents(pdata.scheme, bag, np.full(M, h, dtype=int), counts=counts)
            for h in range(K)
        ]
        adj = union_moral_adjacency(pdata.scheme, bag, counts=counts)
        self._colors = greedy_coloring(adj)

        self.state = self._initial_state(theta0)
        self._ref_cache: list[list[_RefCand | None]] = [[None] * K for _ in range(M)]
        self._u_cache: list[list[_UCand | None]] = [[None] * K for _ in range(M)]
        # lag matrices are theta-independent; cache them unless too large
        est = 0
        n_ui_all = np.diff(pdata.u_offsets)
        for i in range(M):
            ki = int(counts[i])
            for h in range(K):
                stack_k = sum(int(counts[j]) for j in self._cfg_by_h[h].parents_of(i))
                est += ki * ki + 2 * ki * stack_k + stack_k * stack_k
                n_ui = int(n_ui_all[i])
                if n_ui:
                    p2 = ki + stack_k
                    est += n_ui * n_ui + 2 * n_ui * p2 + p2 * p2
        self._use_geom = est * 16 < 2.5e8
        self._ref_geom: list[list[tuple | None]] = [[None] * K for _ in range(M)]
        self._u_geom: list[list[tuple | None]] = [[None] * K for _ in range(M)]
        self._rebuild_cache()
        self._rebuild_dependents()

        # observed-row bookkeeping for the regression updates
        n = len(pdata.locations)
        ws_pos = np.full(n, -1, dtype=int)
        ws_pos[pdata.ref_rows_flat] = np.arange(pdata.k)
        wu_pos = np.full(n, -1, dtype=int)
        if pdata.n_u:
            wu_pos[pdata.u_rows_flat] = np.arange(pdata.n_u)
        self._obs_rows = np.flatnonzero(np.isfinite(pdata.y))
        self._obs_ws = ws_pos[self._obs_rows]
        self._obs_wu = wu_pos[self._obs_rows]
        self._y_obs = pdata.y[self._obs_rows]
        self._X_obs = pdata.X[self._obs_rows]
        self._XtX = self._X_obs.T @ self._X_obs if pdata.p else np.zeros((0, 0))
        if pdata.p:
            L, _ = robust_cholesky(priors.v_beta, 1.0)
            self._Vb_inv = cho_solve((L, True), np.eye(pdata.p))
            self._Vb_inv_mu = self._Vb_inv @ priors.mu_beta
        self._ref_obs_mask = [np.isfinite(pdata.y[rows]) for rows in pdata.ref_rows]
        self._u_obs_mask = [np.isfinite(pdata.y[rows]) for rows in pdata.u_rows]

        self.ram = RamAdapter(dim=3, scale=settings.ram_scale,
                              decay=settings.ram_decay,
                              target=settings.target_accept)
        self._accepts = 0
        self._theta_steps = 0
        self.step_seconds: dict[str, float] = {}
        self._pool = (ThreadPoolExecutor(max_workers=settings.threads)
                      if settings.threads > 1 else None)

    # ------------------------------------------------------------------ setup

    def _initial_state(self, theta0: CovarianceParams | None) -> model_mod.ModelState:
        pr = self.priors
        if theta0 is None:
            theta0 = CovarianceParams(
                a=0.5 * sum(pr.a_bounds), c=0.5 * sum(pr.c_bounds),
                kappa=0.5 * sum(pr.kappa_bounds),
                sigma2=pr.b_sigma / max(pr.a_sigma - 1.0, 0.5), nu=self.nu,
            )
        M, K = self.pdata.M, self.bag.K
        return model_mod.ModelState(
            w_s=np.zeros(self.pdata.k),
            w_u=np.zeros(self.pdata.n_u),
            z=np.zeros(M, dtype=int),
            pi=np.full((M, K), 1.0 / K),
            beta=np.zeros(self.pdata.p),
            tau2=pr.b_tau / max(pr.a_tau - 1.0, 0.5),
            theta=theta0,
        )

    def current_config(self) -> DagConfig:
        z = self.state.z
        spatial = np.array([self._cfg_by_h[z[i]].spatial_parent[i] for i in range(self.pdata.M)])
        temporal = self._cfg_by_h[0].temporal_parent.copy()
        return DagConfig(z=z.copy(), spatial_parent=spatial, temporal_parent=temporal)

    def _geom_for(self, child: np.ndarray, stack: np.ndarray):
        cc = _lag_pack(child, child)
        if stack.size == 0:
            return cc, None, None
        return cc, _lag_pack(child, stack), _lag_pack(stack, stack)

    def _rebuild_cache(self) -> None:
        """Recompute unit-variance conditional moments for every partition
        and candidate direction at the current (a, c, kappa)."""
        from .covariance import point_parent_stack, ref_parent_stack

        unit = self.state.theta.unit_variance()
        pd = self.pdata
        for i in range(pd.M):
            ki = int(pd.k_i[i])
            n_ui = int(pd.u_offsets[i + 1] - pd.u_offsets[i])
            for h in range(self.bag.K):
                cfg = self._cfg_by_h[h]
                if ki:
                    coords, stack_idx, blocks = ref_parent_stack(pd, cfg, i)
                    if self._use_geom:
                        if self._ref_geom[i][h] is None:
                            self._ref_geom[i][h] = self._geom_for(pd.ref_coords(i), coords)
                        H, R = _moments_from_geom(self._ref_geom[i][h], unit)
                    else:
                        mom = cond_moments(pd.ref_coords(i), coords, unit)
                        H, R = mom.H, mom.R
                    L, _ = robust_cholesky(R, 1.0)
                    Rinv = cho_solve((L, True), np.eye(ki))
                    self._ref_cache[i][h] = _RefCand(
                        H=H, L=L, Rinv=0.5 * (Rinv + Rinv.T),
                        logdet_half=float(np.sum(np.log(np.diag(L)))),
                        stack=stack_idx, blocks=blocks, coords=coords,
                    )
                if n_ui:
                    coords, stack_idx, blocks = point_parent_stack(pd, cfg, i)
                    if self._use_geom:
                        if self._u_geom[i][h] is None:
                            self._u_geom[i][h] = self._geom_for(pd.u_coords(i), coords)
                        H, R = _moments_from_geom(self._u_geom[i][h], unit)
                    else:
                        mom = cond_moments(pd.u_coords(i), coords, unit)
                        H, R = mom.H, mom.R
                    self._u_cache[i][h] = _UCand(
                        H=H, r=np.maximum(np.diag(R), 1e-14),
                        stack=stack_idx, blocks=blocks, coords=coords,
                    )

    def _rebuild_dependents(self) -> None:
        """Reverse maps under the current z: which nodes and non-reference
        blocks involve each partition's reference values."""
        M = self.pdata.M
        z = self.state.z
        self._ref_children: list[list[tuple[int, int, int]]] = [[] for _ in range(M)]
        self._u_hosts: list[list[tuple[int, int, int]]] = [[] for _ in range(M)]
        for j in range(M):
            cand = self._ref_cache[j][z[j]]
            if cand is not None:
                for part, lo, hi in cand.blocks:
                    self._ref_children[part].append((j, lo, hi))
            ucand = self._u_cache[j][z[j]]
            if ucand is not None:
                for part, lo, hi in ucand.blocks:
                    self._u_hosts[part].append((j, lo, hi))

    def _map_parts(self, fn, parts) -> None:
        if self._pool is not None:
            list(self._pool.map(fn, parts))
        else:
            for i in parts:
                fn(i)

    # ---------------------------------------------------------------- updates

    def update_beta(self, iteration: int) -> np.ndarray:
        pd = self.pdata
        if pd.p == 0:
            return self.state.beta
        rng = substream(self.settings.seed, iteration, STEP_BETA)
        st = self.state
        w_obs = self._gather_w_obs()
        prec = self._Vb_inv + self._XtX / st.tau2
        lin = self._Vb_inv_mu + self._X_obs.T @ (self._y_obs - w_obs) / st.tau2
        L, _ = robust_cholesky(prec, 1.0)
        mean = cho_solve((L, True), lin)
        st.beta = mean + solve_triangular(L, rng.standard_normal(pd.p), lower=True, trans="T")
        return st.beta

    def update_tau2(self, iteration: int) -> float:
        rng = substream(self.settings.seed, iteration, STEP_TAU2)
        st = self.state
        resid = self._y_obs - self._gather_w_obs()
        if self.pdata.p:
            resid = resid - self._X_obs @ st.beta
        shape = self.priors.a_tau + 0.5 * len(resid)
        scale = self.priors.b_tau + 0.5 * float(resid @ resid)
        st.tau2 = _invgamma_draw(rng, shape, scale)
        return st.tau2

    def _gather_w_obs(self) -> np.ndarray:
        st = self.state
        out = np.empty(len(self._obs_rows))
        mask_s = self._obs_ws >= 0
        out[mask_s] = st.w_s[self._obs_ws[mask_s]]
        if np.any(~mask_s):
            out[~mask_s] = st.w_u[self._obs_wu[~mask_s]]
        return out

    def _cand_loglik(self, i: int, h: int) -> float:
        """Unit-cache log density of node i's reference and non-reference
        values under direction h, at the current sigma2."""
        st = self.state
        s2 = st.theta.sigma2
        total = 0.0
        cand = self._ref_cache[i][h]
        if cand is not None:
            ki = cand.H.shape[0]
            mean = cand.H @ st.w_s[cand.stack] if len(cand.stack) else 0.0
            resid = st.w_s[self.pdata.ref_slice(i)] - mean
            alpha = solve_triangular(cand.L, resid, lower=True)
            total += (-0.5 * ki * np.log(2.0 * np.pi * s2) - cand.logdet_half
                      - 0.5 * float(alpha @ alpha) / s2)
        ucand = self._u_cache[i][h]
        if ucand is not None:
            mean = ucand.H @ st.w_s[ucand.stack] if len(ucand.stack) else 0.0
            resid = st.w_u[self.pdata.u_slice(i)] - mean
            total += float(np.sum(-0.5 * np.log(2.0 * np.pi * s2 * ucand.r)
                                  - 0.5 * resid ** 2 / (s2 * ucand.r)))
        return total

    def update_z(self, iteration: int) -> np.ndarray:
        st = self.state
        K = self.bag.K
        new_z = np.empty(self.pdata.M, dtype=int)

        def draw(i: int) -> None:
            logw = np.log(st.pi[i])
            if K > 1:
                for h in range(K):
                    logw[h] += self._cand_loglik(i, h)
            logw -= logw.max()
            probs = np.exp(logw)
            probs /= probs.sum()
            u = substream(self.settings.seed, iteration, STEP_Z, i + 1).random()
            new_z[i] = int(np.searchsorted(np.cumsum(probs), u))

        self._map_parts(draw, range(self.pdata.M))
        st.z = new_z
        self._rebuild_dependents()
        return st.z

    def update_pi(self, iteration: int) -> np.ndarray:
        st = self.state
        K = self.bag.K

        def draw(i: int) -> None:
            conc = np.full(K, self.priors.alpha)
            conc[st.z[i]] += 1.0
            rng = substream(self.settings.seed, iteration, STEP_PI, i + 1)
            st.pi[i] = rng.dirichlet(conc)

        self._map_parts(draw, range(self.pdata.M))
        return st.pi

    def _draw_w_partition(self, i: int, iteration: int) -> None:
        pd = self.pdata
        st = self.state
        ki = int(pd.k_i[i])
        if ki == 0:
            return
        s2 = st.theta.sigma2
        sl = pd.ref_slice(i)
        cand = self._ref_cache[i][st.z[i]]
        prec = cand.Rinv / s2
        prior_mean = cand.H @ st.w_s[cand.stack] if len(cand.stack) else np.zeros(ki)
        lin = cand.Rinv @ prior_mean / s2
        for j, lo, hi in self._ref_children[i]:
            cj = self._ref_cache[j][st.z[j]]
            Hji = cj.H[:, lo:hi]
            e_j = (st.w_s[pd.ref_slice(j)] - cj.H @ st.w_s[cj.stack]
                   + Hji @ st.w_s[sl])
            RinvH = cj.Rinv @ Hji
            prec = prec + Hji.T @ RinvH / s2
            lin = lin + RinvH.T @ e_j / s2
        for j, lo, hi in self._u_hosts[i]:
            cu = self._u_cache[j][st.z[j]]
            Hui = cu.H[:, lo:hi]
            e_u = (st.w_u[pd.u_slice(j)] - cu.H @ st.w_s[cu.stack]
                   + Hui @ st.w_s[sl])
            prec = prec + (Hui.T * (1.0 / cu.r)) @ Hui / s2
            lin = lin + Hui.T @ (e_u / cu.r) / s2
        mask = self._ref_obs_mask[i]
        if np.any(mask):
            rows = pd.ref_rows[i]
            ydev = np.where(mask, pd.y[rows], 0.0)
            if pd.p:
                ydev = ydev - np.where(mask, pd.X[rows] @ st.beta, 0.0)
            prec = prec + np.diag(mask / st.tau2)
            lin = lin + ydev / st.tau2
        L, _ = robust_cholesky(prec, 1.0 / s2)
        mean = cho_solve((L, True), lin)
        rng = substream(self.settings.seed, iteration, STEP_WS, i + 1)
        st.w_s[sl] = mean + solve_triangular(L, rng.standard_normal(ki),
                                             lower=True, trans="T")

    def update_w_reference(self, iteration: int) -> np.ndarray:
        if self.settings.w_update == "sequential":
            for i in range(self.pdata.M):
                self._draw_w_partition(i, iteration)
        else:
            for group in self._colors:
                self._map_parts(lambda i: self._draw_w_partition(i, iteration), group)
        return self.state.w_s

    def update_w_nonreference(self, iteration: int) -> np.ndarray:
        pd = self.pdata
        st = self.state
        if pd.n_u == 0:
            return st.w_u
        s2 = st.theta.sigma2

        def draw(i: int) -> None:
            sl = pd.u_slice(i)
            if sl.stop == sl.start:
                return
            cu = self._u_cache[i][st.z[i]]
            mu = cu.H @ st.w_s[cu.stack] if len(cu.stack) else np.zeros(sl.stop - sl.start)
            var = s2 * cu.r
            mask = self._u_obs_mask[i]
            if np.any(mask):
                rows = pd.u_rows[i]
                ydev = np.where(mask, pd.y[rows], 0.0)
                if pd.p:
                    ydev = ydev - np.where(mask, pd.X[rows] @ st.beta, 0.0)
                var_post = np.where(mask, 1.0 / (1.0 / var + 1.0 / st.tau2), var)
                mean_post = np.where(mask, var_post * (mu / var + ydev / st.tau2), mu)
            else:
                var_post, mean_post = var, mu
            rng = substream(self.settings.seed, iteration, STEP_WU, i + 1)
            st.w_u[sl] = mean_post + np.sqrt(var_post) * rng.standard_normal(sl.stop - sl.start)

        self._map_parts(draw, range(pd.M))
        return st.w_u

    def _w_loglik_cached(self) -> float:
        return sum(self._cand_loglik(i, self.state.z[i]) for i in range(self.pdata.M))

    def _w_loglik_at(self, theta: CovarianceParams) -> float:
        """Latent log likelihood at trial (a, c, kappa), current z and
        sigma2, from freshly computed moments."""
        st = self.state
        pd = self.pdata
        unit = theta.unit_variance()
        s2 = st.theta.sigma2
        total = 0.0
        for i in range(pd.M):
            h = st.z[i]
            cand = self._ref_cache[i][h]
            if cand is not None:
                ki = cand.H.shape[0]
                if self._use_geom:
                    H, R = _moments_from_geom(self._ref_geom[i][h], unit)
                else:
                    mom = cond_moments(pd.ref_coords(i), cand.coords, unit)
                    H, R = mom.H, mom.R
                L, _ = robust_cholesky(R, 1.0)
                mean = H @ st.w_s[cand.stack] if len(cand.stack) else 0.0
                resid = st.w_s[pd.ref_slice(i)] - mean
                alpha = solve_triangular(L, resid, lower=True)
                total += (-0.5 * ki * np.log(2.0 * np.pi * s2)
                          - float(np.sum(np.log(np.diag(L))))
                          - 0.5 * float(alpha @ alpha) / s2)
            ucand = self._u_cache[i][h]
            if ucand is not None:
                if self._use_geom:
                    H, R = _moments_from_geom(self._u_geom[i][h], unit)
                else:
                    mom = cond_moments(pd.u_coords(i), ucand.coords, unit)
                    H, R = mom.H, mom.R
                r = np.maximum(np.diag(R), 1e-14)
                mean = H @ st.w_s[ucand.stack] if len(ucand.stack) else 0.0
                resid = st.w_u[pd.u_slice(i)] - mean
                total += float(np.sum(-0.5 * np.log(2.0 * np.pi * s2 * r)
                                      - 0.5 * resid ** 2 / (s2 * r)))
        return total

    def update_theta_ram(self, iteration: int) -> CovarianceParams:
        st = self.state
        bounds = self.priors.theta_bounds
        rng = substream(self.settings.seed, iteration, STEP_THETA)
        v = box_link([st.theta.a, st.theta.c, st.theta.kappa], bounds)
        v_prop, xi = self.ram.propose(v, rng)
        lp_cur = self._w_loglik_cached() + box_link_log_jacobian(v, bounds)
        theta_prop = st.theta.with_(
            a=float(box_link_inverse(v_prop, bounds)[0]),
            c=float(box_link_inverse(v_prop, bounds)[1]),
            kappa=float(box_link_inverse(v_prop, bounds)[2]),
        )
        try:
            lp_prop = self._w_loglik_at(theta_prop) + box_link_log_jacobian(v_prop, bounds)
        except NumericalError:
            lp_prop = -np.inf
        log_ratio = lp_prop - lp_cur
        alpha = float(np.exp(min(0.0, log_ratio))) if np.isfinite(log_ratio) else 0.0
        self._theta_steps += 1
        if rng.random() < alpha:
            st.theta = theta_prop
            self._accepts += 1
            self._rebuild_cache()
        self.ram.adapt(xi, alpha)
        return st.theta

    def log_joint_fast(self) -> float:
        """Full log posterior kernel from the cached moments; agrees with
        model.log_joint up to float noise."""
        st = self.state
        pr = self.priors
        pd = self.pdata
        total = self._w_loglik_cached()
        resid = self._y_obs - self._gather_w_obs()
        if pd.p:
            resid = resid - self._X_obs @ st.beta
        total += float(np.sum(-0.5 * np.log(2.0 * np.pi * st.tau2)
                              - 0.5 * resid ** 2 / st.tau2))
        total += float(np.sum(np.log(st.pi[np.arange(pd.M), st.z])))
        alpha_vec = np.full(self.bag.K, pr.alpha)
        total += float(sum(model_mod.log_dirichlet(st.pi[i], alpha_vec)
                           for i in range(pd.M)))
        if pd.p:
            dev = solve_triangular(np.linalg.cholesky(pr.v_beta),
                                   st.beta - pr.mu_beta, lower=True)
            total += float(-0.5 * pd.p * np.log(2.0 * np.pi)
                           - 0.5 * np.log(np.linalg.det(pr.v_beta))
                           - 0.5 * dev @ dev)
        total += model_mod.log_invgamma(st.tau2, pr.a_tau, pr.b_tau)
        total += model_mod.log_invgamma(st.theta.sigma2, pr.a_sigma, pr.b_sigma)
        for x, (lo, hi) in zip((st.theta.a, st.theta.c, st.theta.kappa),
                               pr.theta_bounds):
            total += -np.log(hi - lo) if lo <= x <= hi else -np.inf
        return float(total)

    def update_sigma2(self, iteration: int) -> float:
        st = self.state
        pd = self.pdata
        rng = substream(self.settings.seed, iteration, STEP_SIGMA2)
        quad = 0.0
        count = 0
        for i in range(pd.M):
            cand = self._ref_cache[i][st.z[i]]
            if cand is not None:
                mean = cand.H @ st.w_s[cand.stack] if len(cand.stack) else 0.0
                resid = st.w_s[pd.ref_slice(i)] - mean
                alpha = solve_triangular(cand.L, resid, lower=True)
                quad += float(alpha @ alpha)
                count += len(resid)
            ucand = self._u_cache[i][st.z[i]]
            if ucand is not None:
                mean = ucand.H @ st.w_s[ucand.stack] if len(ucand.stack) else 0.0
                resid = st.w_u[pd.u_slice(i)] - mean
                quad += float(np.sum(resid ** 2 / ucand.r))
                count += len(resid)
        shape = self.priors.a_sigma + 0.5 * count
        scale = self.priors.b_sigma + 0.5 * quad
        st.theta = st.theta.with_(sigma2=_invgamma_draw(rng, shape, scale))
        return st.theta.sigma2

    # -------------------------------------------------------------------- run

    def _timed(self, name: str, fn, *args):
        t0 = time.perf_counter()
        out = fn(*args)
        self.step_seconds[name] = self.step_seconds.get(name, 0.0) + time.perf_counter() - t0
        return out

    def run(self) -> ChainResult:
        s = self.settings
        pd = self.pdata
        retained: list[int] = []
        stores = {k: [] for k in ("beta", "tau2", "theta", "z", "pi", "w_s", "w_u", "lj")}
        for it in range(s.n_iter):
            try:
                self._timed("beta", self.update_beta, it)
                self._timed("tau2", self.update_tau2, it)
                self._timed("z", self.update_z, it)
                self._timed("pi", self.update_pi, it)
                self._timed("w_s", self.update_w_reference, it)
                self._timed("w_u", self.update_w_nonreference, it)
                if s.sample_theta:
                    self._timed("theta", self.update_theta_ram, it)
                if s.sample_sigma2:
                    self._timed("sigma2", self.update_sigma2, it)
            except (NumericalError, ValidationError) as exc:
                raise NumericalError(f"iteration {it}: {exc}") from exc
            if it == s.n_burn - 1:
                self.ram.frozen = True
            if it >= s.n_burn and (it - s.n_burn) % s.thin == 0:
                st = self.state
                retained.append(it)
                stores["beta"].append(st.beta.copy())
                stores["tau2"].append(st.tau2)
                stores["theta"].append([st.theta.a, st.theta.c, st.theta.kappa, st.theta.sigma2])
                stores["z"].append(st.z.copy())
                stores["pi"].append(st.pi.copy())
                stores["w_s"].append(st.w_s.copy())
                stores["w_u"].append(st.w_u.copy())
                if s.log_joint_on_retain:
                    stores["lj"].append(self.log_joint_fast())
        n_ret = len(retained)
        accept = self._accepts / self._theta_steps if self._theta_steps else 0.0
        if self._pool is not None:
            self._pool.shutdown()
        return ChainResult(
            iterations=np.asarray(retained, dtype=int),
            beta=np.asarray(stores["beta"]).reshape(n_ret, pd.p),
            tau2=np.asarray(stores["tau2"], dtype=float),
            theta=np.asarray(stores["theta"], dtype=float).reshape(n_ret, 4),
            z=np.asarray(stores["z"], dtype=int).reshape(n_ret, pd.M),
            pi=np.asarray(stores["pi"], dtype=float).reshape(n_ret, pd.M, self.bag.K),
            w_s=np.asarray(stores["w_s"], dtype=float).reshape(n_ret, pd.k),
            w_u=np.asarray(stores["w_u"], dtype=float).reshape(n_ret, pd.n_u),
            log_joint=np.asarray(stores["lj"], dtype=float),
            accept_rate=float(accept),
            step_seconds=dict(self.step_seconds),
            bag=self.bag,
            nu=self.nu,
        )


def run_chain(pdata: PartitionedData, bag: DirectionBag, priors: model_mod.Priors,
              settings: ChainSettings, theta0: CovarianceParams | None = None,
              nu: float | None = None) -> ChainResult:
    """Build a sampler and run the full schedule; see GibbsSampler."""
    return GibbsSampler(pdata, bag, priors, settings, theta0=theta0, nu=nu).run()
