"""Point estimators for cluster-level quantile effects.

All estimators minimize the same check-loss objective but differ in how
they treat the cluster effects:

* oracle        — subtracts the true random effects (only possible in
                  simulations) and runs standard quantile regression.
* marginal      — ignores clustering entirely.
* canay         — two steps: within-cluster mean regression to absorb the
                  cluster levels, then quantile regression on the shifted
                  response.
* penalized     — joint fit of (beta, cluster intercepts) with an l1 or l2
                  penalty on the intercepts; lambda by k-fold CV.
* two-step      — ALD working-model fit, centered linear predictions of
                  the cluster effects as offsets, then quantile regression.
* jackknife     — half-panel split bias correction of a base estimator.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import kernels
from .data_model import ClusterBlock, ClusteredDataset
from .errors import ConfigError, SolverError, UnsupportedModelError
from .lqmm import LqmmFit, fit_lqmm
from .qr_core import QrFit, _ip_core, fit_qr, standard_errors
from .rng import Stream

__all__ = [
    "TwoStepFit",
    "PenaltySpec",
    "PenalizedFit",
    "JackknifeFit",
    "fit_oracle",
    "fit_marginal",
    "fit_canay",
    "fit_penalized",
    "cross_validate_lambda",
    "default_lambda_grid",
    "fit_twostep",
    "jackknife_adjust",
]


def random_effect_offset(data: ClusteredDataset, u: np.ndarray) -> np.ndarray:
    """Per-observation offset z_ij' u_i for cluster effects u (N x q)."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 1:
        u = u[:, None]
    if u.shape != (data.n_clusters, data.q):
        raise ConfigError(
            f"effects must be ({data.n_clusters}, {data.q}), got {u.shape}"
        )
    return (data.Z * u[data.cluster_index]).sum(axis=1)


def fit_oracle(data: ClusteredDataset, u_true, tau: float) -> QrFit:
    """Quantile regression with the true cluster effects subtracted."""
    return fit_qr(data.y, data.X, tau, offset=random_effect_offset(data, u_true))


def fit_marginal(data: ClusteredDataset, tau: float) -> QrFit:
    """Quantile regression that ignores the cluster structure."""
    return fit_qr(data.y, data.X, tau)


def _require_random_intercept(data: ClusteredDataset, what: str):
    if data.q != 1 or not np.all(data.Z == 1.0):
        raise UnsupportedModelError(f"{what} requires a pure random-intercept model")


def fit_canay(data: ClusteredDataset, tau: float) -> QrFit:
    """Mean-regression two-step estimator.

    Step 1 estimates the covariate effects by within-cluster OLS, absorbs
    the overall intercept, and takes cluster means of the residuals as the
    cluster-level estimates.  Step 2 runs quantile regression on the
    response shifted by those cluster levels.
    """
    _require_random_intercept(data, "the mean-based two-step estimator")
    Xs = data.X[:, 1:]
    if Xs.shape[1] > 0:
        yd = data.y.astype(np.float64).copy()
        Xd = Xs.astype(np.float64).copy()
        for i in range(data.n_clusters):
            s, e = data.starts[i], data.starts[i + 1]
            yd[s:e] -= yd[s:e].mean()
            Xd[s:e] -= Xd[s:e].mean(axis=0)
        slope, _, rank, _ = np.linalg.lstsq(Xd, yd, rcond=None)
        if rank < Xd.shape[1]:
            raise SolverError("within-cluster design is rank deficient")
        level_resid = data.y - Xs @ slope
    else:
        level_resid = data.y.astype(np.float64)
    level_resid = level_resid - level_resid.mean()
    u_hat = np.array(
        [
            level_resid[data.starts[i] : data.starts[i + 1]].mean()
            for i in range(data.n_clusters)
        ]
    )
    return fit_qr(data.y, data.X, tau, offset=u_hat[data.cluster_index])


# ---------------------------------------------------------------------------
# penalized joint estimation of (beta, cluster intercepts)


@dataclass(frozen=True)
class PenaltySpec:
    """Penalty request: a fixed strength, or cross-validation when lam is None."""

    kind: str = "l1"
    lam: float | None = None
    grid: tuple | None = None
    folds: int = 5

    def __post_init__(self):
        if self.kind not in ("l1", "l2"):
            raise ConfigError(f"unknown penalty kind {self.kind!r}")
        if self.lam is not None and self.lam < 0:
            raise ConfigError("penalty strength must be non-negative")
        if self.grid is not None and len(self.grid) == 0:
            raise ConfigError("empty lambda grid")
        if self.folds < 2:
            raise ConfigError("cross-validation needs at least two folds")


@dataclass
class PenalizedFit:
    beta: np.ndarray
    u0: np.ndarray
    lam: float
    kind: str
    tau: float
    objective: float
    n_iter: int
    converged: bool


def _segment_sums(values: np.ndarray, starts: np.ndarray) -> np.ndarray:
    return np.add.reduceat(values, starts[:-1], axis=0)


def _solve_spd(S: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Cholesky solve with escalating ridge fallback.

    Near an LP optimum the interior point can hand over a Schur complement
    that is only semidefinite in floating point; a plain ``assume_a="pos"``
    retry then dies on the same singularity.
    """
    if not (np.isfinite(S).all() and np.isfinite(t).all()):
        raise SolverError("normal equations became non-finite")
    try:
        cf = scipy.linalg.cho_factor(S, check_finite=False)
        return scipy.linalg.cho_solve(cf, t, check_finite=False)
    except scipy.linalg.LinAlgError:
        pass
    ridge = 1e-10 * max(1.0, float(np.trace(S)))
    eye = np.eye(S.shape[0])
    for _ in range(3):
        try:
            cf = scipy.linalg.cho_factor(S + ridge * eye, check_finite=False)
            return scipy.linalg.cho_solve(cf, t, check_finite=False)
        except scipy.linalg.LinAlgError:
            ridge *= 1e4
    return np.linalg.lstsq(S, t, rcond=None)[0]


class _ClusteredNormal:
    """Schur-complement solver for designs [X | cluster indicators].

    The normal matrix has a diagonal cluster block, so each solve costs
    O(n p^2 + N p^2) instead of O((p + N)^3).
    """

    def __init__(self, X, starts, lam):
        self.X = X
        self.starts = starts
        self.lam = lam
        self.p = X.shape[1]
        self.N = starts.size - 1

    def __call__(self, q, rhs):
        n = self.X.shape[0]
        qd, qp = q[:n], q[n:]
        Xq = self.X * qd[:, None]
        K = Xq.T @ self.X
        B = _segment_sums(Xq, self.starts)  # (N, p)
        g = _segment_sums(qd, self.starts) + 4.0 * self.lam**2 * qp
        # a whole cluster's weight sum can collapse in late iterations
        g = np.maximum(g, 1e-14 * max(1.0, float(g.max())))
        rb, ru = rhs[: self.p], rhs[self.p :]
        S = K - (B / g[:, None]).T @ B
        t = rb - B.T @ (ru / g)
        dyb = _solve_spd(S, t)
        dyu = (ru - B @ dyb) / g
        return np.concatenate([dyb, dyu])


def _fit_l1_cluster(data: ClusteredDataset, tau: float, lam: float, tol, max_iter):
    """Exact l1-penalized fit as a single LP.

    The penalty lam * |u_i| is encoded as a pseudo-observation with
    response 0, level one half and design entry 2 lam on the intercept of
    cluster i, since rho_{1/2}(-2 lam u) = lam |u|.
    """
    X, starts = data.X, data.starts
    n, p = X.shape
    N = data.n_clusters
    cix = data.cluster_index

    def apply_At(ym):
        out = np.empty(n + N)
        out[:n] = X @ ym[:p] + ym[p + cix]
        out[n:] = 2.0 * lam * ym[p:]
        return out

    def apply_A(rowv):
        out = np.empty(p + N)
        out[:p] = X.T @ rowv[:n]
        out[p:] = _segment_sums(rowv[:n], starts) + 2.0 * lam * rowv[n:]
        return out

    taus = np.concatenate([np.full(n, tau), np.full(N, 0.5)])
    c = np.concatenate([-data.y, np.zeros(N)])
    matvecs = (apply_At, apply_A, _ClusteredNormal(X, starts, lam))
    try:
        ym, gap, it = _ip_core(matvecs, c, taus, n + N, tol, max_iter)
    except np.linalg.LinAlgError as exc:
        raise SolverError("interior point failed on degenerate penalty design") from exc
    beta = -ym[:p]
    u0 = -ym[p:]
    resid = data.y - X @ beta - u0[cix]
    obj = float(
        kernels.checkloss_sum(np.ascontiguousarray(resid), float(tau))
    ) + lam * float(np.abs(u0).sum())
    return beta, u0, obj, it, gap <= tol


def _fit_l2_cluster(data: ClusteredDataset, tau: float, lam: float, tol, max_iter):
    """l2-penalized fit by majorize-minimize.

    Each iteration replaces the check loss with its quadratic majorant at
    the current residuals and solves the resulting ridge-adjusted weighted
    least squares in (beta, u) through the same Schur-complement blocks.
    """
    X, starts = data.X, data.starts
    n, p = X.shape
    N = data.n_clusters
    cix = data.cluster_index
    y = data.y
    eps = 1e-8 * (1.0 + float(np.median(np.abs(y))))

    beta = fit_qr(y, X, tau).beta
    u0 = np.zeros(N)

    def obj_of(beta, u0):
        r = y - X @ beta - u0[cix]
        return float(
            kernels.checkloss_sum(np.ascontiguousarray(r), float(tau))
        ) + lam * float(u0 @ u0)

    prev = obj_of(beta, u0)
    shift = tau - 0.5
    ones_by_cluster = np.diff(starts).astype(np.float64)
    for it in range(1, max_iter + 1):
        r = y - X @ beta - u0[cix]
        a = 1.0 / (2.0 * (np.abs(r) + eps))
        Xa = X * a[:, None]
        K = Xa.T @ X
        B = _segment_sums(Xa, starts)
        g = _segment_sums(a, starts) + 2.0 * lam
        bb = X.T @ (a * y) + shift * X.sum(axis=0)
        bu = _segment_sums(a * y, starts) + shift * ones_by_cluster
        S = K - (B / g[:, None]).T @ B
        t = bb - B.T @ (bu / g)
        beta = _solve_spd(S, t)
        u0 = (bu - B @ beta) / g
        cur = obj_of(beta, u0)
        if abs(prev - cur) < tol:
            return beta, u0, cur, it, True
        prev = cur
    return beta, u0, prev, max_iter, False


def fit_penalized(
    data: ClusteredDataset,
    tau: float,
    penalty,
    *,
    kind: str = "l1",
    tol: float | None = None,
    max_iter: int | None = None,
) -> PenalizedFit:
    """Joint quantile fit with penalized cluster intercepts.

    ``penalty`` is either a scalar strength (with ``kind`` naming the
    penalty) or a PenaltySpec; a PenaltySpec without a fixed strength is
    resolved by cross-validation first.  ``kind="l1"`` solves the exact
    LP; ``kind="l2"`` runs the majorize-minimize loop (objective change
    < 1e-7, at most 500 sweeps).
    """
    if isinstance(penalty, PenaltySpec):
        kind = penalty.kind
        if penalty.lam is None:
            lam, _, _ = cross_validate_lambda(
                data, tau, kind=kind, grid=penalty.grid, n_folds=penalty.folds
            )
        else:
            lam = penalty.lam
    else:
        lam = float(penalty)
    _require_random_intercept(data, "penalized intercept estimation")
    if lam < 0:
        raise ConfigError("penalty strength must be non-negative")
    if kind == "l1":
        tol = 1e-8 if tol is None else tol
        max_iter = 200 if max_iter is None else max_iter
        beta, u0, obj, it, ok = _fit_l1_cluster(data, float(tau), float(lam), tol, max_iter)
    elif kind == "l2":
        tol = 1e-7 if tol is None else tol
        max_iter = 500 if max_iter is None else max_iter
        beta, u0, obj, it, ok = _fit_l2_cluster(data, float(tau), float(lam), tol, max_iter)
    else:
        raise ConfigError(f"unknown penalty kind {kind!r}")
    return PenalizedFit(
        beta=beta,
        u0=u0,
        lam=float(lam),
        kind=kind,
        tau=float(tau),
        objective=obj,
        n_iter=it,
        converged=ok,
    )


def default_lambda_grid(data: ClusteredDataset, tau: float, size: int = 20) -> np.ndarray:
    """Log-spaced grid scaled by the spread of marginal-fit residuals.

    The scale is the median absolute deviation of the residuals from the
    marginal quantile fit; the grid spans 0.01 to 10 times that scale.
    """
    resid = fit_marginal(data, tau).residuals
    s = float(np.median(np.abs(resid - np.median(resid))))
    if s <= 0:
        s = 1.0
    return s * np.logspace(-2, 1, size)


def _fold_labels(data: ClusteredDataset, n_folds: int) -> np.ndarray:
    """Cluster-stratified round-robin assignment of observations to folds."""
    labels = np.empty(data.n_obs, dtype=np.int64)
    for i in range(data.n_clusters):
        s, e = data.starts[i], data.starts[i + 1]
        labels[s:e] = (np.arange(e - s) + i) % n_folds
    return labels


def cross_validate_lambda(
    data: ClusteredDataset,
    tau: float,
    *,
    kind: str = "l1",
    grid=None,
    n_folds: int = 5,
):
    """Pick the penalty by k-fold held-out check loss.

    Folds are assigned observation-wise but round-robin within each
    cluster, so every fold sees (nearly) every cluster.  Held-out
    observations are scored at x'beta + u_hat of their cluster; clusters
    entirely absent from a training fold predict with u_hat = 0.  Ties
    prefer the larger lambda.  Returns (best_lambda, scores, grid).
    """
    if grid is None:
        grid = default_lambda_grid(data, tau)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ConfigError("empty lambda grid")
    labels = _fold_labels(data, n_folds)
    folds = []
    for f in range(n_folds):
        hold = labels == f
        if not hold.any():
            continue
        blocks = []
        kept_ids = []
        for i, b in enumerate(data.blocks):
            keep = ~hold[data.starts[i] : data.starts[i + 1]]
            if keep.sum() == 0:
                continue
            blocks.append(ClusterBlock(b.cluster_id, b.y[keep], b.X[keep], b.Z[keep]))
            kept_ids.append(i)
        train = ClusteredDataset(
            blocks,
            response_name=data.response_name,
            cluster_name=data.cluster_name,
            fixed_names=data.fixed_names,
            random_names=data.random_names,
        )
        folds.append((hold, train, np.asarray(kept_ids)))

    scores = np.zeros(grid.size)
    for gi, lam in enumerate(grid):
        total = 0.0
        count = 0
        for hold, train, kept in folds:
            pf = fit_penalized(train, tau, lam, kind=kind)
            u_full = np.zeros(data.n_clusters)
            u_full[kept] = pf.u0
            pred = data.X @ pf.beta + u_full[data.cluster_index]
            r = data.y[hold] - pred[hold]
            total += float(
                kernels.checkloss_sum(np.ascontiguousarray(r), float(tau))
            )
            count += int(hold.sum())
        scores[gi] = total / count
    best = 0
    for gi in range(1, grid.size):
        if scores[gi] <= scores[best]:
            best = gi
    return float(grid[best]), scores, grid


# ---------------------------------------------------------------------------
# predicted-offset two-step estimator


@dataclass
class TwoStepFit:
    """Two-step fit: working-model step plus offset quantile regression.

    ``blp`` holds the centered predicted effects (N x q); ``residuals``
    are net of both the fixed part and the predicted effects; ``se_obs``
    computes the step-2 sandwich standard errors on first access.
    """

    beta: np.ndarray
    tau: float
    lqmm: LqmmFit
    blp: np.ndarray
    offset: np.ndarray
    qr: QrFit
    data: ClusteredDataset

    @property
    def residuals(self) -> np.ndarray:
        return self.qr.residuals

    @functools.cached_property
    def se_obs(self) -> np.ndarray:
        return standard_errors(
            self.data.y, self.data.X, self.tau, offset=self.offset
        ).se


def fit_twostep(
    data: ClusteredDataset,
    tau: float,
    *,
    n_nodes: int = 15,
    lqmm_init=None,
    blp_override=None,
) -> TwoStepFit:
    """Working-model two-step estimator.

    Step 1 fits the ALD working model, which attaches centered linear
    predictions of the cluster effects; step 2 subtracts them as an offset
    and reruns standard quantile regression.  ``blp_override`` replaces the
    centered predictions (used by tests and the oracle identity);
    ``lqmm_init`` warm-starts the working-model search.
    """
    lq = fit_lqmm(data, tau, n_nodes=n_nodes, init=lqmm_init)
    if blp_override is None:
        blp = lq.blp
    else:
        blp = np.asarray(blp_override, dtype=np.float64)
        if blp.ndim == 1:
            blp = blp[:, None]
    offset = random_effect_offset(data, blp)
    qr = fit_qr(data.y, data.X, tau, offset=offset)
    return TwoStepFit(
        beta=qr.beta,
        tau=float(tau),
        lqmm=lq,
        blp=blp,
        offset=offset,
        qr=qr,
        data=data,
    )


# ---------------------------------------------------------------------------
# half-panel jackknife


@dataclass
class JackknifeFit:
    beta: np.ndarray
    beta_full: np.ndarray
    beta_half1: np.ndarray
    beta_half2: np.ndarray
    base: str


def _half_split(data: ClusteredDataset, stream: Stream) -> tuple[ClusteredDataset, ClusteredDataset]:
    first, second = [], []
    for b in data.blocks:
        # keyed by cluster id, not dataset position: the split (and with it
        # the corrected estimate) is invariant to cluster order
        rng = stream.child("halfsplit", str(b.cluster_id)).generator()
        perm = rng.permutation(b.n)
        k = b.n // 2
        if b.n % 2:
            # the odd row out goes to either half with probability 1/2
            k += int(rng.random() < 0.5)
        ia, ib = np.sort(perm[:k]), np.sort(perm[k:])
        first.append(ClusterBlock(b.cluster_id, b.y[ia], b.X[ia], b.Z[ia]))
        second.append(ClusterBlock(b.cluster_id, b.y[ib], b.X[ib], b.Z[ib]))
    kwargs = dict(
        response_name=data.response_name,
        cluster_name=data.cluster_name,
        fixed_names=data.fixed_names,
        random_names=data.random_names,
    )
    return ClusteredDataset(first, **kwargs), ClusteredDataset(second, **kwargs)


def jackknife_adjust(
    data: ClusteredDataset,
    tau: float,
    stream: Stream,
    *,
    base="lqmm",
    n_nodes: int = 15,
) -> JackknifeFit:
    """Half-panel jackknife bias correction.

    Each cluster's observations are split at random into two halves; the
    corrected estimate is 2 beta_full - (beta_half1 + beta_half2) / 2.
    ``base`` selects the estimator being corrected ("lqmm", "twostep",
    "canay" or "marginal"), or is a callable dataset -> coefficient
    vector.  Every cluster needs at least two observations.
    """
    if int(min(data.cluster_sizes)) < 2:
        raise UnsupportedModelError(
            "half-panel jackknife needs at least two observations per cluster"
        )
    fitters = {
        "lqmm": lambda d: fit_lqmm(d, tau, n_nodes=n_nodes).beta,
        "twostep": lambda d: fit_twostep(d, tau, n_nodes=n_nodes).beta,
        "canay": lambda d: fit_canay(d, tau).beta,
        "marginal": lambda d: fit_marginal(d, tau).beta,
    }
    if callable(base):
        fitter = base
        base_name = getattr(base, "__name__", "custom")
    elif base in fitters:
        fitter = fitters[base]
        base_name = base
    else:
        raise ConfigError(f"unknown jackknife base estimator {base!r}")
    half1, half2 = _half_split(data, stream)
    beta_full = np.asarray(fitter(data), dtype=np.float64)
    b1 = np.asarray(fitter(half1), dtype=np.float64)
    b2 = np.asarray(fitter(half2), dtype=np.float64)
    beta = 2.0 * beta_full - 0.5 * (b1 + b2)
    return JackknifeFit(
        beta=beta,
        beta_full=beta_full,
        beta_half1=b1,
        beta_half2=b2,
        base=base_name,
    )
