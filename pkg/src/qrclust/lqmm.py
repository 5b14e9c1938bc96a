"""Linear quantile mixed model: asymmetric-Laplace working likelihood.

The conditional model treats Y given the cluster effect u as asymmetric
Laplace (ALD) with location X beta + Z u, scale sigma and skewness tau,
and u as Gaussian with covariance factor S (lower triangular, q <= 2).
Cluster random effects are integrated out with Gauss-Hermite quadrature on
a tensor grid, and the fixed effects, sigma and S are chosen by maximizing
the resulting marginal log likelihood with a derivative-free simplex
search over (beta, log sigma, log-diagonal S).

Two predictors of the cluster effects are provided.  ``predict_blp``
evaluates the posterior mean of u per cluster on the quadrature grid.
``linear_blp`` is the best *linear* predictor built from the working
model's first two moments; it is the cheaper, shrinkage-style predictor
that the fit attaches (centered) for the two-step estimator to consume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.special

from . import kernels
from .data_model import ClusteredDataset
from .errors import ConfigError, UnsupportedModelError
from .nelder_mead import minimize_simplex
from .qr_core import check_loss, fit_qr

__all__ = [
    "LqmmFit",
    "ald_logpdf",
    "gauss_hermite",
    "marginal_loglik",
    "fit_lqmm",
    "predict_blp",
    "linear_blp",
    "center",
]

SCALE_FLOOR = 1e-6
DEFAULT_NODES = 15


def ald_logpdf(v, sigma, tau):
    """Log density of the asymmetric Laplace at deviation v from location.

    log f = log(tau (1 - tau) / sigma) - rho_tau(v / sigma)
    """
    if sigma <= 0.0:
        raise ConfigError("ALD scale must be positive")
    v = np.asarray(v, dtype=np.float64)
    return math.log(tau * (1.0 - tau) / sigma) - check_loss(v / sigma, tau)


def gauss_hermite(n_nodes: int):
    """Nodes and weights for E[g(U)], U standard normal.

    Weights are normalized to sum to one; nodes are symmetric about zero.
    Stable for large node counts, so the same rule serves both routine
    fitting (15 nodes) and fine refinement checks.
    """
    if not 1 <= n_nodes <= 64:
        raise ConfigError("quadrature node count must lie in [1, 64]")
    x, w = scipy.special.roots_hermitenorm(n_nodes)
    return x, w / w.sum()


def _tensor_grid(n_nodes: int, q: int):
    """Cartesian product grid over q dimensions: (nK^q, q) nodes, weights."""
    x, w = gauss_hermite(n_nodes)
    if q == 1:
        return x[:, None], w
    grids = np.meshgrid(*([x] * q), indexing="ij")
    wgrids = np.meshgrid(*([w] * q), indexing="ij")
    nodes = np.column_stack([g.ravel() for g in grids])
    weights = np.ones(nodes.shape[0])
    for wg in wgrids:
        weights *= wg.ravel()
    return nodes, weights


def _as_scale_tril(re_scale, q: int) -> np.ndarray:
    S = np.asarray(re_scale, dtype=np.float64)
    if S.ndim == 0:
        if q != 1:
            raise ConfigError("scalar re_scale only valid for q = 1")
        S = S.reshape(1, 1)
    if S.shape != (q, q):
        raise ConfigError(f"re_scale must be a ({q}, {q}) lower-triangular factor")
    if np.any(np.triu(S, 1) != 0.0):
        raise ConfigError("re_scale must be lower triangular")
    if np.any(np.diag(S) < 0.0):
        raise ConfigError("re_scale diagonal must be non-negative")
    return S


class _GridWorkspace:
    """Preallocated buffers plus the intercept-only fast-path flag."""

    def __init__(self, data: ClusteredDataset, n_nodes: int):
        q = data.q
        if q > 2:
            raise UnsupportedModelError("random-effect dimension q > 2 is not supported")
        self.nodes, self.weights = _tensor_grid(n_nodes, q)
        # tail weights of fine tensor grids underflow to 0; log(0) = -inf is
        # exactly what the log-sum-exp reduction wants, so silence the warning
        with np.errstate(divide="ignore"):
            self.logw = np.log(self.weights)
        n_grid = self.nodes.shape[0]
        self.out_cl = np.empty((data.n_clusters, n_grid))
        self.out_ll = np.empty(data.n_clusters)
        self.icept_only = q == 1 and bool(np.all(data.Z == 1.0))
        self.Z = data.Z
        self.starts = data.starts

    def fill(self, res0, S, sigma, tau):
        node_eff = self.nodes @ S.T
        if self.icept_only:
            kernels.cluster_loglik_grid_icept(
                res0,
                np.ascontiguousarray(node_eff[:, 0]),
                self.logw,
                self.starts,
                sigma,
                tau,
                self.out_cl,
                self.out_ll,
            )
        else:
            kernels.cluster_loglik_grid(
                res0,
                self.Z,
                np.ascontiguousarray(node_eff),
                self.logw,
                self.starts,
                sigma,
                tau,
                self.out_cl,
                self.out_ll,
            )
        return node_eff


def marginal_loglik(data: ClusteredDataset, beta, sigma, re_scale, tau, n_nodes=DEFAULT_NODES):
    """Quadrature approximation of the marginal log likelihood.

    Sum over clusters of log sum_k w_k prod_j f_ALD(y_ij | x'beta + z'(S v_k)).
    A zero re_scale collapses every node to the origin, so the value reduces
    exactly to the sum of ALD log densities at the fixed part.
    """
    if sigma <= 0.0:
        raise ConfigError("sigma must be positive")
    S = _as_scale_tril(re_scale, data.q)
    ws = _GridWorkspace(data, n_nodes)
    res0 = np.ascontiguousarray(data.y - data.X @ np.asarray(beta, dtype=np.float64))
    ws.fill(res0, S, float(sigma), float(tau))
    # exact (order-independent) reduction: permuting clusters must not move
    # the optimum by even one ulp, or the simplex search takes another path
    return math.fsum(ws.out_ll)


@dataclass
class LqmmFit:
    """Maximized ALD working model.

    ``blp_raw`` holds the best linear predictions of the cluster effects at
    the optimum, ``blp`` the same predictions with column means removed —
    the form the two-step estimator subtracts as an offset.
    """

    beta: np.ndarray
    sigma: float
    scale_tril: np.ndarray
    tau: float
    loglik: float
    n_nodes: int
    n_evals: int
    converged: bool
    blp_raw: np.ndarray | None = None
    blp: np.ndarray | None = None

    @property
    def re_scale(self) -> float:
        """Random-intercept scale; only meaningful for q = 1."""
        return float(self.scale_tril[0, 0])


def _pack(beta, sigma, S, q):
    parts = [beta, [math.log(max(sigma, SCALE_FLOOR))]]
    parts.append([math.log(max(S[0, 0], SCALE_FLOOR))])
    if q == 2:
        parts.append([S[1, 0], math.log(max(S[1, 1], SCALE_FLOOR))])
    return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])


def _unpack(theta, p, q):
    beta = theta[:p]
    sigma = max(math.exp(theta[p]), SCALE_FLOOR)
    S = np.zeros((q, q))
    S[0, 0] = max(math.exp(theta[p + 1]), SCALE_FLOOR)
    if q == 2:
        S[1, 0] = theta[p + 2]
        S[1, 1] = max(math.exp(theta[p + 3]), SCALE_FLOOR)
    return beta, sigma, S


def _default_init(data: ClusteredDataset, tau: float):
    marg = fit_qr(data.y, data.X, tau)
    resid = marg.residuals
    sigma0 = max(marg.objective / data.n_obs, SCALE_FLOOR)
    cl_means = np.array(
        [
            resid[data.starts[i] : data.starts[i + 1]].mean()
            for i in range(data.n_clusters)
        ]
    )
    phi0 = max(float(cl_means.std()), SCALE_FLOOR)
    S0 = np.eye(data.q) * phi0
    return marg.beta, sigma0, S0


def fit_lqmm(
    data: ClusteredDataset,
    tau: float,
    *,
    n_nodes: int = DEFAULT_NODES,
    tol: float = 1e-6,
    max_evals: int | None = None,
    init=None,
) -> LqmmFit:
    """Maximize the quadrature marginal likelihood.

    Start values default to the marginal quantile fit (beta), the mean
    check loss of its residuals (sigma) and the standard deviation of
    cluster-mean residuals (random-effect scale); ``init`` may supply a
    (beta, sigma, scale_tril) triple instead, e.g. to warm-start bootstrap
    refits.  One deterministic simplex run, restarted once from the
    incumbent if it stalls.
    """
    if not 0.0 < tau < 1.0:
        raise ConfigError("tau must lie strictly in (0, 1)")
    p, q = data.p, data.q
    ws = _GridWorkspace(data, n_nodes)
    y, X = data.y, data.X

    def negloglik(theta):
        beta, sigma, S = _unpack(theta, p, q)
        res0 = np.ascontiguousarray(y - X @ beta)
        ws.fill(res0, S, sigma, tau)
        return -math.fsum(ws.out_ll)  # order-independent, see marginal_loglik

    if init is None:
        beta0, sigma0, S0 = _default_init(data, tau)
        rel_step = 0.05
    else:
        beta0, sigma0, S0 = init
        beta0 = np.asarray(beta0, dtype=np.float64)
        S0 = _as_scale_tril(S0, q)
        rel_step = 0.02
    theta0 = _pack(beta0, sigma0, S0, q)
    d = theta0.size
    budget = max_evals if max_evals is not None else 2000 * d

    res = minimize_simplex(negloglik, theta0, tol=tol, max_evals=budget, rel_step=rel_step)
    n_evals = res.n_evals
    if not res.converged:
        res = minimize_simplex(negloglik, res.x, tol=tol, max_evals=budget, rel_step=rel_step)
        n_evals += res.n_evals

    beta, sigma, S = _unpack(res.x, p, q)
    beta = np.asarray(beta, dtype=np.float64).copy()
    blp_raw = linear_blp(data, beta, sigma, S, tau)
    return LqmmFit(
        beta=beta,
        sigma=sigma,
        scale_tril=S,
        tau=tau,
        loglik=-res.fun,
        n_nodes=n_nodes,
        n_evals=n_evals,
        converged=res.converged,
        blp_raw=blp_raw,
        blp=center(blp_raw),
    )


def predict_blp(fit: LqmmFit, data: ClusteredDataset) -> np.ndarray:
    """Posterior mean of the cluster effects on the quadrature grid.

    Returns an (N, q) matrix; row i is
        sum_k w_k (S v_k) L_i(v_k) / sum_k w_k L_i(v_k)
    with L_i the conditional likelihood of cluster i, evaluated stably in
    log space.  Unlike ``linear_blp`` this is nonlinear in the responses;
    it is the reference predictor for quadrature accuracy checks.
    """
    ws = _GridWorkspace(data, fit.n_nodes)
    res0 = np.ascontiguousarray(data.y - data.X @ fit.beta)
    node_eff = ws.fill(res0, fit.scale_tril, fit.sigma, fit.tau)
    # out_cl rows hold log(w_k L_i(v_k)) up to a common constant
    m = ws.out_cl.max(axis=1, keepdims=True)
    wgt = np.exp(ws.out_cl - m)
    wgt /= wgt.sum(axis=1, keepdims=True)
    return wgt @ node_eff


def linear_blp(data: ClusteredDataset, beta, sigma, re_scale, tau) -> np.ndarray:
    """Best linear predictor of the cluster effects, one row per cluster.

    Uses only the first two working-model moments: with residuals
    r = y - X beta - E[eps], E[eps] = sigma (1 - 2 tau)/(tau (1 - tau)) and
    error variance omega = sigma^2 (1 - 2 tau + 2 tau^2)/(tau^2 (1 - tau)^2),
    the Gaussian-effect prediction is the ridge solve

        u_i = (omega Phi^{-1} + Z_i' Z_i)^{-1} Z_i' r_i,   Phi = S S',

    which shrinks small or noisy clusters toward zero.  A degenerate scale
    factor (zero diagonal) returns the limit, all-zero predictions.
    """
    if sigma <= 0.0:
        raise ConfigError("sigma must be positive")
    q = data.q
    S = _as_scale_tril(re_scale, q)
    if np.any(np.diag(S) <= 0.0):
        return np.zeros((data.n_clusters, q))
    xi = (1.0 - 2.0 * tau) / (tau * (1.0 - tau))
    psi2 = (1.0 - 2.0 * tau + 2.0 * tau * tau) / (tau * (1.0 - tau)) ** 2
    omega = sigma * sigma * psi2
    S_inv = scipy.linalg.solve_triangular(S, np.eye(q), lower=True)
    phi_inv = S_inv.T @ S_inv
    r = data.y - data.X @ np.asarray(beta, dtype=np.float64) - sigma * xi
    Z = data.Z
    seg = data.starts[:-1]
    ztr = np.add.reduceat(Z * r[:, None], seg, axis=0)
    pair = (Z[:, :, None] * Z[:, None, :]).reshape(data.n_obs, q * q)
    ztz = np.add.reduceat(pair, seg, axis=0).reshape(-1, q, q)
    lhs = omega * phi_inv[None, :, :] + ztz
    return np.linalg.solve(lhs, ztr[:, :, None])[:, :, 0]


def center(u: np.ndarray) -> np.ndarray:
    """Remove the (unweighted) column means of a predictor matrix."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 1:
        return u - u.mean()
    return u - u.mean(axis=0, keepdims=True)
