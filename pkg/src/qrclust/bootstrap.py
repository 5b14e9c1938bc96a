"""Cluster bootstrap schemes for the two-step estimator.

Four resampling schemes generate replicate data sets around a fitted
two-step model:

* rw  — weighted level-1 residuals (two-point weights whose tau-quantile
        is zero, applied to each observation's own absolute residual) plus
        cluster-level resampling of the centered predicted effects.
* rrr — pooled i.i.d. resampling of the signed level-1 residuals plus the
        same cluster-level effect resampling.
* rc  — resampling whole clusters with replacement (cases, not residuals).
* cw  — one weight per cluster applied to absolute level-0 residuals
        (effects are never separated from the noise).

``run_bootstrap`` refits the full two-step estimator on every replicate
(warm-started from the observed fit) and, for rw/rrr, also fits the
oracle regression that subtracts the known replicate effects.  Replicate
b always consumes the stream keyed by b, so results are byte-identical
for any worker count.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass

import numpy as np
import scipy.stats

from .data_model import ClusteredDataset
from .errors import ConfigError, QrclustError, SolverError, UnreliableRunError
from .estimators import TwoStepFit, fit_twostep, random_effect_offset
from .qr_core import fit_qr
from .rng import Stream

__all__ = [
    "SCHEMES",
    "BootstrapRun",
    "draw_weights",
    "gen_rw",
    "gen_rrr",
    "gen_rc",
    "gen_cw",
    "run_bootstrap",
    "bias_adjust",
    "basic_ci",
    "se_adjusted_ci",
]

SCHEMES = ("rw", "rrr", "rc", "cw")
# schemes whose replicates carry known effects, enabling the oracle refit
_ORACLE_SCHEMES = ("rw", "rrr")

_MAX_FAILED_FRACTION = 0.2


def draw_weights(rng, tau: float, size: int) -> np.ndarray:
    """Two-point weights: -2*tau w.p. tau, 2*(1-tau) w.p. 1-tau.

    The tau-quantile of this law is zero and Var(w) = 4*tau*(1-tau), so
    w * |r| perturbs a residual r without shifting its tau-quantile.
    At tau = 1/2 the weights are Rademacher.
    """
    u = rng.random(size)
    return np.where(u < tau, -2.0 * tau, 2.0 * (1.0 - tau))


def _resample_effects(fit: TwoStepFit, data: ClusteredDataset, rng):
    """Cluster-level resample (with replacement) of the centered effects."""
    idx = rng.integers(0, data.n_clusters, size=data.n_clusters)
    return fit.blp[idx]


def gen_rw(fit: TwoStepFit, data: ClusteredDataset, rng):
    """Weighted-residual replicate.  Draw order: effect indices, weights."""
    u_star = _resample_effects(fit, data, rng)
    w = draw_weights(rng, fit.tau, data.n_obs)
    y_star = (
        data.X @ fit.beta
        + random_effect_offset(data, u_star)
        + w * np.abs(fit.qr.residuals)
    )
    return y_star, u_star


def gen_rrr(fit: TwoStepFit, data: ClusteredDataset, rng):
    """Pooled-residual replicate.  Draw order: effect indices, residual indices."""
    u_star = _resample_effects(fit, data, rng)
    ridx = rng.integers(0, data.n_obs, size=data.n_obs)
    y_star = (
        data.X @ fit.beta
        + random_effect_offset(data, u_star)
        + fit.qr.residuals[ridx]
    )
    return y_star, u_star


def gen_rc(data: ClusteredDataset, rng) -> ClusteredDataset:
    """Whole-cluster resample; blocks are copied verbatim under fresh ids."""
    idx = rng.integers(0, data.n_clusters, size=data.n_clusters)
    return data.take_clusters(idx, relabel=True)


def gen_cw(fit: TwoStepFit, data: ClusteredDataset, rng):
    """Cluster-weight replicate: one weight per cluster on level-0 residuals."""
    r0 = data.y - data.X @ fit.beta
    w = draw_weights(rng, fit.tau, data.n_clusters)
    return data.X @ fit.beta + w[data.cluster_index] * np.abs(r0)


@dataclass
class BootstrapRun:
    """Replicate estimates from one bootstrap run.

    ``beta_star`` stacks the successful two-step replicate estimates
    (failed replicates are dropped and counted in ``n_failed``);
    ``beta_star_oracle`` is present for rw/rrr only.
    """

    scheme: str
    tau: float
    B: int
    beta: np.ndarray
    beta_star: np.ndarray
    beta_star_oracle: np.ndarray | None
    n_failed: int

    @property
    def mean_star(self) -> np.ndarray:
        return self.beta_star.mean(axis=0)

    @property
    def sd_star(self) -> np.ndarray:
        return self.beta_star.std(axis=0, ddof=1)

    @property
    def sd_oracle(self) -> np.ndarray:
        if self.beta_star_oracle is None:
            raise ConfigError(f"scheme {self.scheme!r} has no oracle replicates")
        return self.beta_star_oracle.std(axis=0, ddof=1)


def _one_replicate(data, fit, scheme, b, stream, n_nodes):
    rng = stream.child("boot", b).generator()
    warm = (fit.lqmm.beta, fit.lqmm.sigma, fit.lqmm.scale_tril)
    if scheme == "rc":
        rep_data = gen_rc(data, rng)
        u_star = None
    elif scheme == "cw":
        y_star = gen_cw(fit, data, rng)
        rep_data = data.with_response(y_star)
        u_star = None
    else:
        gen = gen_rw if scheme == "rw" else gen_rrr
        y_star, u_star = gen(fit, data, rng)
        rep_data = data.with_response(y_star)
    refit = fit_twostep(rep_data, fit.tau, n_nodes=n_nodes, lqmm_init=warm)
    if not refit.lqmm.converged:
        return None
    if u_star is None:
        return refit.beta, None
    oracle = fit_qr(
        rep_data.y, rep_data.X, fit.tau, offset=random_effect_offset(rep_data, u_star)
    )
    return refit.beta, oracle.beta


_POOL_STATE: dict = {}


def _init_pool(payload):
    _POOL_STATE["payload"] = payload


def _pool_task(b):
    data, fit, scheme, stream, n_nodes = _POOL_STATE["payload"]
    try:
        return _one_replicate(data, fit, scheme, b, stream, n_nodes)
    except (QrclustError, np.linalg.LinAlgError):
        return None


def run_bootstrap(
    data: ClusteredDataset,
    fit: TwoStepFit,
    scheme: str,
    B: int,
    stream: Stream,
    *,
    n_nodes: int | None = None,
    threads: int = 1,
) -> BootstrapRun:
    """Run B replicates of ``scheme`` around a fitted two-step model.

    Replicates that fail (solver errors or working-model non-convergence)
    are dropped; if more than 20% fail the partial run is attached to an
    UnreliableRunError instead of being returned.
    """
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown bootstrap scheme {scheme!r}")
    if B < 2:
        raise ConfigError("need at least two bootstrap replicates")
    n_nodes = fit.lqmm.n_nodes if n_nodes is None else n_nodes

    results: list = [None] * B
    if threads > 1:
        payload = (data, fit, scheme, stream, n_nodes)
        with concurrent.futures.ProcessPoolExecutor(
            max_workers=min(threads, B), initializer=_init_pool, initargs=(payload,)
        ) as pool:
            for b, res in zip(range(B), pool.map(_pool_task, range(B), chunksize=4)):
                results[b] = res
    else:
        for b in range(B):
            try:
                results[b] = _one_replicate(data, fit, scheme, b, stream, n_nodes)
            except (QrclustError, np.linalg.LinAlgError):
                results[b] = None

    ok = [r for r in results if r is not None]
    n_failed = B - len(ok)
    want_oracle = scheme in _ORACLE_SCHEMES
    beta_star = np.array([r[0] for r in ok]).reshape(len(ok), -1)
    beta_star_oracle = (
        np.array([r[1] for r in ok]).reshape(len(ok), -1) if want_oracle and ok else None
    )
    run = BootstrapRun(
        scheme=scheme,
        tau=fit.tau,
        B=B,
        beta=fit.beta.copy(),
        beta_star=beta_star,
        beta_star_oracle=beta_star_oracle,
        n_failed=n_failed,
    )
    if n_failed > _MAX_FAILED_FRACTION * B:
        raise UnreliableRunError(
            f"{n_failed}/{B} bootstrap replicates failed", run=run
        )
    return run


def bias_adjust(run: BootstrapRun) -> np.ndarray:
    """Bias-adjusted estimate 2*beta_hat - mean(beta_star)."""
    return 2.0 * run.beta - run.mean_star


@dataclass
class IntervalSet:
    lower: np.ndarray
    upper: np.ndarray
    alpha: float
    kind: str


def basic_ci(run: BootstrapRun, alpha: float = 0.05) -> IntervalSet:
    """Basic bootstrap interval (2*beta_hat - upper/lower replicate quantiles)."""
    if not 0 < alpha < 1:
        raise ConfigError("alpha must be in (0, 1)")
    if run.beta_star.shape[0] < 20:
        raise ConfigError("basic interval needs at least 20 usable replicates")
    hi_q = np.quantile(run.beta_star, 1.0 - alpha / 2.0, axis=0, method="linear")
    lo_q = np.quantile(run.beta_star, alpha / 2.0, axis=0, method="linear")
    return IntervalSet(
        lower=2.0 * run.beta - hi_q,
        upper=2.0 * run.beta - lo_q,
        alpha=alpha,
        kind="basic",
    )


def se_adjusted_ci(
    run: BootstrapRun, se_obs: np.ndarray, alpha: float = 0.05
) -> IntervalSet:
    """Normal interval with SE rescaled by the replicate-spread ratio.

    SE_adj = sd(beta_star) * se_obs / sd(beta_star_oracle), centered at the
    bias-adjusted estimate.  Only rw/rrr carry the oracle replicates this
    needs.
    """
    if not 0 < alpha < 1:
        raise ConfigError("alpha must be in (0, 1)")
    se_obs = np.asarray(se_obs, dtype=np.float64)
    sd_oracle = run.sd_oracle
    if np.any(sd_oracle <= 0):
        raise SolverError("degenerate oracle replicate spread; cannot rescale SEs")
    se_adj = run.sd_star * se_obs / sd_oracle
    center = bias_adjust(run)
    z = scipy.stats.norm.ppf(1.0 - alpha / 2.0)
    return IntervalSet(
        lower=center - z * se_adj,
        upper=center + z * se_adj,
        alpha=alpha,
        kind="se_adjusted",
    )
