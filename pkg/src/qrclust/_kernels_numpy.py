"""Pure-numpy reference implementations of the hot numeric kernels.

These are the semantics of record; the numba twins in ``_kernels_numba``
must agree with them to floating-point noise.  Vectorized reductions here
use numpy's pairwise summation, so the two backends may differ in the last
bits but never materially.
"""

from __future__ import annotations

import numpy as np


def checkloss_sum(v: np.ndarray, tau: float) -> float:
    """Sum of the asymmetric absolute (check) loss at level tau.

    rho_tau(v) = v * (tau - 1{v < 0}).
    """
    v = np.asarray(v, dtype=np.float64)
    return float(tau * v.sum() - np.minimum(v, 0.0).sum())


def checkloss_sum_taus(v: np.ndarray, taus: np.ndarray) -> float:
    """Check-loss sum with an observation-specific level per row."""
    v = np.asarray(v, dtype=np.float64)
    taus = np.asarray(taus, dtype=np.float64)
    return float((taus * v).sum() - np.minimum(v, 0.0).sum())


def cluster_loglik_grid_icept(res0, node_eff1, logw, starts, sigma, tau, out_cl, out_ll):
    """Joint log density over a random-intercept quadrature grid.

    For cluster i and node k writes
        out_cl[i, k] = logw[k] + sum_j log f(res0[j] - node_eff1[k]; sigma, tau)
    with f the asymmetric-Laplace density at location 0, and
        out_ll[i]   = logsumexp_k out_cl[i, :]
    which is the quadrature approximation of cluster i's marginal
    log likelihood.
    """
    res0 = np.asarray(res0, dtype=np.float64)
    ni = np.diff(starts)
    logc = np.log(tau * (1.0 - tau) / sigma)
    v = res0[:, None] - node_eff1[None, :]
    loss = tau * v - np.minimum(v, 0.0)
    loss_by_cluster = np.add.reduceat(loss, starts[:-1], axis=0)
    cl = ni[:, None] * logc - loss_by_cluster / sigma + logw[None, :]
    m = cl.max(axis=1)
    out_cl[...] = cl
    out_ll[...] = m + np.log(np.exp(cl - m[:, None]).sum(axis=1))


def cluster_loglik_grid(res0, Z, node_eff, logw, starts, sigma, tau, out_cl, out_ll):
    """General-q version: node effects enter through Z @ node_eff[k]."""
    res0 = np.asarray(res0, dtype=np.float64)
    ni = np.diff(starts)
    logc = np.log(tau * (1.0 - tau) / sigma)
    v = res0[:, None] - Z @ node_eff.T
    loss = tau * v - np.minimum(v, 0.0)
    loss_by_cluster = np.add.reduceat(loss, starts[:-1], axis=0)
    cl = ni[:, None] * logc - loss_by_cluster / sigma + logw[None, :]
    m = cl.max(axis=1)
    out_cl[...] = cl
    out_ll[...] = m + np.log(np.exp(cl - m[:, None]).sum(axis=1))
