"""Numba-compiled twins of the kernels in ``_kernels_numpy``.

Import of this module requires numba; the dispatcher in ``kernels`` only
loads it when acceleration is enabled and available.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def checkloss_sum(v, tau):
    s = 0.0
    for i in range(v.size):
        x = v[i]
        s += tau * x - min(x, 0.0)
    return s


@njit(cache=True)
def checkloss_sum_taus(v, taus):
    s = 0.0
    for i in range(v.size):
        x = v[i]
        s += taus[i] * x - min(x, 0.0)
    return s


@njit(cache=True)
def cluster_loglik_grid_icept(res0, node_eff1, logw, starts, sigma, tau, out_cl, out_ll):
    N = starts.size - 1
    nK = node_eff1.size
    logc = np.log(tau * (1.0 - tau) / sigma)
    inv = 1.0 / sigma
    acc = np.empty(nK)
    for i in range(N):
        a = starts[i]
        b = starts[i + 1]
        for k in range(nK):
            acc[k] = 0.0
        for j in range(a, b):
            r = res0[j]
            # node-inner loop keeps the check-loss accumulation vectorizable
            for k in range(nK):
                v = r - node_eff1[k]
                acc[k] += tau * v - min(v, 0.0)
        m = -np.inf
        for k in range(nK):
            cl = (b - a) * logc - acc[k] * inv + logw[k]
            out_cl[i, k] = cl
            if cl > m:
                m = cl
        s = 0.0
        for k in range(nK):
            s += np.exp(out_cl[i, k] - m)
        out_ll[i] = m + np.log(s)


@njit(cache=True)
def cluster_loglik_grid(res0, Z, node_eff, logw, starts, sigma, tau, out_cl, out_ll):
    N = starts.size - 1
    nK = node_eff.shape[0]
    q = node_eff.shape[1]
    logc = np.log(tau * (1.0 - tau) / sigma)
    inv = 1.0 / sigma
    acc = np.empty(nK)
    for i in range(N):
        a = starts[i]
        b = starts[i + 1]
        for k in range(nK):
            acc[k] = 0.0
        for j in range(a, b):
            r = res0[j]
            for k in range(nK):
                mu = 0.0
                for t in range(q):
                    mu += Z[j, t] * node_eff[k, t]
                v = r - mu
                acc[k] += tau * v - min(v, 0.0)
        m = -np.inf
        for k in range(nK):
            cl = (b - a) * logc - acc[k] * inv + logw[k]
            out_cl[i, k] = cl
            if cl > m:
                m = cl
        s = 0.0
        for k in range(nK):
            s += np.exp(out_cl[i, k] - m)
        out_ll[i] = m + np.log(s)
