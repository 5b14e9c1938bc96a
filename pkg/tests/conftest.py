"""Shared fixtures: small deterministic datasets and data builders."""

import numpy as np
import pytest

from qrclust.data_model import ClusterBlock, ClusteredDataset


def make_gaussian_data(
    rng,
    sizes,
    *,
    beta=(1.0, 1.0),
    phi=1.0,
    sigma_e=1.0,
    gamma=0.0,
    q=1,
    sigma_v=0.0,
):
    """Random-intercept (or intercept+slope) Gaussian test data.

    Returns (dataset, u_true) with u_true shaped (N, q).
    """
    blocks = []
    u_all = []
    for i, n in enumerate(sizes):
        x = rng.uniform(size=n)
        X = np.column_stack([np.ones(n), x])
        u = np.array([rng.normal(0.0, phi)])
        if q == 2:
            u = np.append(u, rng.normal(0.0, sigma_v))
            Z = X
        else:
            Z = X[:, :1]
        e = rng.normal(size=n)
        y = X @ np.asarray(beta) + Z @ u + (1.0 + gamma * x) * sigma_e * e
        blocks.append(ClusterBlock(f"c{i}", y, X, Z))
        u_all.append(u)
    data = ClusteredDataset(blocks, fixed_names=("x",))
    return data, np.array(u_all)


@pytest.fixture
def rng():
    return np.random.default_rng(20240517)


@pytest.fixture
def tiny_data():
    """Three clusters, fixed values, p=2, q=1."""
    blocks = [
        ClusterBlock(
            "a",
            np.array([0.5, 1.8, 1.1]),
            np.column_stack([np.ones(3), [0.1, 0.9, 0.4]]),
            np.ones((3, 1)),
        ),
        ClusterBlock(
            "b",
            np.array([2.0, 0.2]),
            np.column_stack([np.ones(2), [0.7, 0.3]]),
            np.ones((2, 1)),
        ),
        ClusterBlock(
            "c",
            np.array([1.4, -0.3, 0.9, 2.2]),
            np.column_stack([np.ones(4), [0.2, 0.5, 0.8, 0.6]]),
            np.ones((4, 1)),
        ),
    ]
    return ClusteredDataset(blocks, fixed_names=("x",))


@pytest.fixture
def bench_small(rng):
    """Benchmark-shaped draw at reduced scale: 40 clusters of 5."""
    data, u = make_gaussian_data(rng, [5] * 40, gamma=0.4)
    return data, u
