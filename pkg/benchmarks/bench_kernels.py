"""Side-by-side timing of the compiled and pure-numpy kernel backends.

Imports both backend modules directly (ignoring QRCLUST_PURE_NUMPY) and
reports the median wall time per call for each hot kernel on workloads
shaped like the Monte Carlo benchmark: 500 clusters of 6 observations.

Usage: python3 benchmarks/bench_kernels.py [--repeats N] [--scale K]
"""

import argparse
import time

import numpy as np

from qrclust import _kernels_numpy

try:
    from qrclust import _kernels_numba
except ImportError:
    _kernels_numba = None


def make_grid_workload(rng, n_clusters, cluster_size, n_nodes, q):
    n_obs = n_clusters * cluster_size
    res0 = rng.normal(size=n_obs)
    starts = np.arange(n_clusters + 1) * cluster_size
    logw = np.full(n_nodes, -np.log(n_nodes))
    out_cl = np.empty((n_clusters, n_nodes))
    out_ll = np.empty(n_clusters)
    if q == 1:
        node_eff = rng.normal(size=n_nodes)
        return (res0, node_eff, logw, starts, 0.3, 0.25, out_cl, out_ll)
    Z = rng.normal(size=(n_obs, q))
    node_eff = rng.normal(size=(n_nodes, q))
    return (res0, Z, node_eff, logw, starts, 0.3, 0.25, out_cl, out_ll)


def median_ms(fn, args, repeats):
    fn(*args)  # warm-up (and JIT compile for the numba twin)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return 1e3 * float(np.median(times))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=30)
    ap.add_argument("--scale", type=int, default=1,
                    help="multiply the cluster count by this factor")
    args = ap.parse_args()

    rng = np.random.default_rng(20240519)
    nC = 500 * args.scale
    big = rng.normal(size=300_000 * args.scale)
    taus = np.full(big.shape, 0.25)

    cases = [
        ("checkloss_sum (300k)", "checkloss_sum", (big, 0.25)),
        ("checkloss_sum_taus (300k)", "checkloss_sum_taus", (big, taus)),
        (
            f"grid icept ({nC}x6, 15 nodes)",
            "cluster_loglik_grid_icept",
            make_grid_workload(rng, nC, 6, 15, 1),
        ),
        (
            f"grid icept ({nC}x6, 31 nodes)",
            "cluster_loglik_grid_icept",
            make_grid_workload(rng, nC, 6, 31, 1),
        ),
        (
            f"grid q=2 ({nC}x6, 225 nodes)",
            "cluster_loglik_grid",
            make_grid_workload(rng, nC, 6, 225, 2),
        ),
    ]

    header = f"{'workload':<34} {'numpy ms':>10} {'numba ms':>10} {'speedup':>9}"
    print(header)
    print("-" * len(header))
    for label, name, work in cases:
        t_np = median_ms(getattr(_kernels_numpy, name), work, args.repeats)
        if _kernels_numba is None:
            print(f"{label:<34} {t_np:>10.3f} {'n/a':>10} {'':>9}")
            continue
        t_nb = median_ms(getattr(_kernels_numba, name), work, args.repeats)
        print(f"{label:<34} {t_np:>10.3f} {t_nb:>10.3f} {t_np / t_nb:>8.1f}x")
    if _kernels_numba is None:
        print("\nnumba backend not importable; timed the fallback only")


if __name__ == "__main__":
    main()
