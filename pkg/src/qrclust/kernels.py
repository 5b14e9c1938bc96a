"""Backend dispatch for the hot numeric kernels.

The compiled (numba) backend is used when available.  Setting the
environment variable ``QRCLUST_PURE_NUMPY=1`` before import forces the
pure-numpy fallback; ``BACKEND`` records which one is active.  Both
backends implement the same contracts, see ``_kernels_numpy`` for the
reference semantics.
"""

from __future__ import annotations

import os

from . import _kernels_numpy

_force_numpy = os.environ.get("QRCLUST_PURE_NUMPY", "").strip() in {"1", "true", "yes"}

if not _force_numpy:
    try:
        from . import _kernels_numba as _impl

        BACKEND = "numba"
    except ImportError:  # pragma: no cover - exercised only without numba
        _impl = _kernels_numpy
        BACKEND = "numpy"
else:
    _impl = _kernels_numpy
    BACKEND = "numpy"

checkloss_sum = _impl.checkloss_sum
checkloss_sum_taus = _impl.checkloss_sum_taus
cluster_loglik_grid_icept = _impl.cluster_loglik_grid_icept
cluster_loglik_grid = _impl.cluster_loglik_grid

__all__ = [
    "BACKEND",
    "checkloss_sum",
    "checkloss_sum_taus",
    "cluster_loglik_grid_icept",
    "cluster_loglik_grid",
]
