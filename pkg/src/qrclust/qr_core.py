"""Exact quantile regression by interior-point LP, plus standard errors.

``fit_qr`` minimizes the check-loss objective with a primal-dual
(Mehrotra predictor-corrector) method on the bounded-variable LP dual:

    max  y'a   s.t.  X'a = X'(1 - tau),  0 <= a <= 1,

whose equality multiplier recovers -beta_hat.  No smoothing is involved:
solutions agree with the exact LP optimum to the duality-gap tolerance.
``brute_force_qr`` provides an independent oracle for small problems by
enumerating interpolation subsets.

Standard errors use the Huber sandwich with observation-level density
estimates from difference quotients of fitted quantiles at tau +/- h,
where h is the Hall-Sheather bandwidth.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.stats import norm

from . import kernels
from .errors import ConfigError, SingularDesignError, SolverError

__all__ = [
    "QrFit",
    "SandwichSE",
    "check_loss",
    "objective",
    "fit_qr",
    "brute_force_qr",
    "hall_sheather_bandwidth",
    "standard_errors",
]

_STEP_SHRINK = 0.99995  # fraction of the distance to the boundary taken per step
_RATIO_CAP = 1e14


def check_loss(v, tau):
    """Check (pinball) loss rho_tau(v) = v * (tau - 1{v < 0}), elementwise."""
    v = np.asarray(v, dtype=np.float64)
    _validate_tau(tau)
    return v * (tau - (v < 0.0))


def objective(beta, y, X, tau, offset=None):
    """Total check loss of the residuals y - offset - X beta."""
    beta = np.asarray(beta, dtype=np.float64)
    r = y - X @ beta
    if offset is not None:
        r = r - offset
    _validate_tau(tau)
    return float(kernels.checkloss_sum(np.ascontiguousarray(r), float(tau)))


def _validate_tau(tau):
    t = np.asarray(tau, dtype=np.float64)
    if np.any(t <= 0.0) or np.any(t >= 1.0):
        raise ConfigError(f"quantile level must lie strictly in (0, 1), got {tau!r}")


@dataclass
class QrFit:
    """Result of one quantile-regression fit."""

    beta: np.ndarray
    tau: float
    objective: float
    residuals: np.ndarray
    n_iter: int
    gap: float
    converged: bool


def _step_length(v, dv):
    """Largest alpha with v + alpha dv >= (1 - shrink) v, capped at 1."""
    neg = dv < 0.0
    if not np.any(neg):
        return 1.0
    ratio = v[neg] / -dv[neg]
    return min(1.0, _STEP_SHRINK * float(ratio.min()))


def _ip_core(matvecs, c, taus, n, tol, max_iter):
    """Shared Mehrotra predictor-corrector loop.

    ``matvecs`` bundles the design-dependent operations:
      apply_At(yv)    -> per-row values of (design) @ yv
      apply_A(rowv)   -> column-space image of design' @ rowv
      solve_normal(q, rhs) -> solution of (design' Q design) dy = rhs
    Rows play the role of the box-constrained dual vector a in [0, 1].
    """
    apply_At, apply_A, solve_normal = matvecs
    x = 1.0 - taus
    s = taus.copy()
    # initial multiplier: unweighted least-squares residual split
    ym = solve_normal(np.ones(n), apply_A(c))
    r = c - apply_At(ym)
    z = np.maximum(r, 0.0) + 1e-3 + 0.1 * np.abs(r)
    w = z - r
    gap = float(x @ z + s @ w)
    it = 0
    # overshoot the requested gap a little so the objective error stays
    # comfortably inside the advertised tolerance
    target = 0.01 * tol
    while gap > target and it < max_iter:
        it += 1
        zx = np.minimum(z / x, _RATIO_CAP)
        ws = np.minimum(w / s, _RATIO_CAP)
        q = 1.0 / (zx + ws)
        r_zw = z - w
        dy = solve_normal(q, apply_A(q * r_zw))
        dx = q * (apply_At(dy) - r_zw)
        ds = -dx
        dz = -z - zx * dx
        dw = -w - ws * ds
        ap = min(_step_length(x, dx), _step_length(s, ds))
        ad = min(_step_length(z, dz), _step_length(w, dw))
        if min(ap, ad) < 1.0:
            # Mehrotra corrector with centering parameter from the affine step
            g = float((x + ap * dx) @ (z + ad * dz) + (s + ap * ds) @ (w + ad * dw))
            mu = gap * (g / gap) ** 3 / (2.0 * n)
            dxdz = dx * dz
            dsdw = ds * dw
            xi = mu * (1.0 / x - 1.0 / s) - dxdz / x + dsdw / s
            dy = solve_normal(q, apply_A(q * (r_zw - xi)))
            dx = q * (apply_At(dy) - r_zw + xi)
            ds = -dx
            dz = mu / x - z - dxdz / x - zx * dx
            dw = mu / s - w - dsdw / s - ws * ds
            ap = min(_step_length(x, dx), _step_length(s, ds))
            ad = min(_step_length(z, dz), _step_length(w, dw))
        x += ap * dx
        s += ap * ds
        ym += ad * dy
        z += ad * dz
        w += ad * dw
        gap = float(x @ z + s @ w)
    return ym, gap, it


class _DenseNormal:
    """Normal-equation solver for a dense design, with ridge fallback."""

    def __init__(self, X):
        self.X = X
        self.first = True

    def __call__(self, q, rhs):
        M = (self.X * q[:, None]).T @ self.X
        try:
            cf = scipy.linalg.cho_factor(M, check_finite=False)
            self.first = False
            return scipy.linalg.cho_solve(cf, rhs, check_finite=False)
        except scipy.linalg.LinAlgError:
            if self.first:
                raise SingularDesignError(
                    "design matrix is numerically rank deficient"
                ) from None
            # late-stage ill-conditioning: regularize and continue
            M[np.diag_indices_from(M)] += 1e-11 * max(1.0, float(np.trace(M)))
            return scipy.linalg.solve(M, rhs, assume_a="pos", check_finite=False)


def _ip_solve_dense(X, y, taus, tol, max_iter):
    n = X.shape[0]
    matvecs = (
        lambda ym: X @ ym,
        lambda rowv: X.T @ rowv,
        _DenseNormal(X),
    )
    ym, gap, it = _ip_core(matvecs, -y, taus, n, tol, max_iter)
    return -ym, gap, it


def fit_qr(y, X, tau, *, offset=None, tol=1e-8, max_iter=200) -> QrFit:
    """Exact quantile regression of (y - offset) on X at level tau.

    ``tau`` may also be an array with one level per observation, which is
    what the penalized estimators use internally.
    """
    y = np.asarray(y, dtype=np.float64)
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ConfigError("fit_qr needs y (n,) and X (n, p) with matching n")
    n, p = X.shape
    if n < p:
        raise SingularDesignError(f"need at least p={p} observations, got {n}")
    _validate_tau(tau)
    taus = np.broadcast_to(np.asarray(tau, dtype=np.float64), (n,)).copy()
    yw = y if offset is None else y - offset
    beta, gap, it = _ip_solve_dense(X, yw, taus, tol, max_iter)
    resid = yw - X @ beta
    scalar_tau = float(np.unique(taus)[0]) if np.unique(taus).size == 1 else None
    if scalar_tau is not None:
        obj = float(kernels.checkloss_sum(np.ascontiguousarray(resid), scalar_tau))
    else:
        obj = float(kernels.checkloss_sum_taus(np.ascontiguousarray(resid), taus))
    return QrFit(
        beta=beta,
        tau=scalar_tau if scalar_tau is not None else taus,
        objective=obj,
        residuals=resid,
        n_iter=it,
        gap=gap,
        converged=gap <= tol,
    )


def brute_force_qr(y, X, tau):
    """Oracle minimizer by enumerating all size-p interpolation subsets.

    Exponential cost; guarded to n <= 18 and p <= 4.  Returns
    (beta, objective).
    """
    y = np.asarray(y, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    n, p = X.shape
    if n > 18 or p > 4:
        raise ConfigError("brute_force_qr is limited to n <= 18, p <= 4")
    if n < p:
        raise SingularDesignError("need at least p observations")
    _validate_tau(tau)
    tau = float(tau)
    best_obj = np.inf
    best_beta = None
    for subset in itertools.combinations(range(n), p):
        Xs = X[list(subset)]
        try:
            beta = np.linalg.solve(Xs, y[list(subset)])
        except np.linalg.LinAlgError:
            continue
        if not np.isfinite(beta).all():
            continue
        obj = float(kernels.checkloss_sum(np.ascontiguousarray(y - X @ beta), tau))
        if obj < best_obj:
            best_obj = obj
            best_beta = beta
    if best_beta is None:
        raise SingularDesignError("no non-singular size-p subset exists")
    return best_beta, best_obj


def hall_sheather_bandwidth(n, tau, alpha=0.05):
    """Hall-Sheather bandwidth for sparsity estimation at level tau."""
    z_a = norm.ppf(1.0 - alpha / 2.0)
    z_t = norm.ppf(tau)
    return float(
        n ** (-1.0 / 3.0)
        * z_a ** (2.0 / 3.0)
        * (1.5 * norm.pdf(z_t) ** 2 / (2.0 * z_t**2 + 1.0)) ** (1.0 / 3.0)
    )


@dataclass
class SandwichSE:
    """Huber sandwich standard errors for a quantile-regression fit."""

    se: np.ndarray
    cov: np.ndarray
    bandwidth: float
    tau_lo: float
    tau_hi: float
    clipped: bool


def standard_errors(y, X, tau, *, offset=None, alpha=0.05) -> SandwichSE:
    """Sandwich covariance tau(1-tau) H^-1 J H^-1.

    J = X'X and H = X' diag(f) X, where f_i is the difference-quotient
    density estimate 2h / x_i'(beta(tau+h) - beta(tau-h)).  Rows whose
    fitted quantiles cross (non-positive quotient) get the density floored
    at machine epsilon, i.e. essentially no weight in H.  The bandwidth is
    clipped so both side levels stay inside (0.001, 0.999).
    """
    y = np.asarray(y, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    tau = float(tau)
    _validate_tau(tau)
    n = y.shape[0]
    h = hall_sheather_bandwidth(n, tau, alpha)
    clipped = False
    h_max = min(tau - 0.001, 0.999 - tau)
    if h > h_max:
        warnings.warn(
            f"sparsity bandwidth {h:.4g} clipped to {h_max:.4g} to keep "
            f"side levels inside (0.001, 0.999)",
            RuntimeWarning,
            stacklevel=2,
        )
        h = h_max
        clipped = True
    if h <= 0:
        raise SolverError("no admissible sparsity bandwidth at this tau and n")
    hi = fit_qr(y, X, tau + h, offset=offset)
    lo = fit_qr(y, X, tau - h, offset=offset)
    dq = X @ (hi.beta - lo.beta)
    # rows where the fitted quantiles cross would yield a negative density
    # estimate; floor those at machine epsilon so they carry no weight in H
    eps = np.finfo(np.float64).eps
    f = np.where(dq > 0, 2.0 * h / np.where(dq > 0, dq, 1.0), eps)
    J = X.T @ X
    H = (X * f[:, None]).T @ X
    try:
        Hinv = scipy.linalg.inv(H)
    except scipy.linalg.LinAlgError as exc:
        raise SingularDesignError("sparsity-weighted design is singular") from exc
    cov = tau * (1.0 - tau) * Hinv @ J @ Hinv
    return SandwichSE(
        se=np.sqrt(np.diag(cov)),
        cov=cov,
        bandwidth=h,
        tau_lo=tau - h,
        tau_hi=tau + h,
        clipped=clipped,
    )
