"""Derivative-free simplex minimizer.

Plain Nelder-Mead with the dimension-adaptive coefficients of Gao and Han
for problems in more than two variables.  Convergence is declared when the
spread of objective values across the simplex (max - min) falls below an
absolute tolerance; the incumbent best point is always returned, so a
caller can restart from it when the budget runs out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["SimplexResult", "minimize_simplex"]


@dataclass
class SimplexResult:
    x: np.ndarray
    fun: float
    n_evals: int
    converged: bool


def _initial_simplex(x0, rel_step, abs_step):
    d = x0.size
    pts = np.tile(x0, (d + 1, 1))
    for i in range(d):
        if pts[i + 1, i] != 0.0:
            pts[i + 1, i] *= 1.0 + rel_step
        else:
            pts[i + 1, i] = abs_step
    return pts


def minimize_simplex(
    fn,
    x0,
    *,
    tol: float = 1e-6,
    max_evals: int | None = None,
    rel_step: float = 0.05,
    abs_step: float = 0.00025,
) -> SimplexResult:
    """Minimize ``fn`` starting from ``x0``.

    ``tol`` is the absolute objective-spread criterion over the simplex.
    The evaluation budget defaults to 2000 per dimension.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    d = x0.size
    if max_evals is None:
        max_evals = 2000 * d
    if d > 2:
        alpha, beta, gamma, delta = 1.0, 1.0 + 2.0 / d, 0.75 - 1.0 / (2 * d), 1.0 - 1.0 / d
    else:
        alpha, beta, gamma, delta = 1.0, 2.0, 0.5, 0.5

    pts = _initial_simplex(x0, rel_step, abs_step)
    fvals = np.empty(d + 1)
    n_evals = 0
    for i in range(d + 1):
        fvals[i] = fn(pts[i])
    n_evals += d + 1

    while True:
        order = np.argsort(fvals, kind="stable")
        pts = pts[order]
        fvals = fvals[order]
        if fvals[-1] - fvals[0] < tol:
            return SimplexResult(pts[0].copy(), float(fvals[0]), n_evals, True)
        if n_evals >= max_evals:
            return SimplexResult(pts[0].copy(), float(fvals[0]), n_evals, False)

        centroid = pts[:-1].mean(axis=0)
        xr = centroid + alpha * (centroid - pts[-1])
        fr = fn(xr)
        n_evals += 1
        if fr < fvals[0]:
            xe = centroid + beta * (centroid - pts[-1])
            fe = fn(xe)
            n_evals += 1
            if fe < fr:
                pts[-1], fvals[-1] = xe, fe
            else:
                pts[-1], fvals[-1] = xr, fr
        elif fr < fvals[-2]:
            pts[-1], fvals[-1] = xr, fr
        else:
            if fr < fvals[-1]:
                xc = centroid + gamma * (xr - centroid)
                fc = fn(xc)
                n_evals += 1
                if fc <= fr:
                    pts[-1], fvals[-1] = xc, fc
                else:
                    pts, fvals, n_evals = _shrink(fn, pts, fvals, delta, n_evals)
            else:
                xc = centroid - gamma * (centroid - pts[-1])
                fc = fn(xc)
                n_evals += 1
                if fc < fvals[-1]:
                    pts[-1], fvals[-1] = xc, fc
                else:
                    pts, fvals, n_evals = _shrink(fn, pts, fvals, delta, n_evals)


def _shrink(fn, pts, fvals, delta, n_evals):
    for i in range(1, pts.shape[0]):
        pts[i] = pts[0] + delta * (pts[i] - pts[0])
        fvals[i] = fn(pts[i])
    return pts, fvals, n_evals + pts.shape[0] - 1
