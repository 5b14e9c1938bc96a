"""Monte Carlo harness for the clustered-quantile estimator suite.

A ScenarioSpec describes one data-generating process

    Y_ij = b0 + b1 x_ij + u_i + (1 + gamma x_ij) sigma_e e_ij

(optionally with a random slope v_i on x), the quantile level under
study, and the Monte Carlo budget.  ``run_scenario`` generates ``reps``
datasets from per-replication streams, runs the requested estimators on
each, and aggregates bias / SD / RMSE plus bootstrap-CI coverage and
length, with Monte Carlo standard errors for everything.

Replication r always consumes the stream keyed by r, so reports are
byte-identical for any worker count.
"""

from __future__ import annotations

import concurrent.futures
import math
import time
from dataclasses import dataclass, fields

import numpy as np
import scipy.stats

from .bootstrap import SCHEMES, basic_ci, bias_adjust, run_bootstrap, se_adjusted_ci
from .data_model import ClusterBlock, ClusteredDataset
from .errors import ConfigError, QrclustError, UnsupportedModelError
from .estimators import (
    PenaltySpec,
    fit_canay,
    fit_marginal,
    fit_oracle,
    fit_penalized,
    fit_twostep,
    jackknife_adjust,
)
from .rng import Stream

__all__ = [
    "ScenarioSpec",
    "SimReport",
    "EstimatorSummary",
    "ESTIMATORS",
    "CI_TYPES",
    "true_params",
    "gen_dataset",
    "marginal_quantile",
    "run_scenario",
    "report_render",
]

ERROR_DISTS = ("gaussian", "t3_scaled", "ald")

ESTIMATORS = (
    "oracle",
    "marginal",
    "canay",
    "lqmm",
    "twostep",
    "jackknife",
    "l1pen",
    "l2pen",
    "adj_rw",
    "adj_rrr",
    "adj_rc",
    "adj_cw",
)

CI_TYPES = ("basic", "se_adjusted")

_ADJ_SCHEME = {f"adj_{s}": s for s in SCHEMES}


def _unit_ald_sigma(tau0: float) -> float:
    # scale that gives the asymmetric-Laplace law unit variance
    return tau0 * (1.0 - tau0) / math.sqrt(1.0 - 2.0 * tau0 + 2.0 * tau0 * tau0)


@dataclass(frozen=True)
class ScenarioSpec:
    """One simulation scenario: DGP parameters plus the Monte Carlo budget."""

    n_clusters: int
    cluster_size: int
    tau: float
    seed: int
    beta0: float = 1.0
    beta1: float = 1.0
    gamma: float = 0.0
    sigma_u2: float = 1.0
    sigma_e2: float = 1.0
    error_dist: str = "gaussian"
    ald_tau0: float = 0.1
    ald_sigma0: float | None = None
    sigma_v2: float | None = None
    reps: int = 200
    B: int = 100
    alpha: float = 0.05
    n_nodes: int = 15

    def __post_init__(self):
        if self.n_clusters < 2:
            raise ConfigError("need at least two clusters")
        if self.cluster_size < 1:
            raise ConfigError("cluster_size must be positive")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("tau must be in (0, 1)")
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative")
        if self.sigma_u2 <= 0 or self.sigma_e2 <= 0:
            raise ConfigError("variances must be positive")
        if self.error_dist not in ERROR_DISTS:
            raise ConfigError(f"unknown error_dist {self.error_dist!r}")
        if not 0.0 < self.ald_tau0 < 1.0:
            raise ConfigError("ald_tau0 must be in (0, 1)")
        if self.ald_sigma0 is not None and self.ald_sigma0 <= 0:
            raise ConfigError("ald_sigma0 must be positive")
        if self.sigma_v2 is not None and self.sigma_v2 <= 0:
            raise ConfigError("sigma_v2 must be positive")
        if self.reps < 1:
            raise ConfigError("reps must be positive")
        if self.B < 2:
            raise ConfigError("B must be at least 2")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must be in (0, 1)")

    @property
    def random_slope(self) -> bool:
        return self.sigma_v2 is not None

    @classmethod
    def from_mapping(cls, mapping) -> "ScenarioSpec":
        """Build a spec from string key-value pairs (config-file surface)."""
        casts = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in casts:
                raise ConfigError(f"unknown scenario key {key!r}")
            if key == "error_dist":
                kwargs[key] = str(raw)
            elif key in ("n_clusters", "cluster_size", "seed", "reps", "B", "n_nodes"):
                kwargs[key] = int(raw)
            else:
                kwargs[key] = float(raw)
        missing = {"n_clusters", "cluster_size", "tau", "seed"} - kwargs.keys()
        if missing:
            raise ConfigError(f"scenario is missing keys: {sorted(missing)}")
        return cls(**kwargs)


def _std_error_quantile(spec: ScenarioSpec, p):
    """Quantile function of the standardized (unit-variance) error law."""
    p = np.asarray(p, dtype=np.float64)
    if spec.error_dist == "gaussian":
        return scipy.stats.norm.ppf(p)
    if spec.error_dist == "t3_scaled":
        return scipy.stats.t.ppf(p, 3) / math.sqrt(3.0)
    tau0 = spec.ald_tau0
    sigma0 = spec.ald_sigma0 if spec.ald_sigma0 is not None else _unit_ald_sigma(tau0)
    lower = (sigma0 / (1.0 - tau0)) * np.log(p / tau0)
    upper = -(sigma0 / tau0) * np.log((1.0 - p) / (1.0 - tau0))
    return np.where(p <= tau0, lower, upper)


def true_params(spec: ScenarioSpec) -> tuple[float, float]:
    """Quantile-specific coefficients (b0 + se F^-1(tau), b1 + gamma se F^-1(tau))."""
    finv = float(_std_error_quantile(spec, spec.tau))
    se = math.sqrt(spec.sigma_e2)
    return spec.beta0 + se * finv, spec.beta1 + spec.gamma * se * finv


def marginal_quantile(spec: ScenarioSpec, x: float, tau: float) -> float:
    """Population tau-quantile of Y given x, clusters integrated out.

    Closed form exists for the Gaussian model only: the cluster effect and
    scaled error recombine into one normal with x-dependent variance.
    """
    if spec.error_dist != "gaussian" or spec.random_slope:
        raise UnsupportedModelError(
            "marginal quantiles are closed-form only for the Gaussian "
            "random-intercept model"
        )
    sd = math.sqrt(spec.sigma_u2 + (1.0 + spec.gamma * x) ** 2 * spec.sigma_e2)
    return spec.beta0 + spec.beta1 * x + float(scipy.stats.norm.ppf(tau)) * sd


def _draw_errors(spec: ScenarioSpec, rng, shape):
    if spec.error_dist == "gaussian":
        return rng.standard_normal(shape)
    if spec.error_dist == "t3_scaled":
        return rng.standard_t(3, shape) / math.sqrt(3.0)
    return _std_error_quantile(spec, rng.random(shape))


def gen_dataset(spec: ScenarioSpec, rng) -> tuple[ClusteredDataset, np.ndarray]:
    """Simulate one dataset; returns (data, true effects as an N x q matrix).

    Draw order is fixed (x, u, v when present, e) so a given stream always
    yields the same dataset.
    """
    N, n = spec.n_clusters, spec.cluster_size
    x = rng.random((N, n))
    u = rng.normal(0.0, math.sqrt(spec.sigma_u2), N)
    if spec.random_slope:
        v = rng.normal(0.0, math.sqrt(spec.sigma_v2), N)
    e = _draw_errors(spec, rng, (N, n)) * math.sqrt(spec.sigma_e2)
    blocks = []
    for i in range(N):
        mean = spec.beta0 + spec.beta1 * x[i] + u[i]
        if spec.random_slope:
            mean = mean + v[i] * x[i]
        y = mean + (1.0 + spec.gamma * x[i]) * e[i]
        X = np.column_stack([np.ones(n), x[i]])
        Z = X if spec.random_slope else np.ones((n, 1))
        blocks.append(ClusterBlock(f"c{i}", y, X, Z))
    random_names = ("intercept", "x") if spec.random_slope else ("intercept",)
    data = ClusteredDataset(
        blocks,
        response_name="y",
        cluster_name="cluster",
        fixed_names=("x",),
        random_names=random_names,
    )
    u_true = np.column_stack([u, v]) if spec.random_slope else u[:, None]
    return data, u_true


# ---------------------------------------------------------------------------
# per-replication execution


class _RepContext:
    """Lazy per-replication cache so estimators share expensive fits."""

    def __init__(self, spec: ScenarioSpec, stream: Stream):
        self.spec = spec
        self.stream = stream
        self.data, self.u_true = gen_dataset(spec, stream.child("data").generator())
        self._twostep = None
        self._boot: dict = {}

    @property
    def twostep(self):
        if self._twostep is None:
            self._twostep = fit_twostep(
                self.data, self.spec.tau, n_nodes=self.spec.n_nodes
            )
        return self._twostep

    def boot(self, scheme: str):
        if scheme not in self._boot:
            self._boot[scheme] = run_bootstrap(
                self.data,
                self.twostep,
                scheme,
                self.spec.B,
                self.stream.child("scheme", scheme),
            )
        return self._boot[scheme]


def _estimate_one(name: str, ctx: _RepContext, ci_types):
    """Returns (point (p,), {ci_kind: (p, 2) bounds})."""
    spec = ctx.spec
    tau = spec.tau
    if name == "oracle":
        return fit_oracle(ctx.data, ctx.u_true, tau).beta, {}
    if name == "marginal":
        return fit_marginal(ctx.data, tau).beta, {}
    if name == "canay":
        return fit_canay(ctx.data, tau).beta, {}
    if name == "lqmm":
        return ctx.twostep.lqmm.beta, {}
    if name == "twostep":
        return ctx.twostep.beta, {}
    if name == "jackknife":
        return (
            jackknife_adjust(ctx.data, tau, ctx.stream.child("jackknife")).beta,
            {},
        )
    if name in ("l1pen", "l2pen"):
        pf = fit_penalized(ctx.data, tau, PenaltySpec(kind=name[:2]))
        return pf.beta, {}
    scheme = _ADJ_SCHEME.get(name)
    if scheme is None:
        raise ConfigError(f"unknown estimator {name!r}")
    run = ctx.boot(scheme)
    point = bias_adjust(run)
    cis = {}
    for kind in ci_types:
        if kind == "basic":
            iv = basic_ci(run, spec.alpha)
        elif kind == "se_adjusted":
            if run.beta_star_oracle is None:
                continue  # scheme carries no oracle replicates
            iv = se_adjusted_ci(run, ctx.twostep.se_obs, spec.alpha)
        else:
            raise ConfigError(f"unknown CI type {kind!r}")
        cis[kind] = np.column_stack([iv.lower, iv.upper])
    return point, cis


def _run_rep(spec, estimators, ci_types, root: Stream, r: int):
    ctx = _RepContext(spec, root.child("rep", r))
    out = {}
    for name in estimators:
        t0 = time.perf_counter()
        try:
            point, cis = _estimate_one(name, ctx, ci_types)
            out[name] = (np.asarray(point, dtype=np.float64), cis, None)
        except QrclustError as exc:
            out[name] = (None, None, f"{type(exc).__name__}: {exc}")
        out[name] += (time.perf_counter() - t0,)
    return out


_POOL_STATE: dict = {}


def _init_pool(payload):
    _POOL_STATE["payload"] = payload


def _pool_rep(r):
    spec, estimators, ci_types, root = _POOL_STATE["payload"]
    return _run_rep(spec, estimators, ci_types, root, r)


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class CiSummary:
    coverage: np.ndarray
    coverage_mcse: np.ndarray
    avg_length: np.ndarray
    raw: np.ndarray  # (reps, p, 2) with NaN for failed replications


@dataclass
class EstimatorSummary:
    name: str
    reps_used: int
    estimates: np.ndarray  # (reps, p) with NaN rows for failures
    bias: np.ndarray
    sd: np.ndarray
    rmse: np.ndarray
    bias_mcse: np.ndarray
    ci: dict
    seconds: float
    failures: tuple


@dataclass
class SimReport:
    spec: ScenarioSpec
    truth: np.ndarray
    components: tuple
    summaries: tuple
    total_seconds: float

    @property
    def reps(self) -> int:
        return self.spec.reps

    def summary(self, name: str) -> EstimatorSummary:
        for s in self.summaries:
            if s.name == name:
                return s
        raise KeyError(name)


def _summarize(name, spec, truth, points, cis_raw, seconds, failures):
    reps = spec.reps
    ok = ~np.isnan(points).any(axis=1)
    used = int(ok.sum())
    if used == 0:
        nan = np.full(truth.shape, np.nan)
        return EstimatorSummary(
            name, 0, points, nan, nan, nan, nan, {}, seconds, tuple(failures)
        )
    pts = points[ok]
    bias = pts.mean(axis=0) - truth
    sd = pts.std(axis=0, ddof=1) if used > 1 else np.full(truth.shape, np.nan)
    rmse = np.sqrt(((pts - truth) ** 2).mean(axis=0))
    bias_mcse = sd / math.sqrt(used)
    ci = {}
    for kind, raw in cis_raw.items():
        lo, hi = raw[ok, :, 0], raw[ok, :, 1]
        hits = (lo <= truth) & (truth <= hi)
        cov = hits.mean(axis=0)
        ci[kind] = CiSummary(
            coverage=cov,
            coverage_mcse=np.sqrt(cov * (1.0 - cov) / used),
            avg_length=(hi - lo).mean(axis=0),
            raw=raw,
        )
    return EstimatorSummary(
        name, used, points, bias, sd, rmse, bias_mcse, ci, seconds, tuple(failures)
    )


def run_scenario(
    spec: ScenarioSpec,
    estimators=("twostep",),
    ci_types=CI_TYPES,
    *,
    stream: Stream | None = None,
    threads: int = 1,
) -> SimReport:
    """Run the Monte Carlo study for one scenario.

    Failed replications are excluded per estimator and recorded on the
    summary; aggregation runs in replication-index order regardless of
    ``threads``.
    """
    estimators = tuple(estimators)
    for name in estimators:
        if name not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {name!r}")
    ci_types = tuple(ci_types)
    for kind in ci_types:
        if kind not in CI_TYPES:
            raise ConfigError(f"unknown CI type {kind!r}")
    root = Stream(spec.seed) if stream is None else stream
    t_start = time.perf_counter()

    rep_results: list = [None] * spec.reps
    if threads > 1:
        payload = (spec, estimators, ci_types, root)
        with concurrent.futures.ProcessPoolExecutor(
            max_workers=min(threads, spec.reps),
            initializer=_init_pool,
            initargs=(payload,),
        ) as pool:
            for r, res in zip(
                range(spec.reps), pool.map(_pool_rep, range(spec.reps), chunksize=1)
            ):
                rep_results[r] = res
    else:
        for r in range(spec.reps):
            rep_results[r] = _run_rep(spec, estimators, ci_types, root, r)

    truth = np.array(true_params(spec))
    p = truth.shape[0]
    summaries = []
    for name in estimators:
        points = np.full((spec.reps, p), np.nan)
        cis_raw = {}
        seconds = 0.0
        failures = []
        for r in range(spec.reps):
            point, cis, err, dt = rep_results[r][name]
            seconds += dt
            if err is not None:
                failures.append((r, err))
                continue
            points[r] = point
            for kind, bounds in cis.items():
                if kind not in cis_raw:
                    cis_raw[kind] = np.full((spec.reps, p, 2), np.nan)
                cis_raw[kind][r] = bounds
        summaries.append(
            _summarize(name, spec, truth, points, cis_raw, seconds, failures)
        )
    return SimReport(
        spec=spec,
        truth=truth,
        components=("intercept", "x"),
        summaries=tuple(summaries),
        total_seconds=time.perf_counter() - t_start,
    )


# ---------------------------------------------------------------------------
# rendering


def _fmt(v) -> str:
    if v is None:
        return ""
    v = float(v)
    if math.isnan(v):
        return ""
    return f"{v:.4g}"


_CSV_COLUMNS = (
    "estimator",
    "component",
    "truth",
    "bias",
    "sd",
    "rmse",
    "bias_mcse",
    "reps_used",
    "coverage_basic",
    "coverage_basic_mcse",
    "length_basic",
    "coverage_se_adjusted",
    "coverage_se_adjusted_mcse",
    "length_se_adjusted",
)


def _report_rows(report: SimReport):
    for s in report.summaries:
        for k, comp in enumerate(report.components):
            row = {
                "estimator": s.name,
                "component": comp,
                "truth": _fmt(report.truth[k]),
                "bias": _fmt(s.bias[k]) if s.reps_used else "",
                "sd": _fmt(s.sd[k]) if s.reps_used else "",
                "rmse": _fmt(s.rmse[k]) if s.reps_used else "",
                "bias_mcse": _fmt(s.bias_mcse[k]) if s.reps_used else "",
                "reps_used": str(s.reps_used),
            }
            for kind in CI_TYPES:
                cs = s.ci.get(kind)
                row[f"coverage_{kind}"] = _fmt(cs.coverage[k]) if cs else ""
                row[f"coverage_{kind}_mcse"] = _fmt(cs.coverage_mcse[k]) if cs else ""
                row[f"length_{kind}"] = _fmt(cs.avg_length[k]) if cs else ""
            yield row


def report_render(report: SimReport, format: str = "csv") -> str:
    """Render a report as CSV or an aligned text table.

    Both forms are deterministic for a fixed report (no timings included),
    with four significant digits throughout.
    """
    rows = list(_report_rows(report))
    if format == "csv":
        lines = [",".join(_CSV_COLUMNS)]
        for row in rows:
            lines.append(",".join(row[c] for c in _CSV_COLUMNS))
        return "\n".join(lines) + "\n"
    if format != "text":
        raise ConfigError(f"unknown report format {format!r}")
    spec = report.spec
    head = (
        f"scenario: N={spec.n_clusters} n_i={spec.cluster_size} tau={spec.tau} "
        f"gamma={spec.gamma} error={spec.error_dist} reps={spec.reps} "
        f"B={spec.B} seed={spec.seed}"
    )
    truth_line = "truth: " + "  ".join(
        f"{c}={_fmt(t)}" for c, t in zip(report.components, report.truth)
    )
    if not rows:
        return head + "\n" + truth_line + "\n"
    widths = {c: max(len(c), max(len(r[c]) for r in rows)) for c in _CSV_COLUMNS}
    header = "  ".join(c.ljust(widths[c]) for c in _CSV_COLUMNS)
    body = [
        "  ".join(r[c].rjust(widths[c]) if i > 1 else r[c].ljust(widths[c])
                  for i, c in enumerate(_CSV_COLUMNS))
        for r in rows
    ]
    return "\n".join([head, truth_line, "", header] + body) + "\n"
