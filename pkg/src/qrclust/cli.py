"""Command-line front end: model fitting and simulation reproduction.

Two subcommands:

* ``qrclust fit``      — fit an estimator to a CSV dataset at one or more
                         quantile levels, with bootstrap bias adjustment
                         and both confidence-interval constructions for
                         the default estimator.
* ``qrclust simulate`` — run a Monte Carlo scenario from a key-value file
                         and write CSV + text reports.

Exit codes: 0 success, 1 runtime/numerical failure, 2 configuration
error.  Errors print to stderr as a single ``error: ...`` line.  Flags
override config-file keys; the QRCLUST_THREADS environment variable sets
the default worker count.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass

import numpy as np
import scipy.stats

from .bootstrap import SCHEMES, basic_ci, bias_adjust, run_bootstrap, se_adjusted_ci
from .data_model import ColumnSchema, load_csv
from .errors import (
    ConfigError,
    DataError,
    QrclustError,
    UnsupportedModelError,
)
from .estimators import (
    PenaltySpec,
    fit_canay,
    fit_marginal,
    fit_penalized,
    fit_twostep,
    jackknife_adjust,
)
from .lqmm import fit_lqmm
from .qr_core import standard_errors
from .rng import Stream
from .simulation import CI_TYPES, ESTIMATORS, ScenarioSpec, report_render, run_scenario

# fixed default seed for `fit`, so repeated runs on the same data match
DEFAULT_FIT_SEED = 20240501

_FIT_ESTIMATORS = (
    "adj",
    "twostep",
    "lqmm",
    "canay",
    "marginal",
    "l1pen",
    "l2pen",
    "jackknife",
)

_FIT_COLUMNS = (
    "tau",
    "term",
    "estimate",
    "adjusted",
    "se_obs",
    "se_adj",
    "basic_lo",
    "basic_hi",
    "seadj_lo",
    "seadj_hi",
    "B",
    "scheme",
)


def _default_threads() -> int:
    raw = os.environ.get("QRCLUST_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"QRCLUST_THREADS must be an integer, got {raw!r}") from None


def parse_kv_file(path: str) -> dict:
    """Flat key-value config: one `key = value` per line, # comments."""
    mapping = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(
                        f"{path}:{lineno}: expected key=value, got {line!r}"
                    )
                key, value = line.split("=", 1)
                mapping[key.strip()] = value.strip()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return mapping


def _split_list(raw: str) -> list:
    return [tok.strip() for tok in raw.split(",") if tok.strip()]


# ---------------------------------------------------------------------------
# fit


@dataclass
class RunConfig:
    """Resolved `fit` options after merging flags over config-file keys."""

    data: str
    response: str
    cluster: str
    fixed: tuple
    random: tuple
    taus: tuple
    estimator: str
    scheme: str
    B: int
    alpha: float
    seed: int
    threads: int
    contrasts: tuple
    lam: float | None
    n_nodes: int
    out: str | None

    def validate(self):
        if not self.taus:
            raise ConfigError("at least one tau is required")
        for t in self.taus:
            if not 0.0 < t < 1.0:
                raise ConfigError(f"tau must be in (0, 1), got {t}")
        if self.estimator not in _FIT_ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown bootstrap scheme {self.scheme!r}")
        if self.estimator == "adj" and self.B < 2:
            raise ConfigError("bootstrap needs B >= 2")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must be in (0, 1)")


_FIT_KEYS = {
    "data",
    "response",
    "cluster",
    "fixed",
    "random",
    "tau",
    "estimator",
    "scheme",
    "B",
    "alpha",
    "seed",
    "threads",
    "contrast",
    "lam",
    "n_nodes",
    "out",
}


def _build_fit_config(args) -> RunConfig:
    file_opts = parse_kv_file(args.config) if args.config else {}
    for key in file_opts:
        if key not in _FIT_KEYS:
            raise ConfigError(f"unknown config key {key!r}")

    def pick(flag, key, default=None):
        return flag if flag is not None else file_opts.get(key, default)

    data = pick(args.data, "data")
    if data is None:
        raise ConfigError("a data file is required (--data)")
    response = pick(args.response, "response")
    cluster = pick(args.cluster, "cluster")
    if response is None or cluster is None:
        raise ConfigError("--response and --cluster are required")
    fixed_raw = pick(args.fixed, "fixed", "")
    random_raw = pick(args.random, "random", "intercept")
    tau_raw = pick(args.tau, "tau", "0.5")
    contrast_parts = []
    if args.contrast:
        for chunk in args.contrast:
            contrast_parts.extend(_split_list(chunk))
    elif "contrast" in file_opts:
        contrast_parts = _split_list(file_opts["contrast"])
    try:
        taus = tuple(float(t) for t in _split_list(str(tau_raw)))
    except ValueError:
        raise ConfigError(f"invalid tau list {tau_raw!r}") from None
    lam_raw = pick(args.lam, "lam")
    cfg = RunConfig(
        data=str(data),
        response=str(response),
        cluster=str(cluster),
        fixed=tuple(_split_list(str(fixed_raw))),
        random=tuple(_split_list(str(random_raw))),
        taus=taus,
        estimator=str(pick(args.estimator, "estimator", "adj")),
        scheme=str(pick(args.scheme, "scheme", "rw")),
        B=int(pick(args.B, "B", 100)),
        alpha=float(pick(args.alpha, "alpha", 0.05)),
        seed=int(pick(args.seed, "seed", DEFAULT_FIT_SEED)),
        threads=int(pick(args.threads, "threads", _default_threads())),
        contrasts=tuple(contrast_parts),
        lam=float(lam_raw) if lam_raw is not None else None,
        n_nodes=int(pick(args.n_nodes, "n_nodes", 15)),
        out=pick(args.out, "out"),
    )
    cfg.validate()
    return cfg


def _parse_contrast(spec: str, names) -> tuple:
    if spec.count("-") != 1:
        raise ConfigError(f"contrast must be `term-term`, got {spec!r}")
    a, b = (s.strip() for s in spec.split("-"))
    try:
        return names.index(a), names.index(b)
    except ValueError:
        raise ConfigError(
            f"contrast {spec!r} names unknown terms (have: {', '.join(names)})"
        ) from None


def _fmt(v) -> str:
    if v is None:
        return ""
    v = float(v)
    if np.isnan(v):
        return ""
    return f"{v:.6g}"


def _fit_one_tau(cfg: RunConfig, data, tau: float) -> list:
    """Rows (dicts keyed by _FIT_COLUMNS) for one quantile level."""
    names = list(("intercept",) + data.fixed_names)
    pairs = [_parse_contrast(c, names) for c in cfg.contrasts]
    stream = Stream(cfg.seed).child("tau", f"{tau:.6g}")
    p = data.p

    est = np.full(p, np.nan)
    adjusted = np.full(p, np.nan)
    se_obs = np.full(p, np.nan)
    se_adj = np.full(p, np.nan)
    blo = np.full(p, np.nan)
    bhi = np.full(p, np.nan)
    slo = np.full(p, np.nan)
    shi = np.full(p, np.nan)
    cov = None
    run = None
    boot_used = cfg.estimator == "adj"

    if cfg.estimator in ("adj", "twostep"):
        fit = fit_twostep(data, tau, n_nodes=cfg.n_nodes)
        est = fit.beta
        sw = standard_errors(data.y, data.X, tau, offset=fit.offset, alpha=cfg.alpha)
        se_obs, cov = sw.se, sw.cov
        if cfg.estimator == "adj":
            run = run_bootstrap(
                data, fit, cfg.scheme, cfg.B, stream, threads=cfg.threads
            )
            adjusted = bias_adjust(run)
            iv = basic_ci(run, cfg.alpha)
            blo, bhi = iv.lower, iv.upper
            if run.beta_star_oracle is not None:
                iva = se_adjusted_ci(run, se_obs, cfg.alpha)
                slo, shi = iva.lower, iva.upper
                se_adj = run.sd_star * se_obs / run.sd_oracle
    elif cfg.estimator == "lqmm":
        est = fit_lqmm(data, tau, n_nodes=cfg.n_nodes).beta
    elif cfg.estimator == "canay":
        fit = fit_canay(data, tau)
        est = fit.beta
        offset = data.y - fit.residuals - data.X @ fit.beta
        sw = standard_errors(data.y, data.X, tau, offset=offset, alpha=cfg.alpha)
        se_obs, cov = sw.se, sw.cov
    elif cfg.estimator == "marginal":
        fit = fit_marginal(data, tau)
        est = fit.beta
        sw = standard_errors(data.y, data.X, tau, alpha=cfg.alpha)
        se_obs, cov = sw.se, sw.cov
    elif cfg.estimator in ("l1pen", "l2pen"):
        pf = fit_penalized(
            data, tau, PenaltySpec(kind=cfg.estimator[:2], lam=cfg.lam)
        )
        est = pf.beta
    elif cfg.estimator == "jackknife":
        est = jackknife_adjust(data, tau, stream, n_nodes=cfg.n_nodes).beta
    else:  # pragma: no cover - validate() guards this
        raise ConfigError(f"unknown estimator {cfg.estimator!r}")

    rows = []
    tau_s = f"{tau:.6g}"
    scheme_s = cfg.scheme if boot_used else ""
    b_s = str(cfg.B) if boot_used else ""
    for k, term in enumerate(names):
        rows.append(
            {
                "tau": tau_s,
                "term": term,
                "estimate": _fmt(est[k]),
                "adjusted": _fmt(adjusted[k]),
                "se_obs": _fmt(se_obs[k]),
                "se_adj": _fmt(se_adj[k]),
                "basic_lo": _fmt(blo[k]),
                "basic_hi": _fmt(bhi[k]),
                "seadj_lo": _fmt(slo[k]),
                "seadj_hi": _fmt(shi[k]),
                "B": b_s,
                "scheme": scheme_s,
            }
        )
    for (i, j), cname in zip(pairs, cfg.contrasts):
        c_est = est[i] - est[j]
        c_se = np.nan
        if cov is not None:
            c_se = float(np.sqrt(max(cov[i, i] + cov[j, j] - 2.0 * cov[i, j], 0.0)))
        c_adj = c_blo = c_bhi = c_slo = c_shi = c_seadj = np.nan
        if run is not None:
            delta = run.beta_star[:, i] - run.beta_star[:, j]
            d_hat = run.beta[i] - run.beta[j]
            c_adj = 2.0 * d_hat - delta.mean()
            c_blo = 2.0 * d_hat - np.quantile(delta, 1.0 - cfg.alpha / 2.0)
            c_bhi = 2.0 * d_hat - np.quantile(delta, cfg.alpha / 2.0)
            if run.beta_star_oracle is not None and not np.isnan(c_se):
                d_orc = run.beta_star_oracle[:, i] - run.beta_star_oracle[:, j]
                sd_orc = d_orc.std(ddof=1)
                if sd_orc > 0:
                    c_seadj = delta.std(ddof=1) * c_se / sd_orc
                    z = float(scipy.stats.norm.ppf(1.0 - cfg.alpha / 2.0))
                    c_slo = c_adj - z * c_seadj
                    c_shi = c_adj + z * c_seadj
        rows.append(
            {
                "tau": tau_s,
                "term": cname,
                "estimate": _fmt(c_est),
                "adjusted": _fmt(c_adj),
                "se_obs": _fmt(c_se),
                "se_adj": _fmt(c_seadj),
                "basic_lo": _fmt(c_blo),
                "basic_hi": _fmt(c_bhi),
                "seadj_lo": _fmt(c_slo),
                "seadj_hi": _fmt(c_shi),
                "B": b_s,
                "scheme": scheme_s,
            }
        )
    return rows


def cmd_fit(args) -> int:
    cfg = _build_fit_config(args)
    schema = ColumnSchema(
        response=cfg.response,
        cluster_id=cfg.cluster,
        fixed=cfg.fixed,
        random=cfg.random,
    )
    data = load_csv(cfg.data, schema)
    rows = []
    for tau in cfg.taus:
        rows.extend(_fit_one_tau(cfg, data, tau))
    lines = [",".join(_FIT_COLUMNS)]
    lines.extend(",".join(row[c] for c in _FIT_COLUMNS) for row in rows)
    text = "\n".join(lines) + "\n"
    if cfg.out:
        with open(cfg.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"wrote {cfg.out}")
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# simulate

_SIM_EXTRA_KEYS = {"estimators", "ci"}


def cmd_simulate(args) -> int:
    mapping = parse_kv_file(args.scenario)
    estimators_raw = mapping.pop("estimators", None)
    ci_raw = mapping.pop("ci", None)
    if args.estimators is not None:
        estimators_raw = args.estimators
    if args.ci is not None:
        ci_raw = args.ci
    if args.seed is not None:
        mapping["seed"] = str(args.seed)
    if args.reps is not None:
        mapping["reps"] = str(args.reps)
    if "seed" not in mapping:
        raise ConfigError("simulate requires a seed (scenario key or --seed)")
    spec = ScenarioSpec.from_mapping(mapping)
    estimators = (
        tuple(_split_list(estimators_raw))
        if estimators_raw
        else ("lqmm", "twostep", "adj_rw")
    )
    ci_types = tuple(_split_list(ci_raw)) if ci_raw else CI_TYPES
    threads = args.threads if args.threads is not None else _default_threads()
    report = run_scenario(
        spec, estimators, ci_types, threads=threads
    )
    csv_text = report_render(report, "csv")
    table_text = report_render(report, "text")
    prefix = args.out
    csv_path = f"{prefix}.csv"
    txt_path = f"{prefix}.txt"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(csv_text)
    with open(txt_path, "w", encoding="utf-8") as fh:
        fh.write(table_text)
    sys.stdout.write(table_text)
    print(f"wrote {csv_path} and {txt_path} ({report.total_seconds:.1f}s)")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qrclust",
        description="Quantile regression for clustered data with "
        "bootstrap bias adjustment.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit an estimator to a CSV dataset")
    fit.add_argument("--data", help="input CSV path")
    fit.add_argument("--response", help="response column name")
    fit.add_argument("--cluster", help="cluster id column name")
    fit.add_argument("--fixed", help="comma-separated covariate columns")
    fit.add_argument(
        "--random",
        help="comma-separated random-effect design columns (default intercept)",
    )
    fit.add_argument("--tau", help="comma-separated quantile levels (default 0.5)")
    fit.add_argument(
        "--estimator",
        choices=_FIT_ESTIMATORS,
        default=None,
        help="estimator (default adj: bias-adjusted two-step)",
    )
    fit.add_argument("--scheme", choices=SCHEMES, default=None,
                     help="bootstrap scheme (default rw)")
    fit.add_argument("--B", type=int, default=None, help="bootstrap size (default 100)")
    fit.add_argument("--alpha", type=float, default=None,
                     help="CI miss level (default 0.05)")
    fit.add_argument("--seed", type=int, default=None,
                     help=f"RNG seed (default {DEFAULT_FIT_SEED})")
    fit.add_argument("--threads", type=int, default=None,
                     help="worker processes (default $QRCLUST_THREADS or 1)")
    fit.add_argument("--contrast", action="append", default=None,
                     help="term difference `a-b`; repeatable or comma-separated")
    fit.add_argument("--lam", type=float, default=None,
                     help="penalty strength for l1pen/l2pen (default: 5-fold CV)")
    fit.add_argument("--n-nodes", dest="n_nodes", type=int, default=None,
                     help="quadrature nodes for the working model (default 15)")
    fit.add_argument("--config", help="key-value config file; flags override it")
    fit.add_argument("--out", help="output CSV path (default stdout)")
    fit.set_defaults(func=cmd_fit)

    sim = sub.add_parser("simulate", help="run a Monte Carlo scenario file")
    sim.add_argument("--scenario", required=True, help="scenario key-value file")
    sim.add_argument("--seed", type=int, default=None,
                     help="master seed (required here or in the file)")
    sim.add_argument("--reps", type=int, default=None, help="override replication count")
    sim.add_argument("--estimators", default=None,
                     help=f"comma list from: {', '.join(ESTIMATORS)}")
    sim.add_argument("--ci", default=None,
                     help=f"comma list from: {', '.join(CI_TYPES)}")
    sim.add_argument("--threads", type=int, default=None,
                     help="worker processes (default $QRCLUST_THREADS or 1)")
    sim.add_argument("--out", default="simreport",
                     help="output path prefix (default simreport)")
    sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError, UnsupportedModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except QrclustError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
