"""Bootstrap scheme tests: draw laws, coupling contracts, CI arithmetic.

Replicate generators are checked against manual regeneration with the same
stream (the documented draw order is part of the contract), and the CI
constructions against hand-computed quantile positions.
"""

import numpy as np
import pytest

import qrclust.bootstrap as bt
from qrclust import ConfigError, SolverError
from qrclust.bootstrap import (
    BootstrapRun,
    UnreliableRunError,
    basic_ci,
    bias_adjust,
    draw_weights,
    gen_cw,
    gen_rc,
    gen_rrr,
    gen_rw,
    run_bootstrap,
    se_adjusted_ci,
)
from qrclust.estimators import TwoStepFit, fit_twostep, random_effect_offset
from qrclust.lqmm import LqmmFit
from qrclust.qr_core import QrFit
from qrclust.rng import Stream

from conftest import make_gaussian_data


class TestDrawWeights:
    def test_two_point_support(self, rng):
        for tau in (0.1, 0.25, 0.5, 0.9):
            w = draw_weights(rng, tau, 500)
            vals = set(np.round(np.unique(w), 12).tolist())
            assert vals <= {round(-2 * tau, 12), round(2 * (1 - tau), 12)}

    def test_rademacher_at_median(self, rng):
        w = draw_weights(rng, 0.5, 200)
        assert set(np.unique(w).tolist()) <= {-1.0, 1.0}

    def test_empirical_law(self, rng):
        tau = 0.1
        w = draw_weights(rng, tau, 200_000)
        p_low = float(np.mean(w < 0))
        assert p_low == pytest.approx(tau, abs=0.005)
        assert float(w.mean()) == pytest.approx(2 - 4 * tau, abs=0.01)
        assert float(np.abs(w).mean()) == pytest.approx(
            2 * (tau**2 + (1 - tau) ** 2), abs=0.01
        )
        assert float(w.var()) == pytest.approx(4 * tau * (1 - tau), abs=0.01)


def zero_residual_fit(data, tau=0.25):
    """Fabricated two-step fit whose residuals and predictions are all zero."""
    beta = np.array([1.5, -0.5])
    n, N = data.n_obs, data.n_clusters
    qr = QrFit(
        beta=beta,
        tau=tau,
        objective=0.0,
        residuals=np.zeros(n),
        n_iter=1,
        gap=0.0,
        converged=True,
    )
    lq = LqmmFit(
        beta=beta,
        sigma=0.5,
        scale_tril=np.array([[0.8]]),
        tau=tau,
        loglik=0.0,
        n_nodes=15,
        n_evals=1,
        converged=True,
        blp_raw=np.zeros((N, 1)),
        blp=np.zeros((N, 1)),
    )
    return TwoStepFit(
        beta=beta,
        tau=tau,
        lqmm=lq,
        blp=np.zeros((N, 1)),
        offset=np.zeros(n),
        qr=qr,
        data=data,
    )


@pytest.fixture(scope="module")
def fitted_small():
    rng = np.random.default_rng(411)
    data, _ = make_gaussian_data(rng, [3] * 15, phi=1.0, sigma_e=0.8)
    return data, fit_twostep(data, 0.25)


class TestGenerators:
    def test_rw_draw_order_contract(self, fitted_small):
        data, fit = fitted_small
        stream = Stream(21).child("boot", 0)
        y_star, u_star = gen_rw(fit, data, stream.generator())
        r2 = stream.generator()  # fresh generator, same state
        idx = r2.integers(0, data.n_clusters, size=data.n_clusters)
        w = draw_weights(r2, fit.tau, data.n_obs)
        want_u = fit.blp[idx]
        want_y = (
            data.X @ fit.beta
            + random_effect_offset(data, want_u)
            + w * np.abs(fit.qr.residuals)
        )
        np.testing.assert_array_equal(u_star, want_u)
        np.testing.assert_array_equal(y_star, want_y)

    def test_rw_sign_pattern(self, fitted_small):
        data, fit = fitted_small
        y_star, u_star = gen_rw(fit, data, Stream(3).generator())
        w_implied = (y_star - data.X @ fit.beta - random_effect_offset(data, u_star))
        # skip the ~p residuals the interior point leaves at its tolerance;
        # dividing by those amplifies solver noise past any sane bound
        nz = np.abs(fit.qr.residuals) > 1e-7
        ratio = w_implied[nz] / np.abs(fit.qr.residuals[nz])
        lo, hi = -2 * fit.tau, 2 * (1 - fit.tau)
        assert np.all(
            (np.abs(ratio - lo) < 1e-10) | (np.abs(ratio - hi) < 1e-10)
        )

    def test_rw_degenerate_fit_reproduces_line(self, tiny_data):
        fit = zero_residual_fit(tiny_data)
        y_star, u_star = gen_rw(fit, tiny_data, Stream(7).generator())
        np.testing.assert_array_equal(y_star, tiny_data.X @ fit.beta)
        np.testing.assert_array_equal(u_star, 0.0)

    def test_rrr_resamples_from_residual_set(self, fitted_small):
        data, fit = fitted_small
        y_star, u_star = gen_rrr(fit, data, Stream(9).generator())
        res_star = y_star - data.X @ fit.beta - random_effect_offset(data, u_star)
        pool = np.sort(fit.qr.residuals)
        pos = np.searchsorted(pool, res_star)
        pos = np.clip(pos, 0, pool.size - 1)
        near = np.minimum(
            np.abs(pool[pos] - res_star),
            np.abs(pool[np.maximum(pos - 1, 0)] - res_star),
        )
        assert np.max(near) < 1e-12

    def test_rrr_zero_blp_gives_zero_effects(self, tiny_data):
        fit = zero_residual_fit(tiny_data)
        _, u_star = gen_rrr(fit, tiny_data, Stream(4).generator())
        np.testing.assert_array_equal(u_star, 0.0)

    def test_rc_blocks_verbatim(self, fitted_small):
        data, _ = fitted_small
        stream = Stream(13)
        rep = gen_rc(data, stream.generator())
        idx = stream.generator().integers(0, data.n_clusters, size=data.n_clusters)
        assert rep.n_clusters == data.n_clusters
        for k, i in enumerate(idx):
            np.testing.assert_array_equal(rep.blocks[k].y, data.blocks[i].y)
            np.testing.assert_array_equal(rep.blocks[k].X, data.blocks[i].X)
            np.testing.assert_array_equal(rep.blocks[k].Z, data.blocks[i].Z)
        assert len(set(rep.ids)) == rep.n_clusters  # fresh unique ids

    def test_cw_shares_weight_within_cluster(self, fitted_small):
        data, fit = fitted_small
        y_star = gen_cw(fit, data, Stream(17).generator())
        r0 = data.y - data.X @ fit.beta
        implied = (y_star - data.X @ fit.beta) / np.abs(r0)
        lo, hi = -2 * fit.tau, 2 * (1 - fit.tau)
        for i in range(data.n_clusters):
            sl = slice(data.starts[i], data.starts[i + 1])
            vals = implied[sl]
            assert np.all(np.abs(vals - vals[0]) < 1e-10)
            assert (abs(vals[0] - lo) < 1e-10) or (abs(vals[0] - hi) < 1e-10)


class TestRunBootstrap:
    def test_shapes_and_reproducibility(self, fitted_small):
        data, fit = fitted_small
        run1 = run_bootstrap(data, fit, "rw", 25, Stream(100))
        run2 = run_bootstrap(data, fit, "rw", 25, Stream(100))
        assert run1.beta_star.shape == (25, 2)
        assert run1.beta_star_oracle.shape == (25, 2)
        assert run1.n_failed == 0
        np.testing.assert_array_equal(run1.beta_star, run2.beta_star)
        np.testing.assert_array_equal(run1.beta_star_oracle, run2.beta_star_oracle)
        run3 = run_bootstrap(data, fit, "rw", 25, Stream(101))
        assert not np.array_equal(run1.beta_star, run3.beta_star)

    def test_replicates_spread_around_estimate(self, fitted_small):
        data, fit = fitted_small
        run = run_bootstrap(data, fit, "rw", 25, Stream(100))
        assert np.all(run.sd_star > 0)
        assert np.all(run.sd_oracle > 0)
        assert np.all(np.abs(run.mean_star - fit.beta) < 1.0)

    @pytest.mark.parametrize("scheme", ["rc", "cw"])
    def test_schemes_without_oracle(self, fitted_small, scheme):
        data, fit = fitted_small
        run = run_bootstrap(data, fit, scheme, 8, Stream(55))
        assert run.beta_star_oracle is None
        with pytest.raises(ConfigError):
            run.sd_oracle

    def test_thread_count_invariant(self, fitted_small):
        data, fit = fitted_small
        serial = run_bootstrap(data, fit, "rrr", 8, Stream(42), threads=1)
        pooled = run_bootstrap(data, fit, "rrr", 8, Stream(42), threads=2)
        np.testing.assert_array_equal(serial.beta_star, pooled.beta_star)
        np.testing.assert_array_equal(serial.beta_star_oracle, pooled.beta_star_oracle)

    def test_unknown_scheme_and_tiny_b(self, fitted_small):
        data, fit = fitted_small
        with pytest.raises(ConfigError):
            run_bootstrap(data, fit, "xyz", 10, Stream(1))
        with pytest.raises(ConfigError):
            run_bootstrap(data, fit, "rw", 1, Stream(1))

    def test_failure_fraction_guard(self, fitted_small, monkeypatch):
        data, fit = fitted_small
        real = bt.fit_twostep
        calls = {"n": 0}

        def flaky(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] % 3 == 0:  # one third of replicates die
                raise SolverError("synthetic failure")
            return real(*args, **kwargs)

        monkeypatch.setattr(bt, "fit_twostep", flaky)
        with pytest.raises(UnreliableRunError) as exc:
            run_bootstrap(data, fit, "rw", 12, Stream(77))
        partial = exc.value.run
        assert partial.n_failed == 4
        assert partial.beta_star.shape == (8, 2)

    def test_occasional_failures_tolerated(self, fitted_small, monkeypatch):
        data, fit = fitted_small
        real = bt.fit_twostep
        calls = {"n": 0}

        def flaky(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] == 2:
                raise SolverError("synthetic failure")
            return real(*args, **kwargs)

        monkeypatch.setattr(bt, "fit_twostep", flaky)
        run = run_bootstrap(data, fit, "rw", 25, Stream(77))
        assert run.n_failed == 1
        assert run.beta_star.shape == (24, 2)


def fabricated_run(beta_star, beta=None, oracle=None, scheme="rw", tau=0.25):
    beta_star = np.asarray(beta_star, dtype=np.float64)
    if beta is None:
        beta = beta_star.mean(axis=0)
    return BootstrapRun(
        scheme=scheme,
        tau=tau,
        B=beta_star.shape[0],
        beta=np.asarray(beta, dtype=np.float64),
        beta_star=beta_star,
        beta_star_oracle=None if oracle is None else np.asarray(oracle, dtype=np.float64),
        n_failed=0,
    )


class TestAdjustAndIntervals:
    def test_bias_adjust_pin(self):
        # 2*(1, 2) - mean((1, 2), (3, 4)) = (2, 4) - (2, 3) = (0, 1)
        run = fabricated_run([[1.0, 2.0], [3.0, 4.0]], beta=[1.0, 2.0])
        np.testing.assert_array_equal(bias_adjust(run), [0.0, 1.0])

    def test_bias_adjust_centered_replicates_fix_nothing(self):
        run = fabricated_run([[0.0], [2.0]], beta=[1.0])  # mean_star == beta
        np.testing.assert_array_equal(bias_adjust(run), [1.0])

    def test_basic_ci_hand_positions(self):
        # replicates 0..20: type-7 quantiles at 0.025/0.975 are 0.5 and 19.5
        grid = np.arange(21.0)[:, None]
        run = fabricated_run(grid, beta=[10.0])
        ci = basic_ci(run, alpha=0.05)
        assert ci.lower[0] == pytest.approx(20.0 - 19.5, abs=1e-12)
        assert ci.upper[0] == pytest.approx(20.0 - 0.5, abs=1e-12)
        assert ci.kind == "basic"

    def test_basic_ci_degenerate_replicates(self):
        run = fabricated_run(np.full((30, 1), 4.0), beta=[5.0])
        ci = basic_ci(run)
        assert ci.lower[0] == ci.upper[0] == pytest.approx(6.0)

    def test_basic_ci_needs_twenty_replicates(self):
        run = fabricated_run(np.arange(19.0)[:, None])
        with pytest.raises(ConfigError):
            basic_ci(run)

    def test_basic_ci_alpha_guard(self):
        run = fabricated_run(np.arange(25.0)[:, None])
        with pytest.raises(ConfigError):
            basic_ci(run, alpha=1.5)

    def test_se_adjusted_equal_spreads_recover_se_obs(self, rng):
        stars = rng.normal(size=(200, 2))
        run = fabricated_run(stars, beta=[0.0, 0.0], oracle=stars)
        se_obs = np.array([0.3, 0.7])
        ci = se_adjusted_ci(run, se_obs)
        center = bias_adjust(run)
        z = 1.959963984540054
        np.testing.assert_allclose(ci.lower, center - z * se_obs, atol=1e-9)
        np.testing.assert_allclose(ci.upper, center + z * se_obs, atol=1e-9)
        assert ci.kind == "se_adjusted"

    def test_se_adjusted_scales_by_spread_ratio(self, rng):
        stars = rng.normal(size=(400, 1))
        run = fabricated_run(stars, beta=[0.0], oracle=0.5 * stars)
        ci = se_adjusted_ci(run, np.array([1.0]))
        half = (ci.upper - ci.lower)[0] / 2
        # sd_star / sd_oracle = 2 exactly by construction
        assert half == pytest.approx(2 * 1.959963984540054, rel=1e-12)

    def test_se_adjusted_needs_oracle(self):
        run = fabricated_run(np.arange(30.0)[:, None], scheme="rc")
        with pytest.raises(ConfigError):
            se_adjusted_ci(run, np.array([1.0]))

    def test_se_adjusted_degenerate_oracle(self):
        stars = np.arange(30.0)[:, None]
        run = fabricated_run(stars, oracle=np.full((30, 1), 2.0))
        with pytest.raises(SolverError):
            se_adjusted_ci(run, np.array([1.0]))
