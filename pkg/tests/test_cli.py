"""CLI tests: option plumbing, output schemas, exit codes, determinism."""

import subprocess
import sys

import numpy as np
import pytest

from qrclust.cli import _FIT_COLUMNS, _default_threads, main, parse_kv_file
from qrclust.errors import ConfigError
from qrclust.simulation import _CSV_COLUMNS


@pytest.fixture(scope="module")
def trial_csv(tmp_path_factory):
    # 12 patients, 4 visits each; treatment arm constant within patient,
    # week varies within
    rng = np.random.default_rng(20240518)
    lines = ["pid,arm,week,lcount"]
    for i in range(12):
        arm = i % 2
        u = rng.normal(scale=0.8)
        for week in range(4):
            y = 2.0 + 0.5 * arm - 0.3 * week + u + rng.normal(scale=0.6)
            lines.append(f"p{i:02d},{arm},{week},{y:.6f}")
    path = tmp_path_factory.mktemp("data") / "trial.csv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path)


def fit_args(trial_csv, *extra):
    return [
        "fit",
        "--data", trial_csv,
        "--response", "lcount",
        "--cluster", "pid",
        "--fixed", "arm,week",
        *extra,
    ]


def run_fit(capsys, trial_csv, *extra):
    rc = main(fit_args(trial_csv, *extra))
    out = capsys.readouterr().out
    assert rc == 0
    lines = out.strip().split("\n")
    assert lines[0] == ",".join(_FIT_COLUMNS)
    return [dict(zip(_FIT_COLUMNS, ln.split(","))) for ln in lines[1:]]


class TestParseKvFile:
    def test_comments_and_blanks(self, tmp_path):
        p = tmp_path / "c.conf"
        p.write_text("# header\n\ntau = 0.25  # inline\nB=40\n", encoding="utf-8")
        assert parse_kv_file(str(p)) == {"tau": "0.25", "B": "40"}

    def test_bad_line_reports_position(self, tmp_path):
        p = tmp_path / "c.conf"
        p.write_text("tau = 0.5\nnonsense\n", encoding="utf-8")
        with pytest.raises(ConfigError, match=":2"):
            parse_kv_file(str(p))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            parse_kv_file(str(tmp_path / "absent.conf"))


class TestFit:
    def test_plain_estimator_schema(self, capsys, trial_csv):
        rows = run_fit(capsys, trial_csv, "--estimator", "marginal", "--tau", "0.5")
        assert [r["term"] for r in rows] == ["intercept", "arm", "week"]
        for r in rows:
            assert r["tau"] == "0.5"
            float(r["estimate"])
            float(r["se_obs"])
            # no bootstrap ran: adjustment and interval fields stay empty
            assert r["adjusted"] == "" and r["basic_lo"] == ""
            assert r["B"] == "" and r["scheme"] == ""
        assert float(rows[2]["estimate"]) < 0  # week trend is negative

    def test_two_tau_blocks(self, capsys, trial_csv):
        rows = run_fit(
            capsys, trial_csv, "--estimator", "marginal", "--tau", "0.25,0.75"
        )
        assert [r["tau"] for r in rows] == ["0.25"] * 3 + ["0.75"] * 3

    def test_contrast_rows(self, capsys, trial_csv):
        rows = run_fit(
            capsys,
            trial_csv,
            "--estimator", "marginal",
            "--tau", "0.5",
            "--contrast", "arm-week",
            "--contrast", "arm-intercept,week-intercept",
        )
        assert [r["term"] for r in rows] == [
            "intercept", "arm", "week",
            "arm-week", "arm-intercept", "week-intercept",
        ]
        by = {r["term"]: r for r in rows}
        want = float(by["arm"]["estimate"]) - float(by["week"]["estimate"])
        assert float(by["arm-week"]["estimate"]) == pytest.approx(want, abs=1e-4)
        assert float(by["arm-week"]["se_obs"]) > 0

    def test_adjusted_estimator_fills_everything(self, capsys, trial_csv):
        rows = run_fit(
            capsys,
            trial_csv,
            "--tau", "0.25",
            "--B", "24",
            "--seed", "7",
            "--contrast", "arm-week",
        )
        assert len(rows) == 4
        for r in rows:
            assert r["B"] == "24" and r["scheme"] == "rw"
            assert float(r["basic_lo"]) < float(r["basic_hi"])
            assert float(r["seadj_lo"]) < float(r["seadj_hi"])
            float(r["adjusted"]), float(r["se_adj"])

    def test_cluster_scheme_has_no_se_adjustment(self, capsys, trial_csv):
        rows = run_fit(
            capsys, trial_csv,
            "--tau", "0.25", "--B", "24", "--seed", "7", "--scheme", "rc",
        )
        for r in rows:
            assert r["scheme"] == "rc"
            assert float(r["basic_lo"]) < float(r["basic_hi"])
            assert r["seadj_lo"] == "" and r["se_adj"] == ""

    def test_fit_deterministic(self, capsys, trial_csv):
        args = fit_args(trial_csv, "--tau", "0.25", "--B", "20", "--seed", "3")
        assert main(args) == 0
        first = capsys.readouterr().out
        assert main(args) == 0
        assert capsys.readouterr().out == first

    def test_penalized_with_fixed_strength(self, capsys, trial_csv):
        rows = run_fit(
            capsys, trial_csv, "--estimator", "l2pen", "--lam", "0.5",
            "--tau", "0.5",
        )
        for r in rows:
            float(r["estimate"])
            assert r["se_obs"] == ""

    def test_out_file(self, capsys, trial_csv, tmp_path):
        target = tmp_path / "fit.csv"
        rc = main(
            fit_args(trial_csv, "--estimator", "marginal", "--out", str(target))
        )
        assert rc == 0
        assert "wrote" in capsys.readouterr().out
        assert target.read_text(encoding="utf-8").startswith(",".join(_FIT_COLUMNS))

    def test_config_file_with_flag_override(self, capsys, trial_csv, tmp_path):
        conf = tmp_path / "fit.conf"
        conf.write_text(
            f"data = {trial_csv}\nresponse = lcount\ncluster = pid\n"
            "fixed = arm,week\nestimator = marginal\ntau = 0.5\n",
            encoding="utf-8",
        )
        rc = main(["fit", "--config", str(conf), "--tau", "0.25"])
        out = capsys.readouterr().out
        assert rc == 0
        rows = [ln.split(",") for ln in out.strip().split("\n")[1:]]
        assert all(r[0] == "0.25" for r in rows)  # flag beat the file
        assert all(r[3] == "" for r in rows)  # estimator came from the file

    @pytest.mark.parametrize(
        "extra,needle",
        [
            (("--response", "absent"), "absent"),
            (("--tau", "1.5"), "tau"),
            (("--tau", "0.5,zebra"), "tau"),
            (("--contrast", "arm+week"), "contrast"),
            (("--contrast", "arm-dose"), "dose"),
            (("--B", "1"), "B >= 2"),
            (("--alpha", "1.5"), "alpha"),
        ],
    )
    def test_config_errors_exit_2(self, capsys, trial_csv, extra, needle):
        rc = main(fit_args(trial_csv, *extra))
        err = capsys.readouterr().err
        assert rc == 2
        assert err.startswith("error:")
        assert needle in err

    def test_unknown_config_key_named(self, capsys, trial_csv, tmp_path):
        conf = tmp_path / "bad.conf"
        conf.write_text("frobnicate = 1\n", encoding="utf-8")
        rc = main(fit_args(trial_csv, "--config", str(conf)))
        err = capsys.readouterr().err
        assert rc == 2 and "frobnicate" in err

    def test_missing_data_flag(self, capsys):
        rc = main(["fit", "--response", "y", "--cluster", "g"])
        assert rc == 2
        assert "--data" in capsys.readouterr().err


def write_scenario(tmp_path, name="scn.conf", **over):
    base = {
        "n_clusters": 15,
        "cluster_size": 4,
        "tau": 0.25,
        "seed": 31,
        "reps": 3,
    }
    base.update(over)
    p = tmp_path / name
    p.write_text(
        "# toy scenario\n" + "".join(f"{k} = {v}\n" for k, v in base.items()),
        encoding="utf-8",
    )
    return str(p)


class TestSimulate:
    def test_writes_reports(self, capsys, tmp_path):
        scn = write_scenario(tmp_path, estimators="lqmm")
        prefix = str(tmp_path / "rep")
        rc = main(
            ["simulate", "--scenario", scn, "--estimators", "marginal,canay",
             "--out", prefix]
        )
        out = capsys.readouterr().out
        assert rc == 0
        assert "wrote" in out
        csv_text = (tmp_path / "rep.csv").read_text(encoding="utf-8")
        lines = csv_text.strip().split("\n")
        assert lines[0] == ",".join(_CSV_COLUMNS)
        # the flag overrode the file's estimator list
        assert {ln.split(",")[0] for ln in lines[1:]} == {"marginal", "canay"}
        assert (tmp_path / "rep.txt").read_text(encoding="utf-8") in out

    def test_reps_flag_overrides_file(self, capsys, tmp_path):
        scn = write_scenario(tmp_path, reps=5)
        prefix = str(tmp_path / "rep2")
        rc = main(
            ["simulate", "--scenario", scn, "--estimators", "marginal",
             "--reps", "2", "--out", prefix]
        )
        capsys.readouterr()
        assert rc == 0
        lines = (tmp_path / "rep2.csv").read_text(encoding="utf-8").strip().split("\n")
        used = lines[0].split(",").index("reps_used")
        assert all(ln.split(",")[used] == "2" for ln in lines[1:])

    def test_thread_count_invariant_bytes(self, capsys, tmp_path):
        scn = write_scenario(tmp_path)
        outs = []
        for threads, name in ((1, "a"), (2, "b")):
            rc = main(
                ["simulate", "--scenario", scn, "--estimators", "marginal",
                 "--threads", str(threads), "--out", str(tmp_path / name)]
            )
            capsys.readouterr()
            assert rc == 0
            outs.append((tmp_path / f"{name}.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_missing_seed(self, capsys, tmp_path):
        p = tmp_path / "noseed.conf"
        p.write_text("n_clusters = 5\ncluster_size = 3\ntau = 0.5\n", encoding="utf-8")
        rc = main(["simulate", "--scenario", str(p), "--out", str(tmp_path / "x")])
        err = capsys.readouterr().err
        assert rc == 2 and "seed" in err

    def test_unknown_scenario_key_named(self, capsys, tmp_path):
        scn = write_scenario(tmp_path, gremlin=3)
        rc = main(["simulate", "--scenario", scn, "--out", str(tmp_path / "x")])
        err = capsys.readouterr().err
        assert rc == 2 and "gremlin" in err

    def test_unknown_estimator_exit_2(self, capsys, tmp_path):
        scn = write_scenario(tmp_path)
        rc = main(
            ["simulate", "--scenario", scn, "--estimators", "psychic",
             "--out", str(tmp_path / "x")]
        )
        err = capsys.readouterr().err
        assert rc == 2 and "psychic" in err


class TestEntryPoint:
    def test_module_invocation(self, trial_csv, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "qrclust.cli", "fit",
             "--data", trial_csv, "--response", "lcount", "--cluster", "pid",
             "--fixed", "arm,week", "--estimator", "marginal"],
            capture_output=True,
            text=True,
            cwd=str(tmp_path),
        )
        assert proc.returncode == 0, proc.stderr
        assert proc.stdout.startswith(",".join(_FIT_COLUMNS))

    def test_threads_env_default(self, monkeypatch):
        monkeypatch.setenv("QRCLUST_THREADS", "3")
        assert _default_threads() == 3
        monkeypatch.setenv("QRCLUST_THREADS", "zebra")
        with pytest.raises(ConfigError):
            _default_threads()
