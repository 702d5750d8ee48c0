import csv
import json

import numpy as np
import pytest

from iasreg import cli


def write_cfg(path, cfg):
    path.write_text(json.dumps(cfg))
    return path


NUMDIFF_CFG = {
    "problem": {"generator": "numdiff", "params": {"n": 30, "sigma_rel": 0.01, "seed": 1}},
    "prior": {"L": "diff2", "partition": "trivial", "eta": 1e-4},
    "solver": {"kind": "ias"},
}


def strip_timings(summary):
    summary = dict(summary)
    summary.pop("timings", None)
    return summary


class TestSolve:
    def test_ias_run_writes_outputs(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.json", NUMDIFF_CFG)
        assert cli.main(["solve", str(cfg), "--out", str(tmp_path / "o")]) == 0
        s = json.loads((tmp_path / "o" / "summary.json").read_text())
        assert s["schema_version"] == 1 and s["converged"]
        assert len(np.loadtxt(tmp_path / "o" / "solution.csv", delimiter=",")) == 30

    def test_seed_repeat_is_identical(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.json", NUMDIFF_CFG)
        for d in ("a", "b"):
            assert cli.main(["solve", str(cfg), "--out", str(tmp_path / d)]) == 0
        sa, sb = (json.loads((tmp_path / d / "summary.json").read_text()) for d in ("a", "b"))
        assert strip_timings(sa) == strip_timings(sb)
        assert (tmp_path / "a" / "solution.csv").read_bytes() == (tmp_path / "b" / "solution.csv").read_bytes()

    @pytest.mark.parametrize("kind", ["hybrid", "tikhonov-morozov"])
    def test_other_solvers(self, tmp_path, kind):
        cfg = json.loads(json.dumps(NUMDIFF_CFG))
        cfg["solver"] = {"kind": kind}
        if kind == "hybrid":
            cfg["prior"] = {"L": "identity", "eta": 1e-3}
        rc = cli.main(["solve", str(write_cfg(tmp_path / "c.json", cfg)), "--out", str(tmp_path / "o")])
        assert rc in (0, 2)
        assert (tmp_path / "o" / "summary.json").exists()
        if kind == "tikhonov-morozov":
            assert (tmp_path / "o" / "morozov_trace.csv").exists()

    @pytest.mark.parametrize("mutate", [
        lambda c: c["prior"].update(colour="red"),
        lambda c: c.update(extra=1),
        lambda c: c["solver"].update(kind="admm"),
        lambda c: c["solver"].update(delta=2.0),
        lambda c: c["prior"].update(beta=2.0),
        lambda c: c["problem"].update(generator="heat"),
        lambda c: c["problem"]["params"].update(m=3),
        lambda c: c.pop("solver"),
    ])
    def test_malformed_config_exits_1_without_output(self, tmp_path, mutate):
        cfg = json.loads(json.dumps(NUMDIFF_CFG))
        mutate(cfg)
        out = tmp_path / "o"
        assert cli.main(["solve", str(write_cfg(tmp_path / "c.json", cfg)), "--out", str(out)]) == 1
        assert not out.exists()

    def test_unreadable_config(self, tmp_path):
        (tmp_path / "c.json").write_text("{not json")
        assert cli.main(["solve", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 1

    def test_bundle_problem(self, tmp_path):
        assert cli.main(["gen", "numdiff", "--n", "20", "--out", str(tmp_path / "bundle")]) == 0
        cfg = {"problem": {"bundle": "bundle"}, "prior": {"L": "diff2", "partition": "trivial"},
               "solver": {"kind": "ias"}}
        rc = cli.main(["solve", str(write_cfg(tmp_path / "c.json", cfg)), "--out", str(tmp_path / "o")])
        assert rc == 0

    def test_env_output_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.ENV_OUTPUT, str(tmp_path / "root"))
        cfg = write_cfg(tmp_path / "c.json", NUMDIFF_CFG)
        assert cli.main(["solve", str(cfg)]) == 0
        assert (tmp_path / "root" / "solve" / "summary.json").exists()


class TestExperiments:
    def test_numdiff_csv(self, tmp_path):
        assert cli.main(["experiment-numdiff", "--out", str(tmp_path), "--levels", "6"]) in (0, 2)
        with open(tmp_path / "numdiff.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 6 and list(rows[0]) == cli.NUMDIFF_COLUMNS
        assert all(r["error"] == "" for r in rows)
        assert len(list((tmp_path / "morozov_traces").iterdir())) == 6

    def test_tomo_outputs(self, tmp_path):
        rc = cli.main(["experiment-tomo", "--out", str(tmp_path), "--grid", "16", "16", "--rays", "30",
                       "--views", "6"])
        assert rc in (0, 2)
        report = json.loads((tmp_path / "summary.json").read_text())
        n_it = report["implicit"]["outer_iterations"]
        for i in range(1, n_it + 1):
            assert (tmp_path / "snapshots" / f"iter_{i:02d}_x.csv").exists()
        img = np.loadtxt(tmp_path / "snapshots" / "iter_01_x.csv", delimiter=",")
        assert img.shape == (16, 16)
        with open(tmp_path / "iterations.csv") as fh:
            rows = list(csv.DictReader(fh))
        obj = np.array([float(r["objective"]) for r in rows])
        assert np.all(np.diff(obj) <= 1e-8 * (1 + np.abs(obj[:-1])))
        assert report["qr_vs_implicit_relative_difference"] < 1e-6

    def test_tomo_qr_cap_notice(self, tmp_path, capsys):
        cli.main(["experiment-tomo", "--out", str(tmp_path), "--grid", "12", "12", "--rays", "20",
                  "--views", "4", "--qr-cap", "10"])
        assert "QR path skipped" in capsys.readouterr().err


class TestCompat:
    def test_json_output(self, capsys):
        assert cli.main(["compat", "--beta1", "4", "--vartheta1", "1", "--r2", "-1"]) == 0
        d = json.loads(capsys.readouterr().out)
        assert d["beta"] == pytest.approx(31 / 6) and max(d["residuals"]) <= 1e-10

    def test_bad_arguments(self):
        with pytest.raises(SystemExit):
            cli.main(["compat", "--beta1", "4", "--vartheta1", "1", "--r2", "2"])
        assert cli.main(["compat", "--beta1", "1.2", "--vartheta1", "1", "--r2", "-1"]) == 1


def test_version(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--version"])
    assert "0.1.0" in capsys.readouterr().out
