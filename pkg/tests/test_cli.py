import json
import math

import numpy as np
import pytest
from click.testing import CliRunner

from sotmle import __version__
from sotmle.cli import config_hash, main, parse_bandwidth, read_data_csv
from sotmle.simulation import generate, load_oracle_constants

SMALL_SIM = ["simulate", "--dgp", "d1", "--n", "200", "--p", "0.5", "--q", "0.5", "--reps", "3", "--seed", "7"]


def run(args, env=None):
    result = CliRunner().invoke(main, args, env=env, catch_exceptions=False)
    return result


def write_csv(path, w, a, y, t=None):
    cols = [f"w{j + 1}" for j in range(w.shape[1])] + ["a", "y"] + ([] if t is None else ["t"])
    lines = [",".join(cols)]
    for i in range(w.shape[0]):
        cells = [repr(float(v)) for v in w[i]] + [str(int(a[i])), "" if a[i] == 0 else repr(float(y[i]))]
        if t is not None:
            cells.append(str(int(t[i])))
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def parse_report(text):
    out = {}
    for line in text.splitlines():
        if line.startswith("#"):
            continue
        key, value = line.split(" = ", 1)
        out[key] = value
    return out


@pytest.fixture
def fixture_csv(tmp_path):
    ds = generate("d1", 400, np.random.default_rng(21))
    return write_csv(tmp_path / "d1.csv", ds.w, ds.a, ds.y_filled())


class TestSimulate:
    def test_rows_and_header(self, tmp_path):
        out = tmp_path / "m.csv"
        res = run(SMALL_SIM + ["--out", str(out), "--table", str(tmp_path / "t.txt")])
        assert res.exit_code == 0, res.output
        lines = out.read_text().splitlines()
        assert lines[0].startswith(f"# sotmle {__version__} seed=7 config_hash=")
        frozen = load_oracle_constants()["d1"]
        assert f"psi0={frozen['psi0']!r}" in lines[1]
        assert len(lines) == 3 + 3
        assert "tmle1star" in (tmp_path / "t.txt").read_text()

    def test_byte_identical_reruns(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        run(SMALL_SIM + ["--out", str(a)])
        run(SMALL_SIM + ["--out", str(b)])
        assert a.read_bytes() == b.read_bytes()

    def test_config_file_and_env(self, tmp_path):
        ref = tmp_path / "ref.csv"
        run(SMALL_SIM[:-4] + ["--reps", "2", "--seed", "7", "--out", str(ref)])
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# comment\nreps = 5\nseed = 7\nestimator = tmle1, tmle1star, tmle2\n")
        via_file = tmp_path / "file.csv"
        run(["simulate", "--config", str(cfg), "--n", "200", "--reps", "2", "--out", str(via_file)])
        assert via_file.read_bytes() == ref.read_bytes()
        via_env = tmp_path / "env.csv"
        run(["simulate", "--config", str(cfg), "--n", "200", "--out", str(via_env)], env={"SOTMLE_SIMULATE_REPS": "2"})
        assert via_env.read_bytes() == ref.read_bytes()

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("replicates = 5\n")
        res = CliRunner().invoke(main, ["simulate", "--config", str(cfg)])
        assert res.exit_code != 0 and "replicates" in res.output

    def test_hash_ignores_workers(self):
        assert config_hash({"reps": 2, "workers": 1}) == config_hash({"reps": 2, "workers": 4})
        assert config_hash({"reps": 2}) != config_hash({"reps": 3})


class TestEstimate:
    def test_complete_data_mean(self, tmp_path):
        rng = np.random.default_rng(1)
        w = rng.normal(size=(80, 2))
        y = (rng.random(80) < 0.4).astype(float)
        path = write_csv(tmp_path / "c.csv", w, np.ones(80), y)
        res = run(["estimate", path, "--estimator", "tmle1"])
        assert res.exit_code == 0
        assert float(parse_report(res.output)["psi"]) == pytest.approx(y.mean(), abs=1e-10)

    def test_continuous_outcome_unscaled(self, tmp_path):
        rng = np.random.default_rng(2)
        w = rng.normal(size=(80, 1))
        y = 100 + 50 * rng.random(80)
        path = write_csv(tmp_path / "c.csv", w, np.ones(80), y)
        report = parse_report(run(["estimate", path]).output)
        assert float(report["psi"]) == pytest.approx(y.mean(), rel=1e-10)
        assert float(report["y_min"]) == pytest.approx(y.min())

    def test_outcome_for_unobserved_unit(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("w1,a,y\n0.1,1,0.5\n0.2,0,0.3\n")
        res = CliRunner().invoke(main, ["estimate", str(path)])
        assert res.exit_code == 1
        assert "line 3" in res.output and "unobserved" in res.output

    def test_all_missing(self, tmp_path):
        path = tmp_path / "none.csv"
        path.write_text("w1,a,y\n0.1,0,\n0.2,0,\n")
        res = CliRunner().invoke(main, ["estimate", str(path)])
        assert res.exit_code == 1 and "all outcomes are missing" in res.output

    def test_cv_records_bandwidth(self, fixture_csv):
        res = run(["estimate", fixture_csv, "--estimator", "tmle1star", "--bandwidth", "cv", "--q-design", "1,exp(w1),w1"])
        assert res.exit_code == 0
        h = parse_report(res.output)["bandwidth"]
        assert h.startswith("[") and float(h.strip("[]")) > 0

    @pytest.mark.parametrize("estimator", ["tmle2", "robins2"])
    def test_other_estimators(self, fixture_csv, estimator):
        report = parse_report(run(["estimate", fixture_csv, "--estimator", estimator]).output)
        assert report["estimator"] == estimator
        assert math.isfinite(float(report["psi"]))

    def test_bootstrap(self, fixture_csv):
        report = parse_report(run(["estimate", fixture_csv, "--boot", "100"]).output)
        assert report["variance"] == "bootstrap" and float(report["se"]) > 0

    def test_parse_bandwidth(self):
        assert parse_bandwidth("fixed:0.2") == 0.2
        assert parse_bandwidth("fixed:0.2,0.3") == (0.2, 0.3)
        with pytest.raises(Exception):
            parse_bandwidth("fixed:-1")

    def test_reader_requires_w_columns(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("x1,a,y\n1,1,0.5\n")
        with pytest.raises(Exception, match="w1..wd"):
            read_data_csv(str(path))


class TestAte:
    def test_ate_report(self, tmp_path):
        rng = np.random.default_rng(5)
        n = 300
        w = rng.normal(size=(n, 1))
        t = (rng.random(n) < 0.5).astype(int)
        y = 1000 + 500 * t + 300 * w[:, 0] + rng.normal(scale=100, size=n)
        path = tmp_path / "t.csv"
        lines = ["w1,t,y"] + [f"{float(w[i, 0])!r},{t[i]},{float(y[i])!r}" for i in range(n)]
        path.write_text("\n".join(lines) + "\n")
        report = parse_report(run(["ate", str(path)]).output)
        diff = float(report["diff"])
        assert float(report["psi1"]) - float(report["psi0"]) == pytest.approx(diff)
        assert float(report["ci_lower"]) < diff < float(report["ci_upper"])
        assert abs(diff - 500) < 4 * float(report["se"])


def test_bandwidth_command(fixture_csv, tmp_path):
    out = tmp_path / "bw.txt"
    res = run(["bandwidth", fixture_csv, "--estimator", "tmle2", "--out", str(out)])
    assert res.exit_code == 0
    assert out.read_text().startswith("# sotmle")


class TestOracle:
    def test_shipped_seed_reproduces_bitwise(self, tmp_path):
        out = tmp_path / "o.json"
        assert run(["oracle", "--dgp", "d1", "--out", str(out)]).exit_code == 0
        assert json.loads(out.read_text())["d1"] == load_oracle_constants()["d1"]

    def test_other_seed_agrees(self, tmp_path):
        out = tmp_path / "o.json"
        run(["oracle", "--dgp", "d1", "--draws", "200000", "--seed", "99", "--out", str(out)])
        new, ship = json.loads(out.read_text())["d1"], load_oracle_constants()["d1"]
        for key in ("psi0", "bound"):
            assert abs(new[key] - ship[key]) < 4 * math.hypot(new[f"{key}_mc_se"], ship[f"{key}_mc_se"])

    def test_mc_error_scaling(self, tmp_path):
        ses = []
        for m in (200_000, 400_000):
            out = tmp_path / f"{m}.json"
            run(["oracle", "--dgp", "d1", "--draws", str(m), "--seed", "3", "--out", str(out)])
            ses.append(json.loads(out.read_text())["d1"]["psi0_mc_se"])
        assert ses[0] / (ses[1] * math.sqrt(2)) == pytest.approx(1.0, abs=0.2)

    def test_too_few_draws(self, tmp_path):
        res = CliRunner().invoke(main, ["oracle", "--draws", "10", "--out", str(tmp_path / "x.json")])
        assert res.exit_code == 1
