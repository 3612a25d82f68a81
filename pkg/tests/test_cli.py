import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

import covreg.cli as cli
from covreg.cli import (
    EXIT_INPUT,
    EXIT_NONCONVERGED,
    EXIT_OK,
    EXIT_RANK,
    FitSpec,
    InputError,
    determinism_hash,
    load_dataset,
    params_from_json,
    params_json,
    run,
)
from covreg.datasets import load_sample, sample_path
from covreg.em import fit_em
from covreg.model import Params, canonicalize, sigma_at
from covreg.simulation import B0, single_x_params

GOLDEN = Path(__file__).parent / "golden"
SAMPLE = str(sample_path())
SAMPLE_FLAGS = ["--csv", SAMPLE, "--y", "y1,y2", "--x", "one,u", "--derive", "one=1"]


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return str(path)


def homoscedastic_csv(path, seed, n=100):
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1, 1, n)
    Y = np.column_stack([1 + u, 2 - u]) + rng.standard_normal((n, 2)) @ np.array([[1.0, 0.0], [0.5, 0.8]])
    return write_csv(path, ["u", "y1", "y2"], [[repr(float(v)) for v in row] for row in np.column_stack([u, Y])])


class TestFit:
    def test_golden_sample_fit(self, regen_goldens):
        code, report = run(["fit", *SAMPLE_FLAGS, "--seed", "0", "--json-out", "/dev/null"])
        assert code == EXIT_OK and report["fit"]["converged"]
        path = GOLDEN / "fit_sample.json"
        if regen_goldens:
            GOLDEN.mkdir(exist_ok=True)
            path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        golden = json.loads(path.read_text())
        ours, ref = params_from_json(report["params"]), params_from_json(golden["params"])
        np.testing.assert_allclose(ours.B, ref.B, atol=1e-6)
        np.testing.assert_allclose(ours.Psi, ref.Psi, atol=1e-6)
        assert report["fit"]["loglik"] == pytest.approx(golden["fit"]["loglik"], abs=1e-6)
        # the golden estimate lies within sampling error of the generating B0 / 2
        assert np.linalg.norm(np.abs(ref.B) - np.abs(B0 / 2)) < 0.4

    def test_report_schema(self):
        _, report = run(["fit", *SAMPLE_FLAGS, "--json-out", "/dev/null"])
        assert report["version"] == "1" and report["command"] == "fit" and report["seed"] == 0
        assert set(report["params"]) == {"A", "B", "Psi"}
        assert report["params"]["A"]["dims"] == [2, 2] and len(report["params"]["B"]) == 1
        assert report["inference"]["kind"] == "wald" and len(report["inference"]["se"]) == 4 + 4 + 3
        assert report["determinism_hash"] == determinism_hash(report)
        P = params_from_json(report["params"])
        assert P.B[np.unravel_index(np.argmax(np.abs(P.B)), P.B.shape)] > 0

    def test_mean_design_defaults_to_cov_design(self):
        _, report = run(["fit", *SAMPLE_FLAGS, "--json-out", "/dev/null"])
        assert report["columns"]["w"] == ["one", "u"]
        _, distinct = run(["fit", *SAMPLE_FLAGS, "--w-cols", "one", "--json-out", "/dev/null"])
        assert distinct["params"]["A"]["dims"] == [2, 1]

    def test_gibbs_fit(self):
        code, report = run(["fit", *SAMPLE_FLAGS, "--method", "gibbs", "--n-iter", "300", "--burn-in", "100",
                            "--json-out", "/dev/null"])
        assert code == EXIT_OK and report["inference"]["kind"] == "posterior"
        lo = np.array(report["inference"]["Psi"]["lower"]["data"])
        hi = np.array(report["inference"]["Psi"]["upper"]["data"])
        assert np.all(lo <= hi)

    def test_missing_rows_dropped(self, tmp_path):
        rows = [["0.1", "1.0", "2.0"], ["NA", "1.0", "2.0"], ["0.3", "", "2.5"], ["0.5", "0.2", "0.1"]]
        path = write_csv(tmp_path / "m.csv", ["u", "y1", "y2"], rows)
        loaded = load_dataset(FitSpec(path, ("y1", "y2"), ("u",)))
        assert loaded.rows_used == 2 and loaded.rows_dropped == 2


class TestErrors:
    def test_duplicate_column(self, capsys):
        code, report = run(["fit", "--csv", SAMPLE, "--y", "y1,y1", "--x", "u"])
        assert code == EXIT_INPUT and report is None
        assert "'y1'" in capsys.readouterr().err

    def test_duplicate_header(self, tmp_path, capsys):
        path = write_csv(tmp_path / "d.csv", ["u", "y1", "u"], [["1", "2", "3"]])
        assert run(["fit", "--csv", path, "--y", "y1", "--x", "u"])[0] == EXIT_INPUT
        assert "'u'" in capsys.readouterr().err

    @pytest.mark.parametrize("argv", [
        ["fit", "--csv", "/nonexistent.csv", "--y", "y1", "--x", "u"],
        ["fit", "--csv", SAMPLE, "--y", "y1,y2", "--x", "zz"],
        ["fit", "--csv", SAMPLE, "--y", "y1,y2", "--x", "u", "--derive", "bad"],
        ["fit", "--csv", SAMPLE, "--y", "y1,y2", "--x", "y1"],
        ["fit", "--csv", SAMPLE, "--y", "y1,y2", "--x", "u", "--rank", "0"],
        ["fit", "--csv", SAMPLE, "--y", "y1,y2", "--x", "u", "--method", "mcmc"],
        ["simulate", "--w", "-1"],
        ["simulate", "--reps", "0"],
        ["nonsense"],
    ])
    def test_bad_input_exit_2(self, argv):
        assert run(argv)[0] == EXIT_INPUT

    def test_rank_deficient(self):
        code, _ = run(["fit", *SAMPLE_FLAGS, "--derive", "u2=product(u,one)", "--x", "one,u,u2"])
        assert code == EXIT_RANK

    def test_strict_non_convergence(self):
        argv = ["fit", *SAMPLE_FLAGS, "--max-iters", "3", "--json-out", "/dev/null"]
        code, report = run(argv)
        assert code == EXIT_OK and not report["fit"]["converged"]
        assert run(argv + ["--strict"])[0] == EXIT_NONCONVERGED

    def test_codes_disjoint(self):
        codes = [cli.EXIT_OK, cli.EXIT_NUMERIC, cli.EXIT_INPUT, cli.EXIT_RANK, cli.EXIT_NONCONVERGED]
        assert len(set(codes)) == 5


class TestLrTest:
    def test_statistic_matches_two_fits(self, tmp_path):
        flags = [*SAMPLE_FLAGS, "--seed", "3", "--json-out", "/dev/null"]
        _, rank1 = run(["fit", *flags])
        _, rank2 = run(["fit", *flags, "--rank", "2"])
        _, test = run(["lrtest", *flags, "--rank", "2", "--rank-null", "1", "--df", "4"])
        expected = 2 * (rank2["fit"]["loglik"] - rank1["fit"]["loglik"])
        assert test["test"]["statistic"] == pytest.approx(max(expected, 0.0), abs=1e-8)
        assert test["test"]["df"] == 4

    def test_rank_two_requires_df(self, capsys):
        flags = ["--csv", SAMPLE, "--y", "y1,y2", "--x", "one,u,u2", "--derive", "one=1", "--derive", "u2=square(u)"]
        assert run(["lrtest", *flags, "--rank", "2", "--rank-null", "1"])[0] == EXIT_INPUT
        assert "--df" in capsys.readouterr().err
        code, report = run(["lrtest", *flags, "--rank", "2", "--rank-null", "1", "--df", "4", "--json-out", "/dev/null"])
        assert code == EXIT_OK and report["test"]["df"] == 4

    def test_homoscedastic_default_df(self):
        _, report = run(["lrtest", *SAMPLE_FLAGS, "--json-out", "/dev/null"])
        assert report["test"]["df"] == 4 and report["test"]["rank_null"] == 0
        assert report["test"]["reject"]

    @pytest.mark.slow
    def test_null_rejection_count(self, tmp_path):
        # 100 homoscedastic data sets: rejections at 0.05 are Binomial(100, ~0.05)
        rejections = 0
        for seed in range(100):
            path = homoscedastic_csv(tmp_path / f"h{seed}.csv", seed)
            _, report = run(["lrtest", "--csv", path, "--y", "y1,y2", "--x", "one,u", "--derive", "one=1",
                             "--seed", str(seed), "--json-out", "/dev/null"])
            rejections += report["test"]["reject"]
        assert 1 <= rejections <= 12


@pytest.fixture(scope="module")
def fit_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("fit") / "fit.json"
    assert run(["fit", *SAMPLE_FLAGS, "--json-out", str(path)])[0] == EXIT_OK
    return str(path)


class TestPredictRegion:
    def test_center_inside_and_fields(self, fit_file):
        code, report = run(["predict-region", "--fit", fit_file, "--csv", SAMPLE, "--group", "u", "--bins", "4",
                            "--json-out", "/dev/null"])
        assert code == EXIT_OK and len(report["regions"]) == 4
        P = params_from_json(report["params"])
        for r in report["regions"]:
            het = r["heteroscedastic"]
            mu, S = np.array(het["center"]), np.array(het["sigma"]["data"])
            assert (mu - mu) @ np.linalg.solve(S, mu - mu) < het["threshold"]
            assert het["threshold"] == pytest.approx(-2 * np.log(0.1), rel=1e-12)
            assert len(het["axes"]) == 2 and 0.0 <= het["coverage"] <= 1.0
            assert np.linalg.eigvalsh(S).min() > 0
        assert report["overall_coverage"]["heteroscedastic"] == pytest.approx(0.9, abs=0.07)
        assert P.q == 2

    def test_region_sigma_matches_model(self, fit_file, tmp_path):
        rng = np.random.default_rng(1)
        rows = [[repr(u), repr(rng.standard_normal()), repr(rng.standard_normal())] for u in [-0.5] * 20 + [0.5] * 10]
        path = write_csv(tmp_path / "g.csv", ["u", "y1", "y2"], rows)
        _, report = run(["predict-region", "--fit", fit_file, "--csv", path, "--group", "u", "--json-out", "/dev/null"])
        P = params_from_json(report["params"])
        for r in report["regions"]:
            S = np.array(r["heteroscedastic"]["sigma"]["data"])
            np.testing.assert_allclose(S, sigma_at(P, [1.0, r["group"]]), rtol=1e-12)
            assert r["n"] == (20 if r["group"] == -0.5 else 10)

    def test_empty_group_warns(self, fit_file):
        code, report = run(["predict-region", "--fit", fit_file, "--csv", SAMPLE, "--group", "u",
                            "--grid", "7.5", "--json-out", "/dev/null"])
        assert code == EXIT_OK and report["regions"] == []
        assert any("7.5" in w for w in report["warnings"])

    def test_bad_fit_file(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{")
        assert run(["predict-region", "--fit", str(bad), "--csv", SAMPLE, "--group", "u"])[0] == EXIT_INPUT


class TestSimulate:
    @pytest.mark.slow
    def test_level_field(self):
        code, report = run(["simulate", "--w", "0", "--n", "200", "--reps", "200", "--seed", "7",
                            "--json-out", "/dev/null"])
        assert code == EXIT_OK
        # binomial sd of a level estimate over 200 reps is about 0.015
        assert abs(report["study"]["power_or_level"] - 0.05) < 3 * 0.0155

    def test_additive_dispatch(self):
        code, report = run(["simulate", "--design", "additive", "--w", "0.3333", "--n", "50", "--reps", "3",
                            "--restarts", "1", "--json-out", "/dev/null"])
        assert code == EXIT_OK and "g_truth" in report["study"]
        assert report["study"]["scenario"]["design"] == "additive_three_regressor"

    def test_full_scale_flag(self, monkeypatch):
        seen = {}
        monkeypatch.setattr(cli, "cmd_simulate", lambda s, study, config: seen.setdefault("s", s) and {"study": {}})
        run(["simulate", "--full-scale", "--json-out", "/dev/null"])
        assert seen["s"].reps == 1000


class TestDeterminism:
    CASES = [
        ["fit", *SAMPLE_FLAGS, "--seed", "5"],
        ["fit", *SAMPLE_FLAGS, "--seed", "5", "--method", "gibbs", "--n-iter", "200", "--burn-in", "50"],
        ["lrtest", *SAMPLE_FLAGS, "--seed", "5"],
        ["simulate", "--w", "1", "--n", "60", "--reps", "4", "--seed", "5", "--restarts", "1"],
    ]

    @pytest.mark.parametrize("argv", CASES, ids=["fit-em", "fit-gibbs", "lrtest", "simulate"])
    def test_byte_identical(self, argv, tmp_path):
        outs = []
        for k in range(2):
            path = tmp_path / f"o{k}.json"
            assert run([*argv, "--json-out", str(path)])[0] == EXIT_OK
            outs.append(path.read_bytes())
        assert outs[0] == outs[1]

    def test_timestamp_excluded_from_hash(self, tmp_path):
        _, a = run(["fit", *SAMPLE_FLAGS, "--json-out", str(tmp_path / "a.json")])
        _, b = run(["fit", *SAMPLE_FLAGS, "--timestamp", "--json-out", str(tmp_path / "b.json")])
        assert "timestamp" in b and "timestamp" not in a
        assert a["determinism_hash"] == b["determinism_hash"]

    def test_subprocess_stdout_is_json(self):
        proc = subprocess.run([sys.executable, "-m", "covreg.cli", "fit", *SAMPLE_FLAGS],
                              capture_output=True, text=True, check=False)
        assert proc.returncode == 0
        assert json.loads(proc.stdout)["command"] == "fit"
        bad = subprocess.run([sys.executable, "-m", "covreg.cli", "fit", "--csv", SAMPLE, "--y", "y1,y1", "--x", "u"],
                             capture_output=True, text=True, check=False)
        assert bad.returncode == 2 and bad.stdout == "" and "y1" in bad.stderr


class TestRoundTrip:
    def test_csv_values_preserved(self, tmp_path):
        rng = np.random.default_rng(0)
        vals = rng.standard_normal((30, 3)) * np.array([1e-300, 1.0, 1e300])
        path = write_csv(tmp_path / "r.csv", ["a", "b", "c"], [[repr(float(v)) for v in row] for row in vals])
        loaded = load_dataset(FitSpec(path, ("a",), ("b", "c")))
        np.testing.assert_array_equal(loaded.data.Y[:, 0], vals[:, 0])
        np.testing.assert_array_equal(loaded.data.X, vals[:, 1:])
        again = write_csv(tmp_path / "s.csv", ["a", "b", "c"],
                          [[repr(float(v)) for v in row] for row in np.column_stack([loaded.data.Y, loaded.data.X])])
        assert Path(again).read_text() == Path(path).read_text()

    def test_params_json_round_trip(self, rng):
        P = canonicalize(Params(A=rng.standard_normal((2, 3)), Bs=(rng.standard_normal((2, 2)),) * 2,
                                Psi=np.eye(2)))
        Q = params_from_json(json.loads(json.dumps(params_json(P))))
        np.testing.assert_array_equal(Q.A, P.A)
        np.testing.assert_array_equal(Q.B, P.B)

    def test_fit_spec_validation(self):
        with pytest.raises(InputError, match="both"):
            FitSpec("x.csv", ("y",), ("u", "y"))

    def test_sample_matches_generator(self):
        d = load_sample()
        assert d.n == 200 and d.q == 2
        fit = fit_em(d)
        truth = single_x_params(1.0)
        assert abs(np.linalg.norm(fit.params.B) - np.linalg.norm(truth.B)) < 0.35
