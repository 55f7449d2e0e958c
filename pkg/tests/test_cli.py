"""Driver verbs end to end: exit codes, report determinism, config plumbing.

Each verb runs in-process through cli.main so exit codes and emitted bytes
can be asserted without spawning interpreters.
"""
import json
import math

import numpy as np
import pytest

from matconc import cli
from matconc.matcore import HermitianMatrix


def run(argv, capsys):
    code = cli.main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestBoundVerb:
    def test_csv_golden_row(self, capsys):
        code, out, _ = run(["bound", "--name", "gaussexp", "--d", "2",
                            "--v", "1", "--c", "0", "--t", "2"], capsys)
        assert code == 0
        lines = out.strip().splitlines()
        assert lines[0].startswith("# bound=gaussexp")
        assert lines[1] == "t,raw,clamped"
        assert lines[2] == "2.0,0.2706705664732254,0.2706705664732254"

    def test_out_file(self, capsys, tmp_path):
        target = tmp_path / "curve.csv"
        code, out, _ = run(["bound", "--name", "bounded_diff", "--d", "1",
                            "--sigma2", "2.0", "--t", "0:2:1",
                            "--out", str(target)], capsys)
        assert code == 0 and out == ""
        rows = target.read_text().strip().splitlines()
        assert len(rows) == 5  # comment, header, three grid points

    def test_missing_parameter(self, capsys):
        code, _, err = run(["bound", "--name", "gaussexp", "--d", "2"], capsys)
        assert code == 3
        assert json.loads(err)["error"]["type"] == "config"


class TestVerifyVerb:
    def test_poly_efron_stein_passes(self, capsys):
        code, out, _ = run(["verify", "--check", "poly_efron_stein",
                            "--model", "hypercube_sum", "--n", "3"], capsys)
        assert code == 0
        report = json.loads(out)
        assert report["pass"] is True
        assert report["results"][0]["lhs"] == pytest.approx(math.sqrt(3.0))

    def test_kernel_identities_pass(self, capsys):
        code, out, _ = run(["verify", "--check", "kernel_identities",
                            "--model", "hypercube_sum", "--n", "2"], capsys)
        assert code == 0
        report = json.loads(out)
        assert report["pass"] is True
        assert report["antisymmetry_max"] == 0.0
        assert report["stein_residual"] <= 1e-10

    def test_rerun_is_byte_identical(self, capsys, tmp_path):
        argv = ["verify", "--check", "exp_efron_stein", "--model",
                "hypercube_sum", "--n", "2", "--theta", "0.25,-0.25",
                "--psi", "1"]
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert run(argv + ["--out", str(a)], capsys)[0] == 0
        assert run(argv + ["--out", str(b)], capsys)[0] == 0
        assert a.read_bytes() == b.read_bytes()

    def test_unknown_check(self, capsys):
        code, _, err = run(["verify", "--check", "nonsense",
                            "--model", "hypercube_sum"], capsys)
        assert code == 3
        assert "nonsense" in json.loads(err)["error"]["message"]

    def test_unknown_model(self, capsys):
        code, _, _ = run(["verify", "--check", "poly_efron_stein",
                          "--model", "mystery"], capsys)
        assert code == 3

    def test_estimated_kernel_requires_seed(self, capsys):
        code, _, err = run(["verify", "--check", "kernel_poly_moments",
                            "--model", "hypercube_sum", "--n", "2",
                            "--kernel", "estimated"], capsys)
        assert code == 3
        assert "seed" in json.loads(err)["error"]["message"]


class TestFuzzVerb:
    def test_pass_and_determinism(self, capsys, tmp_path):
        argv = ["fuzz", "--ineq", "pmvti", "--trials", "40", "--seed", "11",
                "--d", "1:2", "--q", "2", "--s", "1"]
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert run(argv + ["--out", str(a)], capsys)[0] == 0
        assert run(argv + ["--out", str(b)], capsys)[0] == 0
        assert a.read_bytes() == b.read_bytes()
        report = json.loads(a.read_text())
        assert report["pass"] is True and report["trials"] == 40

    def test_jobs_deterministic(self, capsys, tmp_path):
        argv = ["fuzz", "--ineq", "emvti", "--trials", "30", "--seed", "4",
                "--d", "1:2", "--s", "1,4", "--jobs", "3"]
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert run(argv + ["--out", str(a)], capsys)[0] == 0
        assert run(argv + ["--out", str(b)], capsys)[0] == 0
        assert a.read_bytes() == b.read_bytes()
        assert json.loads(a.read_text())["trials"] == 30

    def test_zero_trials_is_config_error(self, capsys):
        code, _, err = run(["fuzz", "--ineq", "pmvti", "--trials", "0",
                            "--seed", "1"], capsys)
        assert code == 3
        assert json.loads(err)["error"]["type"] == "config"

    def test_unknown_inequality(self, capsys):
        code, _, _ = run(["fuzz", "--ineq", "bogus", "--trials", "5",
                          "--seed", "1"], capsys)
        assert code == 3

    def test_missing_seed(self, capsys):
        code, _, err = run(["fuzz", "--ineq", "pmvti", "--trials", "5"], capsys)
        assert code == 3
        assert "seed" in json.loads(err)["error"]["message"]


class TestConfigPlumbing:
    def test_config_file_runs(self, capsys, tmp_path):
        cfg = tmp_path / "fuzz.json"
        cfg.write_text(json.dumps({"ineq": "pmvti", "trials": 20, "seed": 1,
                                   "d": "1:2", "q": "2", "s": "1"}))
        code, out, _ = run(["fuzz", "--config", str(cfg)], capsys)
        assert code == 0
        assert json.loads(out)["trials"] == 20

    def test_flag_overrides_config(self, capsys, tmp_path):
        cfg = tmp_path / "fuzz.json"
        cfg.write_text(json.dumps({"ineq": "pmvti", "trials": 20, "seed": 1,
                                   "d": "1", "q": "2", "s": "1"}))
        code, out, _ = run(["fuzz", "--config", str(cfg), "--trials", "10"],
                           capsys)
        assert code == 0
        assert json.loads(out)["trials"] == 10

    def test_unknown_config_key_rejected(self, capsys, tmp_path):
        cfg = tmp_path / "fuzz.json"
        cfg.write_text(json.dumps({"ineq": "pmvti", "trials": 5, "seed": 1,
                                   "tirals": 5}))
        code, _, err = run(["fuzz", "--config", str(cfg)], capsys)
        assert code == 3
        assert "tirals" in json.loads(err)["error"]["message"]

    def test_malformed_config(self, capsys, tmp_path):
        cfg = tmp_path / "broken.json"
        cfg.write_text("[1, 2, 3]")
        assert run(["fuzz", "--config", str(cfg)], capsys)[0] == 3
        cfg.write_text("{not json")
        assert run(["fuzz", "--config", str(cfg)], capsys)[0] == 3

    def test_unknown_flag(self, capsys):
        code, _, err = run(["fuzz", "--ineq", "pmvti", "--trails", "5"], capsys)
        assert code == 3
        assert json.loads(err)["error"]["type"] == "config"

    def test_help_exits_zero(self, capsys):
        assert run(["--help"], capsys)[0] == 0


class TestConjectureVerb:
    def test_completion_beats_outcome(self, capsys):
        # the sweep finds the polynomial-form failure yet still exits 0
        code, out, _ = run(["conjecture", "--trials", "150", "--seed", "1",
                            "--d", "1", "--q", "2", "--s", "1"], capsys)
        assert code == 0
        report = json.loads(out)
        assert report["pass"] is False
        assert report["sections"]["exp"]["pass"] is True
        assert report["sections"]["poly"]["pass"] is False

    def test_deterministic(self, capsys, tmp_path):
        argv = ["conjecture", "--trials", "60", "--seed", "9", "--d", "1:2"]
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert run(argv + ["--out", str(a)], capsys)[0] == 0
        assert run(argv + ["--out", str(b)], capsys)[0] == 0
        assert a.read_bytes() == b.read_bytes()


class TestCoupleVerb:
    def test_matches_expected_mean(self, capsys):
        code, out, _ = run(["couple", "--n", "2", "--runs", "600",
                            "--seed", "3", "--pathwise-runs", "40"], capsys)
        assert code == 0
        report = json.loads(out)
        assert report["expected"] == 3.0
        assert report["deviation_sigmas"] <= 3.0
        assert report["pathwise_ok"] is True

    def test_run_floor(self, capsys):
        assert run(["couple", "--n", "2", "--runs", "1", "--seed", "0"],
                   capsys)[0] == 3

    def test_deterministic(self, capsys, tmp_path):
        argv = ["couple", "--n", "3", "--runs", "300", "--seed", "5",
                "--pathwise-runs", "10"]
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert run(argv + ["--out", str(a)], capsys)[0] == 0
        assert run(argv + ["--out", str(b)], capsys)[0] == 0
        assert a.read_bytes() == b.read_bytes()


class TestTailVerb:
    def test_dominated(self, capsys):
        code, out, _ = run(["tail", "--model", "hypercube_sum", "--n", "3",
                            "--d", "1", "--bound", "bounded_diff",
                            "--sigma2", "3.0", "--samples", "400",
                            "--seed", "2", "--t", "0:4:1"], capsys)
        assert code == 0
        report = json.loads(out)
        assert report["violations"] == []
        assert "dominated" not in report

    def test_violation_exits_two(self, capsys):
        code, _, err = run(["tail", "--model", "hypercube_sum", "--n", "3",
                            "--d", "1", "--bound", "bounded_diff",
                            "--sigma2", "0.0001", "--samples", "400",
                            "--seed", "2", "--t", "0.5,1.5"], capsys)
        assert code == 2
        assert json.loads(err)["error"]["type"] == "verification"

    def test_runs_without_bound(self, capsys):
        code, out, _ = run(["tail", "--model", "hypercube_sum", "--n", "2",
                            "--d", "1", "--samples", "200", "--seed", "1",
                            "--t", "0:3:1"], capsys)
        assert code == 0
        assert "bound" not in json.loads(out)

    def test_sample_floor(self, capsys):
        assert run(["tail", "--model", "hypercube_sum", "--n", "2",
                    "--samples", "10", "--seed", "1"], capsys)[0] == 3


class TestReplayVerb:
    def test_replays_fuzz_artifact(self, capsys, tmp_path):
        art = tmp_path / "fuzz.json"
        code, _, _ = run(["fuzz", "--ineq", "pmvti", "--trials", "20",
                          "--seed", "6", "--d", "1:2", "--q", "2",
                          "--s", "1", "--out", str(art)], capsys)
        assert code == 0
        stored = json.loads(art.read_text())["worst_case"]
        code, out, _ = run(["replay", "--case", str(art)], capsys)
        assert code == 0
        assert json.loads(out)["slack"] == stored["slack"]

    def test_conjecture_counterexample_is_advisory(self, capsys, tmp_path):
        case = {
            "ineq": "conjecture_poly", "q": 2, "s": 1.0,
            "A": HermitianMatrix(np.array([[0.0]])).to_json(),
            "B": HermitianMatrix(np.array([[-2.0]])).to_json(),
            "C": HermitianMatrix(np.array([[-1.0]])).to_json(),
        }
        path = tmp_path / "case.json"
        path.write_text(json.dumps(case))
        code, out, _ = run(["replay", "--case", str(path)], capsys)
        assert code == 0  # negative slack, but conjecture replays never gate
        assert json.loads(out)["slack"] < 0

    def test_missing_case_flag(self, capsys):
        assert run(["replay"], capsys)[0] == 3

    def test_file_without_case(self, capsys, tmp_path):
        path = tmp_path / "empty.json"
        path.write_text("{}")
        assert run(["replay", "--case", str(path)], capsys)[0] == 3
