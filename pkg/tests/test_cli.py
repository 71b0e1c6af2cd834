import json
import subprocess
import sys

import numpy as np
import pytest
from numpy.testing import assert_allclose

from invlp.cli import main
from invlp.lp import save_lp

from conftest import figure1_lp


@pytest.fixture
def lp_file(tmp_path):
    path = tmp_path / "lp.json"
    save_lp(figure1_lp(), path)
    return path


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return path


class TestSolve:
    def test_writes_solution(self, lp_file, tmp_path):
        out = tmp_path / "sol.json"
        assert main(["solve", str(lp_file), "--tol", "1e-10", "--out", str(out)]) == 0
        sol = json.loads(out.read_text())
        assert sol["status"] == "Optimal"
        assert_allclose(sol["x"], [-0.625, 0.925], atol=1e-8)

    def test_missing_file(self, tmp_path):
        assert main(["solve", str(tmp_path / "none.json")]) == 2

    def test_bad_lp(self, tmp_path):
        path = _write(tmp_path / "lp.json", {"c": [1, 2], "A": [[1]], "b": [1]})
        assert main(["solve", str(path)]) == 2


class TestGrad:
    def test_inline_and_file_agree(self, lp_file, tmp_path, capsys):
        assert main(["grad", str(lp_file), "[0.0, 0.5]"]) == 0
        inline = json.loads(capsys.readouterr().out)
        x_path = _write(tmp_path / "x.json", [0.0, 0.5])
        assert main(["grad", str(lp_file), str(x_path)]) == 0
        from_file = json.loads(capsys.readouterr().out)
        assert inline == from_file
        assert set(inline) >= {"loss", "method", "dz_dc", "dz_dA", "dz_db"}

    def test_methods_agree(self, lp_file, capsys):
        out = {}
        for method in ("direct", "implicit", "fd"):
            assert main(["grad", str(lp_file), "[0.0, 0.5]", "--method", method]) == 0
            out[method] = json.loads(capsys.readouterr().out)
        for m in ("implicit", "fd"):
            assert_allclose(out[m]["dz_dA"], out["direct"]["dz_dA"], atol=1e-4)
            assert_allclose(out[m]["dz_db"], out["direct"]["dz_db"], atol=1e-4)

    def test_wrong_length(self, lp_file):
        assert main(["grad", str(lp_file), "[1.0]"]) == 2

    def test_direct_sde_rejected(self, lp_file):
        assert main(["grad", str(lp_file), "[0.0, 0.5]", "--loss", "sde", "--method", "direct"]) == 2

    def test_unknown_method(self, lp_file):
        assert main(["grad", str(lp_file), "[0.0, 0.5]", "--method", "magic"]) == 2


class TestGenerate:
    def test_directory_output(self, tmp_path):
        out = tmp_path / "data"
        code = main(["generate", "--family", "synthetic", "--params", '{"D": 2, "M1": 4}',
                     "--n-train", "3", "--n-test", "2", "--seed", "4", "--out", str(out)])
        assert code == 0
        assert len(json.loads((out / "train.json").read_text())) == 3
        assert len(json.loads((out / "test.json").read_text())) == 2
        assert json.loads((out / "model.json").read_text())["family"] == "synthetic"
        assert "true_w" in json.loads((out / "model.json").read_text())

    def test_bad_params(self, tmp_path):
        assert main(["generate", "--family", "figure1", "--params", "[1]", "--out", str(tmp_path)]) == 2
        assert main(["generate", "--family", "figure1", "--params", '{"nope": 1}',
                     "--out", str(tmp_path)]) == 2


class TestLearnAndBench:
    def test_learn(self, tmp_path):
        cfg = _write(tmp_path / "cfg.json", {"family": "figure1", "n_train": 5, "n_test": 3,
                                             "max_evals": 100, "deterministic": True})
        out = tmp_path / "run"
        assert main(["learn", str(cfg), "--out", str(out)]) == 0
        res = json.loads((out / "results.json").read_text())
        assert res["success"]
        assert (out / "trace_sqp_direct_0.csv").exists()

    def test_learn_config_errors(self, tmp_path):
        assert main(["learn", str(_write(tmp_path / "a.json", {"solver": "sqp_direct"}))]) == 2
        bad = tmp_path / "b.json"
        bad.write_text("{not json")
        assert main(["learn", str(bad)]) == 2

    def test_learn_internal_failure(self, tmp_path):
        cfg = _write(tmp_path / "cfg.json", {"family": "synthetic", "params": {"D": 3, "M1": 2}})
        assert main(["learn", str(cfg), "--out", str(tmp_path)]) == 3

    def test_bench(self, tmp_path, capsys):
        suite = {"trials": 2, "configs": [
            {"family": "figure1", "n_train": 5, "n_test": 2, "max_evals": 60, "deterministic": True},
            {"family": "figure1", "n_train": 5, "n_test": 2, "max_evals": 60, "deterministic": True,
             "solver": "random_search"},
        ]}
        out = tmp_path / "suite"
        assert main(["bench", str(_write(tmp_path / "s.json", suite)), "--out", str(out),
                     "--workers", "1"]) == 0
        assert "sqp_direct: success rate" in capsys.readouterr().out
        for name in ("results.json", "success_curve.csv", "loss_box.csv"):
            assert (out / name).exists()

    def test_bench_errors(self, tmp_path):
        assert main(["bench", str(_write(tmp_path / "s.json", [1, 2]))]) == 2
        dup = {"configs": [{"family": "figure1"}, {"family": "figure1"}]}
        assert main(["bench", str(_write(tmp_path / "d.json", dup))]) == 2

    def test_figure5(self, tmp_path, capsys):
        assert main(["figure5", "--out", str(tmp_path), "--grid", "3"]) == 0
        assert "test AOE" in capsys.readouterr().out
        assert (tmp_path / "decision_map.csv").exists()


class TestEntryPoint:
    def test_no_command(self):
        assert main([]) == 2

    def test_module_help(self):
        proc = subprocess.run([sys.executable, "-m", "invlp.cli", "--help"],
                              capture_output=True, text=True, check=False)
        assert proc.returncode == 0
        assert "figure5" in proc.stdout

    def test_solution_is_finite(self, lp_file, capsys):
        assert main(["solve", str(lp_file)]) == 0
        sol = json.loads(capsys.readouterr().out)
        assert np.all(np.isfinite(sol["x"]))
