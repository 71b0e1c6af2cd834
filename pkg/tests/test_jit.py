import json
import os
import subprocess
import sys

import numpy as np
import pytest
from numpy.testing import assert_allclose

SCRIPT = """
import json
import numpy as np
import invlp
from invlp import ipm
from invlp.lp import random_feasible_lp
from invlp.models import figure1_model
from invlp.ilop import IlopProblem, outer_objective
from invlp.models import generate_observations

rng = np.random.default_rng(17)
out = {"use_numba": invlp.USE_NUMBA, "lps": []}
for _ in range(20):
    lp = random_feasible_lp(rng, 4, 8, 1)
    sol = ipm.solve(lp, ipm.IpmSettings.tight(1e-10))
    out["lps"].append({"status": sol.status.value, "x": sol.x.tolist(), "obj": sol.objective})
m = figure1_model()
prob = IlopProblem(m, generate_observations(m, [[0.7], [1.2]]))
f, g, _ = outer_objective(prob, np.array([-0.4, -0.1]))
out["ilop"] = [float(f), np.asarray(g).tolist()]
print(json.dumps(out))
"""


def _run(disable):
    env = dict(os.environ)
    env.pop("INVLP_DISABLE_NUMBA", None)
    if disable:
        env["INVLP_DISABLE_NUMBA"] = "1"
    proc = subprocess.run([sys.executable, "-c", SCRIPT], env=env, capture_output=True,
                          text=True, check=True)
    return json.loads(proc.stdout)


@pytest.fixture(scope="module")
def both_paths():
    return _run(False), _run(True)


class TestBackends:
    def test_flag_selects_path(self, both_paths):
        jit, plain = both_paths
        assert plain["use_numba"] is False
        pytest.importorskip("numba")
        assert jit["use_numba"] is True

    def test_same_solutions(self, both_paths):
        jit, plain = both_paths
        for a, b in zip(jit["lps"], plain["lps"]):
            assert a["status"] == b["status"]
            assert_allclose(a["x"], b["x"], atol=1e-8)
            assert_allclose(a["obj"], b["obj"], rtol=1e-10, atol=1e-10)

    def test_same_outer_objective(self, both_paths):
        jit, plain = both_paths
        assert_allclose(jit["ilop"][0], plain["ilop"][0], atol=1e-9)
        assert_allclose(jit["ilop"][1], plain["ilop"][1], atol=1e-7)

    def test_each_path_is_deterministic(self):
        a, b = _run(True), _run(True)
        assert a == b


class TestKernels:
    def test_lu_paths_agree(self):
        from invlp import _kernels

        rng = np.random.default_rng(0)
        M = rng.standard_normal((6, 6)) + 6 * np.eye(6)
        rhs = rng.standard_normal(6)
        for factor, solve in ((_kernels._lu_factor_loops, _kernels._lu_solve_loops),
                              (_kernels._lu_factor_scipy, _kernels._lu_solve_scipy)):
            LU, piv = factor(M.copy())
            assert_allclose(M @ solve(LU, piv, rhs), rhs, atol=1e-12)

    def test_absmax(self):
        from invlp._kernels import absmax

        assert absmax(np.array([1.0, -3.0, 2.0])) == 3.0
