import numpy as np
import pytest
from numpy.testing import assert_allclose

from invlp import ipm
from invlp.lp import LinearProgram, Status, check_kkt, random_feasible_lp, vertex_enumeration_solve


def _infeasible_lp(rng, D, M1):
    # a x <= -1 together with -a x <= -1 cannot both hold
    lp = random_feasible_lp(rng, D, M1)
    a = rng.standard_normal(D)
    A = np.vstack([lp.A, a, -a])
    b = np.concatenate([lp.b, [-1.0, -1.0]])
    return LinearProgram(lp.c, A, b)


def _unbounded_lp(rng, D, M1):
    # every row satisfied along -d for d with A d >= 0; cost improves along -d
    d = rng.standard_normal(D)
    A = rng.standard_normal((M1, D))
    A -= np.outer(np.minimum(A @ d, 0.0) / (d @ d), d) * 2.0
    b = rng.uniform(0.5, 1.0, M1)
    return LinearProgram(d, A, b)


class TestSettings:
    def test_defaults(self):
        s = ipm.IpmSettings()
        assert (s.max_iters, s.tol_gap, s.step_fraction, s.inf_ratio) == (200, 1e-8, 0.99, 1e10)

    @pytest.mark.parametrize("kw", [{"tol_gap": 0.0}, {"step_fraction": 1.0}, {"max_iters": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ipm.IpmSettings(**kw)


class TestSolve:
    def test_one_dimensional(self):
        sol = ipm.solve(LinearProgram([1.0], [[-1.0]], [-1.0]))
        assert sol.status is Status.OPTIMAL
        assert_allclose(sol.x, [1.0], atol=1e-7)
        assert_allclose(sol.lam, [-1.0], atol=1e-7)

    def test_figure1(self, fig1_lp):
        sol = ipm.solve(fig1_lp)
        assert_allclose(sol.x, [-0.625, 0.925], atol=1e-6)

    def test_infeasible(self):
        sol = ipm.solve(LinearProgram([0.0], [[1.0], [-1.0]], [-1.0, 0.0]))
        assert sol.status is Status.PRIMAL_INFEASIBLE
        assert np.all(np.isfinite(sol.x))
        assert "certificate" in sol.diagnostics

    def test_unbounded(self):
        sol = ipm.solve(LinearProgram([-1.0], [[-1.0]], [0.0]))
        assert sol.status is Status.DUAL_INFEASIBLE_UNBOUNDED

    def test_iteration_limit_returns_finite_iterate(self, rng):
        lp = random_feasible_lp(rng, 4, 8)
        sol = ipm.solve(lp, ipm.IpmSettings(max_iters=2))
        assert sol.status is Status.ITERATION_LIMIT
        for v in (sol.x, sol.lam, sol.nu):
            assert np.all(np.isfinite(v))

    def test_free_variables_and_equalities(self):
        # min x1 + x2 s.t. x1 - x2 = 0, x1 >= -3
        lp = LinearProgram([1.0, 1.0], [[-1.0, 0.0]], [3.0], [[1.0, -1.0]], [0.0])
        sol = ipm.solve(lp)
        assert_allclose(sol.x, [-3.0, -3.0], atol=1e-6)

    def test_against_oracle(self, rng):
        for _ in range(50):
            D = int(rng.integers(1, 7))
            lp = random_feasible_lp(rng, D, int(rng.integers(D + 1, 13)), int(rng.integers(0, min(2, D - 1) + 1)))
            sol = ipm.solve(lp)
            ref = vertex_enumeration_solve(lp)
            assert sol.status is Status.OPTIMAL
            assert abs(sol.objective - ref.objective) <= 1e-6 * (1 + abs(ref.objective))
            assert check_kkt(lp, sol).within(1e-6)

    def test_complementarity_measure(self, rng):
        for _ in range(10):
            lp = random_feasible_lp(rng, 3, 6)
            sol = ipm.solve(lp)
            assert sol.diagnostics["mu"] <= 1e-8 * (1 + abs(sol.objective))

    def test_residual_history_monotone(self, rng):
        for _ in range(20):
            lp = random_feasible_lp(rng, 4, 9, 1)
            hist = np.asarray(ipm.solve(lp).diagnostics["residual_history"])
            assert np.all(np.diff(hist) <= 1e-12)

    def test_deterministic(self, rng):
        lp = random_feasible_lp(rng, 5, 10, 1)
        a, b = ipm.solve(lp), ipm.solve(lp)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.lam, b.lam)
        assert a.iterations == b.iterations

    def test_certificates_match_oracle(self, rng):
        for _ in range(10):
            lp = _infeasible_lp(rng, 2, 4)
            assert ipm.solve(lp).status is Status.PRIMAL_INFEASIBLE
            assert vertex_enumeration_solve(lp).status is Status.PRIMAL_INFEASIBLE
        for _ in range(10):
            lp = _unbounded_lp(rng, 3, 5)
            assert ipm.solve(lp).status is Status.DUAL_INFEASIBLE_UNBOUNDED
            assert vertex_enumeration_solve(lp).status is Status.DUAL_INFEASIBLE_UNBOUNDED


class TestBatch:
    def test_empty(self):
        assert ipm.solve_batch([]) == []

    def test_single(self, fig1_lp):
        (sol,) = ipm.solve_batch([fig1_lp])
        np.testing.assert_array_equal(sol.x, ipm.solve(fig1_lp).x)

    @pytest.mark.parametrize("threads", ["1", "4"])
    def test_matches_sequential(self, rng, monkeypatch, threads):
        monkeypatch.setenv("INVLP_THREADS", threads)
        lps = [random_feasible_lp(rng, int(rng.integers(2, 6)), 8, 1) for _ in range(20)]
        batch = ipm.solve_batch(lps)
        for lp, sol in zip(lps, batch):
            ref = ipm.solve(lp)
            np.testing.assert_array_equal(sol.x, ref.x)
            np.testing.assert_array_equal(sol.lam, ref.lam)

    def test_mixed_outcomes(self, rng):
        lps = [random_feasible_lp(rng, 3, 5), LinearProgram([-1.0], [[-1.0]], [0.0])]
        out = ipm.solve_batch(lps)
        assert out[0].status is Status.OPTIMAL
        assert out[1].status is Status.DUAL_INFEASIBLE_UNBOUNDED
