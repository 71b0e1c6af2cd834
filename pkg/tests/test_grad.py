import numpy as np
import pytest
from numpy.testing import assert_allclose

from invlp import ipm
from invlp.grad import (
    CoefficientJacobians,
    DegenerateSolutionWarning,
    FiniteDifferenceError,
    IllConditionedKKT,
    Loss,
    Method,
    SolutionJacobianAction,
    aoe_coefficient_grads,
    aoe_implicit_grads,
    direct_objective_error_grads,
    finite_difference_grads,
    implicit_grads,
    sde_implicit_grads,
    uniqueness_flags,
)
from invlp.lp import LinearProgram, PrimalDualSolution, Status

from conftest import nondegenerate_lps

TIGHT = ipm.IpmSettings.tight(1e-10)


def _rel(a, b):
    a, b = a.flat(), b.flat()
    return np.abs(a - b).max(initial=0.0) / max(1.0, np.abs(b).max(initial=0.0))


def _x_obs(rng, lp, sol):
    # a point away from x* with a nonzero objective error
    return sol.x + rng.standard_normal(lp.D)


class TestDirect:
    def test_one_dimensional_by_hand(self):
        lp = LinearProgram([1.0], [[-1.0]], [-1.0])
        sol = ipm.solve(lp, TIGHT)
        g = direct_objective_error_grads(lp, sol, [2.0])
        assert_allclose(g.dc, [1.0], atol=1e-8)
        assert_allclose(g.dA, [[-1.0]], atol=1e-8)
        assert_allclose(g.db, [1.0], atol=1e-8)

    def test_one_dimensional_fd(self):
        lp = LinearProgram([1.0], [[-1.0]], [-1.0])
        sol = ipm.solve(lp, TIGHT)
        fd = finite_difference_grads(lp, [2.0], Loss.AOE)
        assert _rel(aoe_coefficient_grads(lp, sol, [2.0]), fd) <= 1e-4
        assert_allclose(fd.db, [1.0], atol=1e-4)

    def test_x_obs_only_moves_cost_block(self, fig1_lp):
        sol = ipm.solve(fig1_lp, TIGHT)
        g0 = direct_objective_error_grads(fig1_lp, sol, sol.x)
        g1 = direct_objective_error_grads(fig1_lp, sol, sol.x + 1.0)
        assert_allclose(g0.dc, 0.0)
        for a, b in zip(g0.blocks()[1:], g1.blocks()[1:]):
            np.testing.assert_array_equal(a, b)

    def test_figure1_against_fd(self, fig1_lp):
        sol = ipm.solve(fig1_lp, TIGHT)
        x_obs = np.array([0.0, 0.5])
        fd = finite_difference_grads(fig1_lp, x_obs, Loss.AOE)
        assert _rel(aoe_coefficient_grads(fig1_lp, sol, x_obs), fd) <= 1e-4

    def test_shadow_prices_are_copies(self, rng):
        for lp, sol in nondegenerate_lps(rng, 5, max_M2=1):
            g = direct_objective_error_grads(lp, sol, _x_obs(rng, lp, sol))
            np.testing.assert_array_equal(g.db, -sol.lam)
            np.testing.assert_array_equal(g.dh, -sol.nu)

    def test_rank_one_blocks(self, rng):
        for lp, sol in nondegenerate_lps(rng, 3):
            g = direct_objective_error_grads(lp, sol, _x_obs(rng, lp, sol))
            assert np.linalg.matrix_rank(g.dA) <= 1

    def test_sign_scaling(self, fig1_lp):
        sol = ipm.solve(fig1_lp, TIGHT)
        d = direct_objective_error_grads(fig1_lp, sol, [0.0, 0.5])
        z = fig1_lp.c @ (np.array([0.0, 0.5]) - sol.x)
        a = aoe_coefficient_grads(fig1_lp, sol, [0.0, 0.5])
        assert_allclose(a.flat(), np.sign(z) * d.flat())

    def test_zero_error_gives_zero(self, fig1_lp):
        sol = ipm.solve(fig1_lp, TIGHT)
        g = aoe_coefficient_grads(fig1_lp, sol, sol.x.copy())
        assert np.all(g.flat() == 0.0)

    def test_negative_error_against_fd(self, fig1_lp):
        sol = ipm.solve(fig1_lp, TIGHT)
        # x_obs chosen with c^T(x_obs - x*) < 0 is impossible for feasible x_obs, so go outside
        x_obs = sol.x - 0.3 * fig1_lp.c
        assert fig1_lp.c @ (x_obs - sol.x) < 0
        fd = finite_difference_grads(fig1_lp, x_obs, Loss.AOE)
        assert _rel(aoe_coefficient_grads(fig1_lp, sol, x_obs), fd) <= 1e-4

    def test_degenerate_warns(self):
        lp = LinearProgram([-1.0, -1.0], [[1, 1], [1, 0], [0, 1], [-1, 0], [0, -1]], [0, 0, 0, 5, 5])
        sol = ipm.solve(lp, TIGHT)
        with pytest.warns(DegenerateSolutionWarning):
            g = direct_objective_error_grads(lp, sol, [1.0, 1.0])
        assert np.all(np.isfinite(g.flat()))

    def test_requires_optimal(self):
        lp = LinearProgram([-1.0], [[-1.0]], [0.0])
        sol = ipm.solve(lp)
        with pytest.raises(ValueError):
            direct_objective_error_grads(lp, sol, [0.0])


class TestImplicit:
    def test_matches_direct(self, rng):
        for lp, sol in nondegenerate_lps(rng, 20):
            x_obs = _x_obs(rng, lp, sol)
            assert _rel(aoe_implicit_grads(lp, sol, x_obs), aoe_coefficient_grads(lp, sol, x_obs)) <= 1e-5

    def test_zero_input(self, rng):
        ((lp, sol),) = nondegenerate_lps(rng, 1)
        g = implicit_grads(lp, sol, np.zeros(lp.D))
        assert np.abs(g.flat()).max() == 0.0

    def test_linear_in_dl_dx(self, rng):
        for lp, sol in nondegenerate_lps(rng, 5):
            g1, g2 = rng.standard_normal((2, lp.D))
            a, b = 0.7, -1.3
            lhs = implicit_grads(lp, sol, a * g1 + b * g2).flat()
            rhs = a * implicit_grads(lp, sol, g1).flat() + b * implicit_grads(lp, sol, g2).flat()
            assert_allclose(lhs, rhs, atol=1e-10)

    def test_sde_against_fd(self, rng):
        for lp, sol in nondegenerate_lps(rng, 5):
            x_obs = _x_obs(rng, lp, sol)
            fd = finite_difference_grads(lp, x_obs, Loss.SDE)
            assert _rel(sde_implicit_grads(lp, sol, x_obs), fd) <= 1e-4

    def test_ill_conditioned(self):
        # weakly active row: the DKKT matrix has a zero row
        lp = LinearProgram([0.0, 1.0], [[0.0, -1.0], [1.0, 0.0], [-1.0, 0.0]], [0.0, 0.0, 1.0])
        x = np.array([0.0, 0.0])
        sol = PrimalDualSolution(x, np.array([-1.0, 0.0, 0.0]), np.zeros(0), Status.OPTIMAL, 0.0, 0, 0.0)
        with pytest.raises(IllConditionedKKT) as err:
            implicit_grads(lp, sol, np.ones(2))
        assert err.value.condition > 1e14

    def test_length_check(self, fig1_lp):
        sol = ipm.solve(fig1_lp, TIGHT)
        with pytest.raises(ValueError):
            implicit_grads(fig1_lp, sol, np.ones(3))


class TestFiniteDifference:
    def test_step_halving(self, fig1_lp):
        sol = ipm.solve(fig1_lp, TIGHT)
        x_obs = np.array([0.0, 0.5])
        exact = aoe_coefficient_grads(fig1_lp, sol, x_obs)
        e1 = _rel(finite_difference_grads(fig1_lp, x_obs, step=1e-3), exact)
        e2 = _rel(finite_difference_grads(fig1_lp, x_obs, step=5e-4), exact)
        assert e2 < e1 or e1 < 1e-9

    def test_failed_perturbation_names_entry(self):
        # b = 0 sits on the feasibility boundary of x <= b, -x <= 0
        lp = LinearProgram([1.0], [[1.0], [-1.0]], [0.0, 0.0])
        with pytest.raises(FiniteDifferenceError, match=r"b\[0\]"):
            finite_difference_grads(lp, [0.5], step=1e-3)


class TestSolutionJacobianAction:
    def test_methods_agree(self, rng):
        for lp, sol in nondegenerate_lps(rng, 3):
            g = -lp.c * 0.8
            ref = SolutionJacobianAction(lp, sol, Method.IMPLICIT)(g)
            direct = SolutionJacobianAction(lp, sol, Method.DIRECT)(g)
            fd = SolutionJacobianAction(lp, sol, "fd")(g)
            # x* is locally constant in c at a vertex, so the cost block vanishes
            assert _rel(direct, ref) <= 1e-6
            assert _rel(fd, ref) <= 1e-4

    def test_direct_rejects_general_g(self, rng):
        ((lp, sol),) = nondegenerate_lps(rng, 1)
        with pytest.raises(ValueError):
            SolutionJacobianAction(lp, sol, Method.DIRECT)(rng.standard_normal(lp.D) + lp.c)

    def test_fd_linear(self, rng):
        ((lp, sol),) = nondegenerate_lps(rng, 1, max_D=2, max_M1=4, max_M2=0)
        act = SolutionJacobianAction(lp, sol, Method.FINITE_DIFFERENCE)
        g1, g2 = rng.standard_normal((2, lp.D))
        assert_allclose(act(g1 + 2 * g2).flat(), act(g1).flat() + 2 * act(g2).flat(), atol=1e-10)


class TestUniqueness:
    def test_unique_vertex(self, fig1_lp):
        f = uniqueness_flags(fig1_lp, ipm.solve(fig1_lp, TIGHT))
        assert f.grad_c_unique and f.grad_b_h_unique and f.grad_A_G_unique

    def test_feasibility_lp(self):
        box = [[1, 0], [0, 1], [-1, 0], [0, -1]]
        lp = LinearProgram([0.0, 0.0], box, [1, 1, 1, 1])
        f = uniqueness_flags(lp, ipm.solve(lp, TIGHT))
        assert f.grad_A_G_unique
        assert not f.grad_c_unique

    def test_edge_optimal(self):
        box = [[1, 0], [0, 1], [-1, 0], [0, -1]]
        lp = LinearProgram([0.0, 1.0], box, [1, 1, 0, 0])
        f = uniqueness_flags(lp, ipm.solve(lp, TIGHT))
        assert not f.grad_c_unique
        assert not f.grad_A_G_unique

    def test_heuristic_path(self, fig1_lp):
        f = uniqueness_flags(fig1_lp, ipm.solve(fig1_lp, TIGHT), use_oracle=False)
        assert f.grad_c_unique


class TestJacobiansContainer:
    def test_arithmetic(self, fig1_lp):
        z = CoefficientJacobians.zeros(fig1_lp)
        one = CoefficientJacobians(*(np.ones_like(b) for b in z.blocks()))
        assert_allclose((one + one.scaled(2.0)).flat(), 3.0)
        d = one.to_dict()
        assert set(d) == {"dz_dc", "dz_dA", "dz_db", "dz_dG", "dz_dh"}
