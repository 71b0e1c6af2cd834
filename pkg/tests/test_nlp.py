import itertools

import numpy as np
import pytest
from numpy.testing import assert_allclose

from invlp.grad import Loss
from invlp.ilop import IlopProblem, build_nlp
from invlp.models import figure1_model, generate_observations
from invlp.nlp import (
    TRACE_COLUMNS,
    NlpProblem,
    SqpOptions,
    random_search,
    solve_qp_subproblem,
    sqp_solve,
)


def enumerate_qp(B, q, G, g0):
    """Brute-force KKT over all active sets of min q.d + d.B.d s.t. G d + g0 <= 0."""
    H = 2.0 * B
    n, m = H.shape[0], G.shape[0]
    best = None
    for k in range(min(n, m) + 1):
        for S in itertools.combinations(range(m), k):
            S = list(S)
            K = np.block([[H, G[S].T], [G[S], np.zeros((k, k))]])
            rhs = np.concatenate([-q, -g0[S]])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            d, lam = sol[:n], sol[n:]
            if np.all(G @ d + g0 <= 1e-9) and np.all(lam >= -1e-9):
                val = q @ d + d @ B @ d
                if best is None or val < best[0] - 1e-12:
                    best = (val, d)
    return best


def quad(w):
    return float(w @ w), 2.0 * w


def rosenbrock(w):
    f = (1 - w[0]) ** 2 + 100 * (w[1] - w[0] ** 2) ** 2
    g = np.array([-2 * (1 - w[0]) - 400 * w[0] * (w[1] - w[0] ** 2), 200 * (w[1] - w[0] ** 2)])
    return float(f), g


class TestQpSubproblem:
    def test_unconstrained(self):
        r = solve_qp_subproblem(np.eye(2), [1.0, 0.0])
        assert_allclose(r.delta, [-0.5, 0.0])
        assert r.status == "optimal"

    def test_single_equality(self):
        r = solve_qp_subproblem(np.eye(2), [0.0, 0.0], G_eq=[[1.0, 1.0]], h0=[-1.0])
        assert_allclose(r.delta, [0.5, 0.5])
        # stationarity: 2 B d + G^T lam = 0
        assert_allclose(2 * r.delta + r.lam_eq[0], 0.0, atol=1e-12)

    def test_random_against_enumeration(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            n = int(rng.integers(1, 4))
            m = int(rng.integers(1, 4))
            L = rng.standard_normal((n, n))
            B = L @ L.T + 0.1 * np.eye(n)
            q = rng.standard_normal(n)
            G = rng.standard_normal((m, n))
            g0 = rng.uniform(-1.0, 0.5, m)
            ref = enumerate_qp(B, q, G, g0)
            r = solve_qp_subproblem(B, q, G, g0)
            if ref is None:
                assert r.infeasible
                continue
            assert r.status == "optimal"
            assert_allclose(q @ r.delta + r.delta @ B @ r.delta, ref[0], atol=1e-9)
            assert_allclose(r.delta, ref[1], atol=1e-7)
            assert np.all(r.lam_ineq >= -1e-12)
            stat = q + 2 * B @ r.delta + G.T @ r.lam_ineq
            assert np.abs(stat).max() <= 1e-9

    def test_infeasible_marker(self):
        # d <= -1 and -d <= -1
        r = solve_qp_subproblem(np.eye(1), [0.0], [[1.0], [-1.0]], [1.0, 1.0])
        assert r.infeasible
        assert r.relaxed

    def test_inconsistent_equalities(self):
        r = solve_qp_subproblem(np.eye(1), [0.0], G_eq=[[1.0], [1.0]], h0=[0.0, 1.0])
        assert r.infeasible

    def test_redundant_equalities(self):
        r = solve_qp_subproblem(np.eye(2), [0.0, 0.0], G_eq=[[1.0, 1.0], [2.0, 2.0]], h0=[-1.0, -2.0])
        assert r.status == "optimal"
        assert_allclose(r.delta, [0.5, 0.5])

    def test_elastic_start_recovers(self):
        # infeasible at d = 0 but consistent
        r = solve_qp_subproblem(np.eye(2), [0.0, 0.0], [[-1.0, 0.0], [0.0, -1.0]], [1.0, 2.0])
        assert r.status == "optimal"
        assert_allclose(r.delta, [1.0, 2.0], atol=1e-10)


class TestSqp:
    def test_unconstrained_quadratic(self):
        res = sqp_solve(NlpProblem(2, quad), [1.0, 1.0], SqpOptions(max_iters=50))
        assert np.linalg.norm(res.w) <= 1e-6
        assert res.state.iteration <= 50

    def test_linear_with_halfspace(self):
        def obj(w):
            return float(w.sum()), np.ones(2)

        def ineq(w):
            return np.array([1.0 - w.sum()]), -np.ones((1, 2))

        # a linear objective needs bounds to be bounded below on the feasible set
        prob = NlpProblem(2, obj, ineq=ineq, lower=[-5, -5], upper=[5, 5])
        res = sqp_solve(prob, [3.0, 3.0])
        assert abs(res.f - 1.0) <= 1e-6
        assert res.violation <= 1e-9

    def test_equality_constrained(self):
        def eq(w):
            return np.array([w[0] + 2 * w[1] - 2.0]), np.array([[1.0, 2.0]])

        res = sqp_solve(NlpProblem(2, quad, eq=eq), [0.0, 0.0])
        assert_allclose(res.w, [0.4, 0.8], atol=1e-7)
        assert res.reason == "kkt"

    def test_nonlinear_constraint(self):
        # min (w1-2)^2 + (w2-1)^2 s.t. w1^2 + w2^2 <= 1
        def obj(w):
            d = w - [2.0, 1.0]
            return float(d @ d), 2 * d

        def ineq(w):
            return np.array([w @ w - 1.0]), 2 * w[None, :]

        res = sqp_solve(NlpProblem(2, obj, ineq=ineq), [0.0, 0.0])
        assert_allclose(res.w, np.array([2.0, 1.0]) / np.sqrt(5.0), atol=1e-6)

    def test_convex_regression_suite(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            n = int(rng.integers(2, 6))
            L = rng.standard_normal((n, n))
            Q = L @ L.T + 0.5 * np.eye(n)
            p = rng.standard_normal(n)
            A = rng.standard_normal((3, n))
            b = rng.uniform(0.1, 1.0, 3)

            def obj(w, Q=Q, p=p):
                return float(w @ Q @ w + p @ w), 2 * Q @ w + p

            def ineq(w, A=A, b=b):
                return A @ w - b, A

            res = sqp_solve(NlpProblem(n, obj, ineq=ineq), rng.standard_normal(n))
            assert res.reason in ("kkt", "step")
            assert res.state.iteration <= 200
            kkt = [r["kkt"] for r in res.trace if np.isfinite(r["kkt"])]
            # the terminating check is not a trace row; verify KKT directly
            x = res.w
            act = A @ x - b
            grad = 2 * Q @ x + p
            lam = np.maximum(np.linalg.lstsq(A[act > -1e-6].T, -grad, rcond=None)[0], 0) \
                if (act > -1e-6).any() else np.zeros(0)
            resid = grad + (A[act > -1e-6].T @ lam if lam.size else 0.0)
            assert np.abs(resid).max() <= 1e-6
            assert act.max() <= 1e-6
            assert all(np.isfinite(kkt))

    def test_bfgs_stays_positive_definite(self):
        res = sqp_solve(NlpProblem(2, rosenbrock), [-1.2, 1.0], SqpOptions(max_iters=300))
        assert all(r["min_eig_B"] >= 1e-10 for r in res.trace)
        assert_allclose(res.w, [1.0, 1.0], atol=1e-4)

    def test_merit_decreases_along_accepted_steps(self):
        def obj(w):
            d = w - [2.0, 1.0]
            return float(d @ d), 2 * d

        def ineq(w):
            return np.array([w @ w - 1.0]), 2 * w[None, :]

        res = sqp_solve(NlpProblem(2, obj, ineq=ineq), [0.1, -0.3])
        for r in res.trace[1:]:
            assert r["merit"] <= r["merit_start"] + 1e-12

    def test_trace_columns_and_timestamps(self):
        res = sqp_solve(NlpProblem(2, quad), [1.0, -2.0])
        for r in res.trace:
            assert set(TRACE_COLUMNS) <= set(r)
        t = [r["wall_time_s"] for r in res.trace]
        assert all(a <= b for a, b in zip(t, t[1:]))

    def test_reproducible(self):
        def ineq(w):
            return np.array([1.0 - w[0]]), np.array([[-1.0, 0.0]])

        a = sqp_solve(NlpProblem(2, quad, ineq=ineq), [3.0, 1.0])
        b = sqp_solve(NlpProblem(2, quad, ineq=ineq), [3.0, 1.0])
        np.testing.assert_array_equal(a.w, b.w)
        assert [r["f"] for r in a.trace] == [r["f"] for r in b.trace]

    def test_infeasible_linearization_fallback(self):
        # the constraint w^2 >= 4 linearizes badly at w = 0 (zero gradient)
        def ineq(w):
            return np.array([4.0 - w[0] ** 2]), np.array([[-2.0 * w[0]]])

        res = sqp_solve(NlpProblem(1, quad, ineq=ineq), [0.1])
        assert res.violation <= 1e-6
        assert_allclose(abs(res.w[0]), 2.0, atol=1e-6)

    def test_options(self):
        assert SqpOptions.from_dict({"max_iters": 5}).max_iters == 5
        with pytest.raises(ValueError):
            SqpOptions.from_dict({"bogus": 1})

    def test_eval_budget(self):
        res = sqp_solve(NlpProblem(2, rosenbrock), [-1.2, 1.0], SqpOptions(max_evals=3))
        assert res.evaluations <= 3
        assert res.reason == "eval_budget"

    def test_bad_start(self):
        with pytest.raises(ValueError):
            sqp_solve(NlpProblem(1, quad), [np.nan])

    def test_figure1_ilop(self):
        m = figure1_model()
        prob = IlopProblem(m, generate_observations(m, [[1.0]]), Loss.AOE)
        built = build_nlp(prob)
        res = sqp_solve(built.nlp, [0.5, 0.5], SqpOptions(f_target=1e-6))
        assert res.f <= 1e-6
        assert res.violation <= 1e-6
        # the first iterate violates target feasibility
        assert res.trace[0]["max_g"] > 0


class TestRandomSearch:
    def test_best_monotone(self):
        prob = NlpProblem(1, quad, lower=[-10.0], upper=[10.0])
        rng = np.random.default_rng(0)
        res = random_search(prob, lambda: rng.uniform(-10, 10, 1), max_evals=200)
        best = [r["best_f"] for r in res.trace]
        assert all(a >= b for a, b in zip(best, best[1:]))
        assert res.f == min(r["f"] for r in res.trace)
        assert len(res.trace) == 200

    def test_feasibility_first(self):
        def ineq(w):
            return np.array([1.0 - w[0]]), np.array([[-1.0]])

        prob = NlpProblem(1, quad, ineq=ineq)
        samples = iter([np.array([0.0]), np.array([3.0]), np.array([0.5])])
        res = random_search(prob, lambda: next(samples), max_evals=3)
        assert_allclose(res.w, [3.0])

    def test_figure1_mostly_infeasible(self):
        m = figure1_model()
        prob = IlopProblem(m, generate_observations(m, [[1.0]]))
        built = build_nlp(prob)
        sampler = m.admissible_set.sampler(np.random.default_rng(0))
        res = random_search(built.nlp, sampler, max_evals=200)
        infeasible = sum(r["violation"] > 1e-6 for r in res.trace)
        assert infeasible > 100

    def test_fixed_seed(self):
        prob = NlpProblem(2, quad)

        def run():
            rng = np.random.default_rng(3)
            return random_search(prob, lambda: rng.uniform(-1, 1, 2), max_evals=50).trace

        a, b = run(), run()
        assert [r["f"] for r in a] == [r["f"] for r in b]

    def test_needs_budget(self):
        with pytest.raises(ValueError):
            random_search(NlpProblem(1, quad), lambda: np.zeros(1))

    def test_target_stops(self):
        prob = NlpProblem(1, quad)
        rng = np.random.default_rng(0)
        res = random_search(prob, lambda: rng.uniform(-1, 1, 1), max_evals=10_000, f_target=1e-2)
        assert res.reason == "target"
        assert res.f <= 1e-2
