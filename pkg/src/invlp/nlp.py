"""Outer NLP solvers: an SLSQP-style SQP method and a random-search baseline.

Problems are posed as::

    minimize f(w)  s.t.  g(w) <= 0,  h(w) = 0,  lower <= w <= upper

and handed over as an :class:`NlpProblem` of callbacks.
"""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
import scipy.linalg

__all__ = [
    "NlpProblem",
    "QpResult",
    "solve_qp_subproblem",
    "SqpOptions",
    "SqpState",
    "SqpResult",
    "sqp_solve",
    "RandomSearchResult",
    "random_search",
    "GradientFreeSolver",
    "TRACE_COLUMNS",
]

TRACE_COLUMNS = ("iter", "wall_time_s", "f", "max_g", "norm_h", "step_alpha")


def _no_rows(dim):
    def cb(w):
        return np.zeros(0), np.zeros((0, dim))

    return cb


@dataclass
class NlpProblem:
    """Callbacks describing a smooth(ish) constrained problem.

    ``objective(w) -> (f, grad)``; ``ineq(w) -> (g, Jg)`` with ``g <= 0``
    meaning feasible; ``eq(w) -> (h, Jh)``. ``value`` may supply a cheaper
    objective without gradient (used by random search). ``monitor`` is
    called after each accepted SQP iterate and its dict is merged into the
    trace row.
    """

    dim: int
    objective: Callable[[np.ndarray], tuple[float, np.ndarray]]
    ineq: Callable | None = None
    eq: Callable | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    value: Callable[[np.ndarray], float] | None = None
    monitor: Callable[[], dict] | None = None

    def __post_init__(self):
        self.ineq = self.ineq or _no_rows(self.dim)
        self.eq = self.eq or _no_rows(self.dim)
        for name in ("lower", "upper"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.asarray(v, dtype=float).reshape(self.dim))

    def f(self, w) -> float:
        if self.value is not None:
            return float(self.value(w))
        return float(self.objective(w)[0])

    def bound_rows(self):
        eye = np.eye(self.dim)
        A, b = [], []
        if self.lower is not None:
            fin = np.isfinite(self.lower)
            A.append(-eye[fin])
            b.append(-self.lower[fin])
        if self.upper is not None:
            fin = np.isfinite(self.upper)
            A.append(eye[fin])
            b.append(self.upper[fin])
        if not A:
            return np.zeros((0, self.dim)), np.zeros(0)
        return np.vstack(A), np.concatenate(b)

    def constraints(self, w):
        """All inequality rows (bounds appended) and equality rows at ``w``."""
        g, Jg = self.ineq(w)
        Ab, bb = self.bound_rows()
        g = np.concatenate([np.asarray(g, float).ravel(), Ab @ w - bb])
        Jg = np.vstack([np.asarray(Jg, float).reshape(-1, self.dim), Ab])
        h, Jh = self.eq(w)
        return g, Jg, np.asarray(h, float).ravel(), np.asarray(Jh, float).reshape(-1, self.dim)

    def violation(self, w) -> float:
        g, _, h, _ = self.constraints(np.asarray(w, dtype=float))
        return max(float(np.maximum(g, 0.0).max(initial=0.0)), float(np.abs(h).max(initial=0.0)))


# -- QP subproblem ------------------------------------------------------------

@dataclass
class QpResult:
    delta: np.ndarray
    lam_ineq: np.ndarray
    lam_eq: np.ndarray
    status: str  # "optimal" or "infeasible"
    iterations: int
    relaxed: bool = False

    @property
    def infeasible(self) -> bool:
        return self.status == "infeasible"


class _Hinv:
    """``H^{-1}`` applications with per-row caching; ``H`` is fixed per QP."""

    def __init__(self, H):
        self.cho = scipy.linalg.cho_factor(H, lower=True, check_finite=False)
        self.cache: dict = {}

    def __call__(self, v):
        return scipy.linalg.cho_solve(self.cho, v, check_finite=False)

    def column(self, key, row):
        col = self.cache.get(key)
        if col is None:
            col = self(row)
            self.cache[key] = col
        return col


def _active_set(H, q, Ae, be, Ai, bi, x, max_iter, tol=1e-11):
    """Primal active-set method for ``min q^T x + x^T H x / 2`` from feasible ``x``.

    Equality-constrained steps use range-space solves with ``H^{-1}``
    (``H`` positive definite). Returns ``x, mu_eq, mu_ineq, iterations, ok``.
    """
    n = x.size
    me, mi = Ae.shape[0], Ai.shape[0]
    hinv = _Hinv(H)
    work: list[int] = []
    mu_e = np.zeros(me)
    mu_i = np.zeros(mi)
    scale_i = np.linalg.norm(Ai, axis=1) if mi else np.zeros(0)
    for it in range(1, max_iter + 1):
        grad = q + H @ x
        rows = [Ae] + ([Ai[work]] if work else [])
        Aw = np.vstack(rows) if (me or work) else np.zeros((0, n))
        Hg = hinv(grad)
        if Aw.shape[0] >= n:
            # working set spans the space: x is a vertex, only multipliers move
            mu = np.linalg.lstsq(Aw.T, -grad, rcond=None)[0]
            p = np.zeros(n)
        elif Aw.shape[0]:
            keys = [("e", k) for k in range(me)] + [("i", k) for k in work]
            HA = np.column_stack([hinv.column(k, r) for k, r in zip(keys, Aw)])
            S = Aw @ HA
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
                    mu = scipy.linalg.solve(S, -(Aw @ Hg), assume_a="sym", check_finite=False)
            except (np.linalg.LinAlgError, ValueError, scipy.linalg.LinAlgWarning):
                mu = np.linalg.lstsq(S, -(Aw @ Hg), rcond=None)[0]
            p = -(Hg + HA @ mu)
        else:
            mu = np.zeros(0)
            p = -Hg
        if np.linalg.norm(p) <= tol * (1.0 + np.linalg.norm(x)):
            mw = mu[me:]
            if mw.size and mw.min() < -1e-10 * (1.0 + np.abs(mu).max()):
                work.pop(int(np.argmin(mw)))
                continue
            mu_e[:] = mu[:me]
            mu_i[:] = 0.0
            if work:
                mu_i[work] = np.maximum(mw, 0.0)
            return x, mu_e, mu_i, it, True
        alpha, block = 1.0, -1
        if mi:
            ap = Ai @ p
            cand = ap > 1e-14 * scale_i * np.linalg.norm(p)
            if work:
                cand[work] = False
            if cand.any():
                slack = np.maximum(bi - Ai @ x, 0.0)
                ratios = np.full(mi, np.inf)
                ratios[cand] = slack[cand] / ap[cand]
                j = int(np.argmin(ratios))
                if ratios[j] < 1.0:
                    alpha, block = float(ratios[j]), j
        x = x + alpha * p
        if block >= 0:
            work.append(block)
    mu_e[:] = 0.0
    return x, mu_e, mu_i, max_iter, False


def solve_qp_subproblem(B, grad_f, G_ineq=None, g0=None, G_eq=None, h0=None,
                        max_iter: int | None = None, big_m: float | None = None) -> QpResult:
    """Solve ``min grad_f^T d + d^T B d  s.t.  G_ineq d + g0 <= 0,  G_eq d + h0 = 0``.

    A primal active-set method is started from the minimum-norm solution of
    the equalities. Inequality rows violated there are first relaxed with
    elastic variables under an exact L1 penalty ``big_m``; if the relaxation
    cannot be driven to zero the linearization is reported ``infeasible``
    and the returned step is the violation-reducing relaxed solution.

    Returns
    -------
    QpResult
        ``lam_ineq >= 0`` and ``lam_eq`` satisfy
        ``grad_f + 2 B d + G_ineq^T lam_ineq + G_eq^T lam_eq = 0`` at an
        optimal result.
    """
    B = np.asarray(B, dtype=float)
    n = B.shape[0]
    q = np.asarray(grad_f, dtype=float).reshape(n)
    Gi = np.zeros((0, n)) if G_ineq is None else np.asarray(G_ineq, float).reshape(-1, n)
    gi = np.zeros(0) if g0 is None else np.asarray(g0, float).ravel()
    Ge = np.zeros((0, n)) if G_eq is None else np.asarray(G_eq, float).reshape(-1, n)
    he = np.zeros(0) if h0 is None else np.asarray(h0, float).ravel()
    mi, me = Gi.shape[0], Ge.shape[0]
    H = B + B.T  # objective d^T B d has Hessian 2B
    max_iter = max_iter or 10 * (n + mi + me) + 50
    bi = -gi

    # independent equality rows and a point satisfying them
    if me:
        _, r_, piv = scipy.linalg.qr(Ge.T, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r_)) if r_.size else np.zeros(0)
        rank = int((diag > 1e-12 * max(1.0, diag.max(initial=0.0))).sum())
        keep = np.sort(piv[:rank])
        x0 = np.linalg.lstsq(Ge, -he, rcond=None)[0]
        eq_res = np.abs(Ge @ x0 + he).max()
        if eq_res > 1e-9 * (1.0 + np.abs(he).max()):
            # inconsistent equalities: least-squares step, no multipliers
            return QpResult(x0, np.zeros(mi), np.zeros(me), "infeasible", 0, relaxed=True)
        Ae, be = Ge[keep], -he[keep]
    else:
        keep = np.zeros(0, dtype=int)
        x0 = np.zeros(n)
        Ae, be = np.zeros((0, n)), np.zeros(0)

    viol = Gi @ x0 - bi if mi else np.zeros(0)
    feas_tol = 1e-10 * (1.0 + np.abs(bi).max(initial=0.0))
    bad = np.flatnonzero(viol > feas_tol)

    def finish(x, mu_e, mu_i, it, status, relaxed=False):
        lam_eq = np.zeros(me)
        lam_eq[keep] = mu_e
        return QpResult(x, mu_i, lam_eq, status, it, relaxed)

    if bad.size == 0:
        x, mu_e, mu_i, it, ok = _active_set(H, q, Ae, be, Gi, bi, x0, max_iter)
        return finish(x, mu_e, mu_i, it, "optimal" if ok else "infeasible", relaxed=not ok)

    # elastic phase: rows in `bad` may be violated by t >= 0 at cost big_m * sum(t)
    nb = bad.size
    m0 = big_m or 1e3 * max(1.0, np.abs(q).max(initial=0.0), np.abs(H).max())
    # unit curvature on t keeps the L1 penalty exact (t = 0 whenever the
    # required multiplier is below M) and S well conditioned
    gamma = max(1.0, float(np.abs(np.diag(H)).max()))
    He = scipy.linalg.block_diag(H, gamma * np.eye(nb))
    E = np.zeros((mi, nb))
    E[bad, np.arange(nb)] = -1.0
    Ai_el = np.vstack([np.hstack([Gi, E]), np.hstack([np.zeros((nb, n)), -np.eye(nb)])])
    bi_el = np.concatenate([bi, np.zeros(nb)])
    Ae_el = np.hstack([Ae, np.zeros((Ae.shape[0], nb))])
    total_it = 0
    M = m0
    for _ in range(4):
        q_el = np.concatenate([q, np.full(nb, M)])
        start = np.concatenate([x0, np.maximum(viol[bad], 0.0)])
        z, mu_e, mu_i, it, ok = _active_set(He, q_el, Ae_el, be, Ai_el, bi_el, start, max_iter)
        total_it += it
        x, t = z[:n], z[n:]
        if t.max() <= 1e-9 * (1.0 + np.abs(bi).max()):
            # relaxation vanished: polish on the original QP from this point
            x2, mu_e2, mu_i2, it2, ok2 = _active_set(H, q, Ae, be, Gi, bi, x, max_iter)
            return finish(x2, mu_e2, mu_i2, total_it + it2, "optimal" if ok2 else "infeasible",
                          relaxed=not ok2)
        M *= 100.0
    return finish(x, mu_e, mu_i[:mi], total_it, "infeasible", relaxed=True)


# -- SQP ----------------------------------------------------------------------

@dataclass(frozen=True)
class SqpOptions:
    max_iters: int = 200
    kkt_tol: float = 1e-7
    step_tol: float = 1e-10
    merit_rho0: float = 1.0
    alpha_floor: float = 1e-8
    armijo: float = 1e-4
    eig_floor: float = 1e-10
    feas_tol: float = 1e-6
    f_target: float | None = None
    time_budget_s: float | None = None
    max_evals: int | None = None
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict | None) -> "SqpOptions":
        d = dict(d or {})
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown solver options: {sorted(unknown)}")
        return cls(**known)


@dataclass
class SqpState:
    w: np.ndarray
    B: np.ndarray
    lam_g: np.ndarray
    lam_h: np.ndarray
    rho: float
    iteration: int = 0
    kkt_met: bool = False
    step_tol_met: bool = False
    max_iters_hit: bool = False


@dataclass
class SqpResult:
    w: np.ndarray
    f: float
    violation: float
    state: SqpState
    reason: str
    trace: list = field(default_factory=list)
    evaluations: int = 0

    @property
    def success(self) -> bool:
        return self.reason in ("kkt", "target", "step")


class _Budget(Exception):
    pass


def _spectrum_ok(B, floor):
    """``(ok, min_eig)``: eigenvalues at least ``floor`` and condition below 1e12."""
    if not np.all(np.isfinite(B)):
        return False, math.nan
    if B.shape[0] <= 200:
        ev = np.linalg.eigvalsh(B)
        return bool(ev[0] >= floor and ev[0] >= 1e-12 * ev[-1]), float(ev[0])
    try:
        L = np.linalg.cholesky(B)
    except np.linalg.LinAlgError:
        return False, math.nan
    d = np.diag(L) ** 2  # bounds, not eigenvalues, for large B
    return bool(d.min() >= floor and d.min() >= 1e-12 * d.max()), float(d.min())


class _SqpRun:
    def __init__(self, problem: NlpProblem, opts: SqpOptions, w):
        self.problem, self.opts = problem, opts
        self.n = problem.dim
        self.t0 = time.perf_counter()
        self.evals = 0
        self.trace: list[dict] = []
        self.best_key = None
        self.w = w
        self.f, self.gf = self.objective(w)
        self.g, self.Jg, self.h, self.Jh = problem.constraints(w)
        self.state = SqpState(w, np.eye(self.n), np.zeros(self.g.size), np.zeros(self.h.size),
                              float(opts.merit_rho0))

    def objective(self, v):
        opts = self.opts
        if opts.max_evals is not None and self.evals >= opts.max_evals:
            raise _Budget("eval_budget")
        if opts.time_budget_s is not None and time.perf_counter() - self.t0 > opts.time_budget_s:
            raise _Budget("time_budget")
        self.evals += 1
        f, gr = self.problem.objective(v)
        return float(f), np.asarray(gr, dtype=float).reshape(self.n)

    @staticmethod
    def l1(g, h):
        return float(np.maximum(g, 0.0).sum() + np.abs(h).sum())

    @staticmethod
    def vmax(g, h):
        return max(float(np.maximum(g, 0.0).max(initial=0.0)), float(np.abs(h).max(initial=0.0)))

    def merit(self, f, g, h):
        return f + self.state.rho * self.l1(g, h)

    def consider(self, merit):
        v = self.vmax(self.g, self.h)
        key = (0, self.f) if v <= self.opts.feas_tol else (1, merit)
        if self.best_key is None or key < self.best_key:
            self.best_key = key
            self.best = (self.w.copy(), self.f, v)

    def record(self, alpha, merit, kkt, min_eig, merit_start=math.nan):
        row = {
            "iter": self.state.iteration,
            "wall_time_s": time.perf_counter() - self.t0,
            "f": self.f,
            "max_g": float(np.maximum(self.g, 0.0).max(initial=0.0)),
            "norm_h": float(np.linalg.norm(self.h)),
            "step_alpha": alpha,
            "merit": merit,
            "merit_start": merit_start,
            "kkt": kkt,
            "min_eig_B": min_eig,
            "rho": self.state.rho,
            "evals": self.evals,
        }
        if self.problem.monitor is not None:
            row.update(self.problem.monitor())
        self.trace.append(row)

    def target_met(self):
        t = self.opts.f_target
        return t is not None and self.f <= t and self.vmax(self.g, self.h) <= self.opts.feas_tol

    def run(self) -> str:
        opts, state, n = self.opts, self.state, self.n
        merit = self.merit(self.f, self.g, self.h)
        self.consider(merit)
        self.record(0.0, merit, math.nan, 1.0)
        if self.target_met():
            return "target"
        B = state.B
        for k in range(1, opts.max_iters + 1):
            w, f, gf, g, Jg, h, Jh = self.w, self.f, self.gf, self.g, self.Jg, self.h, self.Jh
            qp = solve_qp_subproblem(0.5 * B, gf, Jg, g, Jh, h)
            d, lam_g, lam_h = qp.delta, qp.lam_ineq, qp.lam_eq
            lag_grad = gf + Jg.T @ lam_g + Jh.T @ lam_h
            kkt = max(float(np.abs(lag_grad).max(initial=0.0)), self.vmax(g, h),
                      float(np.abs(lam_g * g).max(initial=0.0)))
            if not qp.infeasible and kkt <= opts.kkt_tol:
                state.kkt_met = True
                return "kkt"
            lam_norm = max(float(np.abs(lam_g).max(initial=0.0)),
                           float(np.abs(lam_h).max(initial=0.0)))
            if qp.infeasible:
                state.rho = max(10.0 * state.rho, 1.0)
            elif state.rho < 1.1 * lam_norm:
                state.rho = max(2.0 * lam_norm, 1.1 * state.rho)
            rho = state.rho
            phi = f + rho * self.l1(g, h)
            # directional derivative of the merit along d (linearized violation)
            dphi = float(gf @ d) + rho * (self.l1(g + Jg @ d, h + Jh @ d) - self.l1(g, h))
            alpha = 1.0
            accepted = False
            while alpha >= opts.alpha_floor:
                w_new = w + alpha * d
                f_new, gf_new = self.objective(w_new)
                g_new, Jg_new, h_new, Jh_new = self.problem.constraints(w_new)
                phi_new = f_new + rho * self.l1(g_new, h_new)
                if np.isfinite(phi_new) and phi_new <= phi + opts.armijo * alpha * min(dphi, 0.0):
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                state.iteration = k
                if not np.array_equal(B, np.eye(n)):
                    B = state.B = np.eye(n)
                    continue
                return "line_search"
            s = w_new - w
            # Powell-damped BFGS on the Lagrangian gradient
            yv = (gf_new + Jg_new.T @ lam_g + Jh_new.T @ lam_h) - lag_grad
            Bs = B @ s
            sBs = float(s @ Bs)
            if sBs > 1e-300:
                sy = float(s @ yv)
                theta = 1.0 if sy >= 0.2 * sBs else 0.8 * sBs / (sBs - sy)
                r = theta * yv + (1.0 - theta) * Bs
                sr = float(s @ r)
                if sr > 1e-300:
                    B = B - np.outer(Bs, Bs) / sBs + np.outer(r, r) / sr
                    B = 0.5 * (B + B.T)
            ok, min_eig = _spectrum_ok(B, opts.eig_floor)
            if not ok:
                B = np.eye(n)
                min_eig = 1.0
            self.w, self.f, self.gf = w_new, f_new, gf_new
            self.g, self.Jg, self.h, self.Jh = g_new, Jg_new, h_new, Jh_new
            state.w, state.B, state.lam_g, state.lam_h, state.iteration = w_new, B, lam_g, lam_h, k
            self.consider(phi_new)
            self.record(alpha, phi_new, kkt, min_eig, phi)
            if self.target_met():
                return "target"
            if np.linalg.norm(alpha * d) <= opts.step_tol:
                state.step_tol_met = True
                return "step"
        state.max_iters_hit = True
        return "max_iters"


def sqp_solve(problem: NlpProblem, w0, opts: SqpOptions | None = None) -> SqpResult:
    """SQP with damped BFGS and a backtracking L1-merit line search.

    Each iteration solves ``min grad_f^T d + d^T (B/2) d`` under the
    linearized constraints, so ``B`` approximates the Lagrangian Hessian.
    The trace has one row per accepted iterate with the columns of
    ``TRACE_COLUMNS`` plus ``merit`` (and ``merit_start``, the merit before
    the step under the same penalty), ``kkt``, ``min_eig_B``, ``rho`` and the
    cumulative objective ``evals``. The returned iterate is the best one
    seen: feasible iterates by ``f``, then infeasible ones by merit.
    """
    opts = opts or SqpOptions()
    w = np.asarray(w0, dtype=float).reshape(problem.dim).copy()
    if not np.all(np.isfinite(w)):
        raise ValueError("w0 must be finite")
    run = _SqpRun(problem, opts, w)
    try:
        reason = run.run()
    except _Budget as exc:
        reason = str(exc)
    w_best, f_best, v_best = run.best
    return SqpResult(w_best, float(f_best), float(v_best), run.state, reason, run.trace, run.evals)


# -- random search ------------------------------------------------------------

@dataclass
class RandomSearchResult:
    w: np.ndarray
    f: float
    violation: float
    trace: list
    evaluations: int
    reason: str


def random_search(problem: NlpProblem, sampler: Callable[[], np.ndarray],
                  time_budget: float | None = None, max_evals: int | None = None,
                  feas_tol: float = 1e-6, f_target: float | None = None) -> RandomSearchResult:
    """Uniform random search ranked by (feasibility violation, objective).

    Violations below ``feas_tol`` count as zero so feasible points are then
    ranked by ``f`` alone. At least one of the budgets must be given.
    """
    if time_budget is None and max_evals is None:
        raise ValueError("random_search needs a time or evaluation budget")
    t0 = time.perf_counter()
    trace = []
    best_key, best = None, None
    n_eval = 0
    reason = "eval_budget"
    while True:
        if max_evals is not None and n_eval >= max_evals:
            break
        if time_budget is not None and time.perf_counter() - t0 > time_budget:
            reason = "time_budget"
            break
        w = np.asarray(sampler(), dtype=float)
        f = problem.f(w)
        v = problem.violation(w)
        n_eval += 1
        key = (max(v - feas_tol, 0.0), f)
        if best_key is None or key < best_key:
            best_key, best = key, (w.copy(), f, v)
        trace.append({
            "iter": n_eval, "wall_time_s": time.perf_counter() - t0, "f": f, "violation": v,
            "best_f": best[1], "best_violation": best[2],
        })
        if f_target is not None and best[1] <= f_target and best[2] <= feas_tol:
            reason = "target"
            break
    if best is None:
        raise ValueError("random search budget allowed no evaluations")
    return RandomSearchResult(best[0], float(best[1]), float(best[2]), trace, n_eval, reason)


class GradientFreeSolver(Protocol):
    """Interface for additional derivative-free baselines."""

    def __call__(self, problem: NlpProblem, sampler: Callable[[], np.ndarray],
                 time_budget: float | None, max_evals: int | None) -> RandomSearchResult: ...
