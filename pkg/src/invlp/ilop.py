"""The bi-level learning problem and its outer constraints.

An :class:`IlopProblem` couples a :class:`~invlp.models.ParametricModel` with
training observations. Its outer objective is the mean inner-LP loss plus a
ridge term; target feasibility (each observed decision must be feasible in
the learned LP) becomes constraints on ``w``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from . import ipm
from .grad import (
    IllConditionedKKT,
    Loss,
    Method,
    aoe_coefficient_grads,
    aoe_implicit_grads,
    loss_of,
    objective_error,
    sde_implicit_grads,
)
from .lp import LinearProgram, PrimalDualSolution, Status
from .models import Observation, ParametricModel, build_model
from .nlp import NlpProblem

__all__ = [
    "IlopProblem",
    "ModelMisspecification",
    "StackedOuterConstraints",
    "ReducedParametrization",
    "loss_value",
    "true_cost_objective_error",
    "outer_objective",
    "stack_outer_constraints",
    "reduce_equalities",
    "detect_redundant_inequalities",
    "build_nlp",
    "IlopNlp",
    "load_problem_config",
]

LARGE_LOSS_CAP = 1e6


class ModelMisspecification(ValueError):
    """A target-feasibility row that does not depend on ``w`` is violated."""

    def __init__(self, sample: int, row: int, kind: str, residual: float):
        super().__init__(
            f"model misspecification: {kind} row {row} of sample {sample} is independent of w "
            f"and violated by the data (residual {residual:.3g})"
        )
        self.sample, self.row, self.kind = sample, row, kind


@dataclass(frozen=True, eq=False)
class ReducedParametrization:
    """``w(w') = offset + P w'`` spanning the least-squares solutions of ``G w = h``."""

    P: np.ndarray
    offset: np.ndarray

    @property
    def K(self) -> int:
        return self.P.shape[0]

    @property
    def K_reduced(self) -> int:
        return self.P.shape[1]

    def full(self, w_red) -> np.ndarray:
        return self.offset + self.P @ np.asarray(w_red, dtype=float)

    def reduce(self, w) -> np.ndarray:
        """Least-squares ``w'`` with ``P w' = w - offset``."""
        return np.linalg.lstsq(self.P, np.asarray(w, dtype=float) - self.offset, rcond=None)[0]

    @classmethod
    def identity(cls, K: int) -> "ReducedParametrization":
        return cls(np.eye(K), np.zeros(K))


@dataclass
class IlopProblem:
    """Training data, loss and regularizer of one inverse-LP instance.

    ``method`` selects the gradient route; ``None`` picks direct gradients
    for AOE and implicit ones for SDE.
    """

    model: ParametricModel
    train_set: list
    loss: Loss = Loss.AOE
    regularizer_weight: float = 0.0
    large_loss_cap: float = LARGE_LOSS_CAP
    reduced: ReducedParametrization | None = None
    method: Method | None = None
    settings: ipm.IpmSettings = field(default_factory=lambda: ipm.IpmSettings.tight(1e-9))
    fd_step: float = 1e-6

    def __post_init__(self):
        self.loss = Loss(self.loss)
        obs = []
        for o in self.train_set:
            if not isinstance(o, Observation):
                u, x = o
                o = Observation(np.asarray(u, float).reshape(self.model.dim_u),
                                np.asarray(x, float))
            if o.x_obs.shape != (self.model.D,):
                raise ValueError(f"x_obs must have length {self.model.D}, got {o.x_obs.shape}")
            obs.append(o)
        if not obs:
            raise ValueError("training set must contain at least one observation")
        self.train_set = obs
        if self.regularizer_weight < 0:
            raise ValueError("regularizer_weight must be non-negative")
        if self.method is None:
            self.method = Method.DIRECT if self.loss is Loss.AOE else Method.IMPLICIT
        self.method = Method(self.method)
        if self.method is Method.DIRECT and self.loss is Loss.SDE:
            raise ValueError("direct gradients exist only for the objective-error loss")

    @property
    def N(self) -> int:
        return len(self.train_set)

    @property
    def dim(self) -> int:
        return self.model.K if self.reduced is None else self.reduced.K_reduced

    def full_w(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if w.shape != (self.dim,):
            raise ValueError(f"w must have length {self.dim}, got {w.shape}")
        return w if self.reduced is None else self.reduced.full(w)

    def lps(self, w_full) -> list[LinearProgram]:
        out = []
        for i, o in enumerate(self.train_set):
            try:
                out.append(self.model.coeffs(o.u, w_full))
            except Exception as exc:
                raise RuntimeError(f"model evaluation failed for sample {i}: {exc}") from exc
        return out


def loss_value(sol: PrimalDualSolution, x_obs, lp: LinearProgram, loss=Loss.AOE,
               large_loss_cap: float = LARGE_LOSS_CAP) -> float:
    """Training loss of one sample, using the imputed cost ``lp.c``.

    For a non-optimal status the formula is applied to whatever ``x`` the
    solver returned and clipped to ``large_loss_cap``.
    """
    val = loss_of(lp, sol.x, x_obs, Loss(loss))
    if sol.status is Status.OPTIMAL:
        return val
    if not np.isfinite(val):
        return float(large_loss_cap)
    return float(min(val, large_loss_cap))


def true_cost_objective_error(model: ParametricModel, w, observations: Sequence[Observation],
                              true_w=None, settings: ipm.IpmSettings | None = None,
                              large_loss_cap: float = LARGE_LOSS_CAP) -> np.ndarray:
    """Per-point AOE of the decisions predicted at ``w``, measured with the true cost.

    ``x*`` comes from the LP at the learned ``w``; the error uses
    ``c(u, true_w)``, never the imputed cost.
    """
    true_w = model.true_w if true_w is None else np.asarray(true_w, float)
    if true_w is None:
        raise ValueError("true cost needs true_w")
    settings = settings or ipm.IpmSettings.tight(1e-9)
    out = np.empty(len(observations))
    for i, o in enumerate(observations):
        sol = ipm.solve(model.coeffs(o.u, w), settings)
        c_true = model.coeffs(o.u, true_w).c
        val = abs(float(c_true @ (o.x_obs - sol.x)))
        if not sol.optimal:
            val = large_loss_cap if not np.isfinite(val) else min(val, large_loss_cap)
        out[i] = val
    return out


def _sample_gradient(problem: IlopProblem, lp, sol, obs, w_full):
    method = problem.method
    if method is Method.DIRECT:
        grads = aoe_coefficient_grads(lp, sol, obs.x_obs, warn_degenerate=False)
        return problem.model.coeff_jacobians(obs.u, w_full).contract(grads), False
    try:
        if problem.loss is Loss.AOE:
            grads = aoe_implicit_grads(lp, sol, obs.x_obs)
        else:
            grads = sde_implicit_grads(lp, sol, obs.x_obs)
    except IllConditionedKKT:
        if problem.loss is Loss.SDE:
            return np.zeros(w_full.size), True
        grads = aoe_coefficient_grads(lp, sol, obs.x_obs, warn_degenerate=False)
        return problem.model.coeff_jacobians(obs.u, w_full).contract(grads), True
    return problem.model.coeff_jacobians(obs.u, w_full).contract(grads), False


def _losses(problem: IlopProblem, w_full):
    lps = problem.lps(w_full)
    sols = ipm.solve_batch(lps, problem.settings)
    losses = np.empty(problem.N)
    for i, (lp, sol, o) in enumerate(zip(lps, sols, problem.train_set)):
        if isinstance(sol, Exception):
            raise RuntimeError(f"inner solve failed for sample {i}: {sol}") from sol
        losses[i] = loss_value(sol, o.x_obs, lp, problem.loss, problem.large_loss_cap)
    return lps, sols, losses


def outer_value(problem: IlopProblem, w) -> float:
    """Outer objective without its gradient."""
    w_full = problem.full_w(w)
    _, _, losses = _losses(problem, w_full)
    return float(losses.mean() + problem.regularizer_weight * (w_full @ w_full))


def outer_objective(problem: IlopProblem, w):
    """Mean training loss plus ridge term, with gradient.

    Inner LPs are solved as a batch; per-sample gradients are summed in
    sample order so the result does not depend on threading. Samples whose
    LP is not optimal contribute their clipped loss and no gradient.

    Returns
    -------
    f : float
    grad : ndarray
        Length ``problem.dim`` (reduced coordinates when a reduction is set).
    diagnostics : list of dict
        Per sample: ``status``, ``loss``, ``z`` (objective error) and
        ``fallback`` (implicit route fell back to the direct formula).
    """
    w_full = problem.full_w(w)
    K = problem.model.K
    if problem.method is Method.FINITE_DIFFERENCE:
        f = outer_value(problem, w)
        grad = np.empty(problem.dim)
        for j in range(problem.dim):
            e = np.zeros(problem.dim)
            e[j] = problem.fd_step
            grad[j] = (outer_value(problem, w + e) - outer_value(problem, w - e)) / (2 * problem.fd_step)
        return f, grad, [{"method": "fd"}]
    lps, sols, losses = _losses(problem, w_full)
    grad_full = np.zeros(K)
    diagnostics = []
    for i, (lp, sol, o) in enumerate(zip(lps, sols, problem.train_set)):
        z = objective_error(lp, sol.x, o.x_obs)
        info = {"status": sol.status.value, "loss": float(losses[i]), "z": z, "fallback": False}
        if sol.optimal:
            g_i, fell_back = _sample_gradient(problem, lp, sol, o, w_full)
            grad_full += g_i
            info["fallback"] = fell_back
        diagnostics.append(info)
    rw = problem.regularizer_weight
    f = float(losses.mean() + rw * (w_full @ w_full))
    grad_full = grad_full / problem.N + 2.0 * rw * w_full
    if problem.reduced is not None:
        grad_full = problem.reduced.P.T @ grad_full
    return f, grad_full, diagnostics


# -- outer constraints --------------------------------------------------------

@dataclass(eq=False)
class StackedOuterConstraints:
    """Target-feasibility rows ``A_tilde w <= b_tilde`` and ``G_tilde w = h_tilde``.

    ``row_provenance`` / ``eq_provenance`` hold ``(sample, row)`` pairs.
    ``nonlinear_rows`` lists callbacks ``w -> (residual, jacobian)`` for
    rows that are not affine in ``w``; they are empty for affine models.
    """

    A_tilde: np.ndarray
    b_tilde: np.ndarray
    G_tilde: np.ndarray
    h_tilde: np.ndarray
    row_provenance: list
    eq_provenance: list
    nonlinear_rows: list = field(default_factory=list)
    nonlinear_eq_rows: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.A_tilde.shape[1]

    def inequality_residual(self, w) -> np.ndarray:
        return self.A_tilde @ w - self.b_tilde

    def equality_residual(self, w) -> np.ndarray:
        return self.G_tilde @ w - self.h_tilde


def _dedup(M, r, prov):
    if M.shape[0] == 0:
        return M, r, prov
    _, first = np.unique(np.column_stack([M, r]), axis=0, return_index=True)
    keep = np.sort(first)
    return M[keep], r[keep], [prov[k] for k in keep]


def _nonlinear_row(model, u, x, kind, row):
    def cb(w):
        lp = model.coeffs(u, w)
        s = model.coeff_jacobians(u, w)
        if kind == "ineq":
            res = lp.A[row] @ x - lp.b[row]
            jac = np.einsum("dk,d->k", s.dA[row], x) - s.db[row]
        else:
            res = lp.G[row] @ x - lp.h[row]
            jac = np.einsum("dk,d->k", s.dG[row], x) - s.dh[row]
        return float(res), jac

    return cb


def stack_outer_constraints(problem: IlopProblem, check_tol: float = 1e-7) -> StackedOuterConstraints:
    """Assemble target-feasibility rows over all training samples.

    Rows whose coefficients do not depend on ``w`` are checked against the
    data and dropped; a violated one raises :class:`ModelMisspecification`.
    For affine models the remaining rows are materialized at ``w = 0`` with
    the coefficient sensitivities; bitwise-identical rows are removed
    keeping the first occurrence.
    """
    model = problem.model
    K = model.K
    A_rows, b_rows, prov = [], [], []
    G_rows, h_rows, eq_prov = [], [], []
    nonlinear, nonlinear_eq = [], []
    w0 = np.zeros(K)
    for i, o in enumerate(problem.train_set):
        x = o.x_obs
        dep_in = model.ineq_depends_on_w(o.u)
        dep_eq = model.eq_depends_on_w(o.u)
        lp0 = model.coeffs(o.u, w0)
        r_in = lp0.A @ x - lp0.b
        r_eq = lp0.G @ x - lp0.h
        for r in np.flatnonzero(~dep_in):
            if r_in[r] > check_tol * (1.0 + abs(lp0.b[r])):
                raise ModelMisspecification(i, int(r), "inequality", float(r_in[r]))
        for r in np.flatnonzero(~dep_eq):
            if abs(r_eq[r]) > check_tol * (1.0 + abs(lp0.h[r])):
                raise ModelMisspecification(i, int(r), "equality", float(r_eq[r]))
        if not (dep_in.any() or dep_eq.any()):
            continue
        if not model.constraints_affine:
            nonlinear += [_nonlinear_row(model, o.u, x, "ineq", int(r)) for r in np.flatnonzero(dep_in)]
            nonlinear_eq += [_nonlinear_row(model, o.u, x, "eq", int(r)) for r in np.flatnonzero(dep_eq)]
            prov += [(i, int(r)) for r in np.flatnonzero(dep_in)]
            eq_prov += [(i, int(r)) for r in np.flatnonzero(dep_eq)]
            continue
        s = model.coeff_jacobians(o.u, w0)
        for r in np.flatnonzero(dep_in):
            A_rows.append(np.einsum("dk,d->k", s.dA[r], x) - s.db[r])
            b_rows.append(-r_in[r])
            prov.append((i, int(r)))
        for r in np.flatnonzero(dep_eq):
            G_rows.append(np.einsum("dk,d->k", s.dG[r], x) - s.dh[r])
            h_rows.append(-r_eq[r])
            eq_prov.append((i, int(r)))
    A = np.array(A_rows).reshape(-1, K)
    b = np.array(b_rows, dtype=float)
    G = np.array(G_rows).reshape(-1, K)
    h = np.array(h_rows, dtype=float)
    if model.constraints_affine:
        A, b, prov = _dedup(A, b, prov)
        G, h, eq_prov = _dedup(G, h, eq_prov)
    return StackedOuterConstraints(A, b, G, h, prov, eq_prov, nonlinear, nonlinear_eq)


def reduce_equalities(stacked: StackedOuterConstraints, w_ini=None, G_extra=None, h_extra=None):
    """Eliminate affine equalities ``G w = h`` through a pseudoinverse chart.

    ``G_extra``/``h_extra`` append further equalities (e.g. those of the
    admissible set). ``P`` consists of linearly independent columns of the
    projector ``I - G^+ G`` chosen by pivoted QR.

    Returns
    -------
    reduction : ReducedParametrization
    A_red, b_red : ndarray
        ``A_tilde P`` and ``b_tilde - A_tilde G^+ h``.
    w_red_ini : ndarray or None
    """
    if stacked.nonlinear_eq_rows:
        raise ValueError("equality rows are not affine in w; keep them as SQP constraints instead")
    K = stacked.K
    G, h = stacked.G_tilde, stacked.h_tilde
    if G_extra is not None and np.size(G_extra):
        G = np.vstack([G, np.asarray(G_extra, float).reshape(-1, K)])
        h = np.concatenate([h, np.asarray(h_extra, float).ravel()])
    if G.shape[0] == 0:
        red = ReducedParametrization.identity(K)
    else:
        Gp = np.linalg.pinv(G)
        offset = Gp @ h
        proj = np.eye(K) - Gp @ G
        rank = np.linalg.matrix_rank(G)
        k_red = K - rank
        if k_red == 0:
            P = np.zeros((K, 0))
        else:
            _, _, piv = scipy.linalg.qr(proj, pivoting=True)
            P = proj[:, np.sort(piv[:k_red])]
        red = ReducedParametrization(P, offset)
    A_red = stacked.A_tilde @ red.P
    b_red = stacked.b_tilde - stacked.A_tilde @ red.offset
    w_red = None if w_ini is None else red.reduce(w_ini)
    return red, A_red, b_red, w_red


def detect_redundant_inequalities(A, b, budget: int | None = None, tol: float = 1e-9,
                                  settings: ipm.IpmSettings | None = None) -> np.ndarray:
    """Mask of rows of ``A w <= b`` implied by the others.

    Row ``j`` is tested by minimizing its slack ``b_j - a_j^T w`` over the
    other rows not yet marked; it is redundant when that minimum is
    non-negative (up to ``tol``). Testing stops after ``budget`` rows.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    m = A.shape[0]
    mask = np.zeros(m, dtype=bool)
    budget = m if budget is None else min(int(budget), m)
    settings = settings or ipm.IpmSettings.tight(1e-10)
    for j in range(budget):
        others = np.flatnonzero(~mask)
        others = others[others != j]
        lp = LinearProgram(-A[j], A[others], b[others])
        sol = ipm.solve(lp, settings)
        if sol.status is not Status.OPTIMAL:
            continue  # unbounded slack (or empty remainder): keep the row
        if b[j] + sol.objective >= -tol * (1.0 + abs(b[j])):
            mask[j] = True
    return mask


# -- NLP assembly -------------------------------------------------------------

@dataclass(eq=False)
class IlopNlp:
    """An :class:`NlpProblem` for an ILOP plus the pieces it was built from."""

    nlp: NlpProblem
    problem: IlopProblem
    stacked: StackedOuterConstraints
    reduction: ReducedParametrization | None
    A_out: np.ndarray
    b_out: np.ndarray
    redundant: np.ndarray
    to_full: Callable
    last: dict = field(default_factory=dict)

    def full_w(self, w) -> np.ndarray:
        return self.to_full(w)

    def from_full(self, w_full) -> np.ndarray:
        if self.reduction is None:
            return np.asarray(w_full, dtype=float)
        return self.reduction.reduce(w_full)

    def outer_violation(self, w) -> float:
        return self.nlp.violation(np.asarray(w, dtype=float))


def build_nlp(problem: IlopProblem, reduction: bool = True, redundancy_budget: int = 0,
              stacked: StackedOuterConstraints | None = None) -> IlopNlp:
    """Outer NLP over ``w``: target feasibility plus the admissible set.

    With ``reduction`` the affine equalities (stacked ones and those of the
    admissible set) are eliminated and the NLP lives in ``w'`` coordinates.
    ``problem.reduced`` is set accordingly. ``redundancy_budget`` rows of the
    inequality block are screened for redundancy and dropped.
    """
    stacked = stacked if stacked is not None else stack_outer_constraints(problem)
    W = problem.model.admissible_set
    K = problem.model.K
    A_w, b_w = W.inequality_rows()
    A_all = np.vstack([stacked.A_tilde, A_w])
    b_all = np.concatenate([stacked.b_tilde, b_w])
    affine = problem.model.constraints_affine and not stacked.nonlinear_rows
    red = None
    if reduction and affine and not stacked.nonlinear_eq_rows:
        joint = StackedOuterConstraints(A_all, b_all, stacked.G_tilde, stacked.h_tilde,
                                        [], [])
        red, A_out, b_out, _ = reduce_equalities(joint, None, W.G, W.h)
        G_out, h_out = np.zeros((0, red.K_reduced)), np.zeros(0)
        problem.reduced = red
    else:
        problem.reduced = None
        A_out, b_out = A_all, b_all
        G_out = np.vstack([stacked.G_tilde, W.G])
        h_out = np.concatenate([stacked.h_tilde, W.h])
    redundant = np.zeros(A_out.shape[0], dtype=bool)
    if redundancy_budget and A_out.shape[0]:
        redundant = detect_redundant_inequalities(A_out, b_out, redundancy_budget)
        A_out, b_out = A_out[~redundant], b_out[~redundant]
    dim = problem.dim
    last: dict = {}

    def to_full(w):
        return problem.full_w(np.asarray(w, dtype=float))

    def objective(w):
        f, g, diag = outer_objective(problem, np.asarray(w, dtype=float))
        last["diagnostics"] = diag
        return f, g

    def ineq(w):
        w = np.asarray(w, dtype=float)
        res, jac = [A_out @ w - b_out], [A_out]
        if stacked.nonlinear_rows:
            wf = to_full(w)
            Pm = np.eye(K) if problem.reduced is None else problem.reduced.P
            for cb in stacked.nonlinear_rows:
                r, j = cb(wf)
                res.append(np.array([r]))
                jac.append((j @ Pm)[None, :])
        return np.concatenate(res), np.vstack(jac)

    def eq(w):
        w = np.asarray(w, dtype=float)
        res, jac = [G_out @ w - h_out], [G_out]
        for cb in stacked.nonlinear_eq_rows:
            r, j = cb(to_full(w))
            res.append(np.array([r]))
            jac.append(j[None, :])
        return np.concatenate(res), np.vstack(jac)

    prev_sign: dict = {"s": None}

    def monitor():
        diag = last.get("diagnostics") or []
        signs = np.array([np.sign(d.get("z", 0.0)) for d in diag])
        flips = 0
        if prev_sign["s"] is not None and prev_sign["s"].shape == signs.shape:
            flips = int((signs != prev_sign["s"]).sum())
        prev_sign["s"] = signs
        return {"z_sign_flips": flips}

    nlp = NlpProblem(dim, objective, ineq=ineq, eq=eq,
                     value=lambda w: outer_value(problem, np.asarray(w, dtype=float)),
                     monitor=monitor)
    return IlopNlp(nlp, problem, stacked, red, A_out, b_out, redundant, to_full, last)


def load_problem_config(path_or_dict, observations: Sequence[Observation] | None = None):
    """``{family, params, loss, regularizer_weight, reduction}`` to ``(IlopProblem, reduction)``."""
    cfg = path_or_dict
    if not isinstance(cfg, dict):
        with open(cfg) as fh:
            cfg = json.load(fh)
    model = build_model(cfg["family"], **cfg.get("params", {}))
    if observations is None:
        raise ValueError("observations are required")
    red = cfg.get("reduction", "on")
    if red not in ("on", "off", True, False):
        raise ValueError("reduction must be 'on' or 'off'")
    problem = IlopProblem(model, list(observations), Loss(cfg.get("loss", "aoe")),
                          float(cfg.get("regularizer_weight", 0.0)))
    return problem, red in ("on", True)
