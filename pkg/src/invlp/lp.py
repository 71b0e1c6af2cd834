"""Dense LP containers, KKT checking and a brute-force vertex oracle.

Every LP here has the form::

    min  c^T x
    s.t. A x <= b
         G x  = h

with ``x`` free in sign. Inequality duals follow the ``lam <= 0`` convention,
so stationarity reads ``A^T lam + G^T nu = c``.
"""
from __future__ import annotations

import enum
import itertools
import json
from dataclasses import dataclass, field
from math import comb
from pathlib import Path
from typing import Any

import numpy as np

__all__ = [
    "Status",
    "LinearProgram",
    "PrimalDualSolution",
    "KktResiduals",
    "DegeneracyReport",
    "check_kkt",
    "degeneracy_report",
    "vertex_enumeration_solve",
    "random_feasible_lp",
    "load_lp",
    "save_lp",
]


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    PRIMAL_INFEASIBLE = "PrimalInfeasible"
    DUAL_INFEASIBLE_UNBOUNDED = "DualInfeasibleUnbounded"
    ITERATION_LIMIT = "IterationLimit"
    NUMERICAL_FAILURE = "NumericalFailure"


def _as_matrix(a, ncols: int, name: str) -> np.ndarray:
    if a is None:
        return np.zeros((0, ncols))
    a = np.array(a, dtype=float)
    if a.size == 0:
        return np.zeros((0, ncols))
    if a.ndim == 1 and ncols == 1:
        a = a.reshape(-1, 1)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def _as_vector(v, name: str) -> np.ndarray:
    if v is None:
        return np.zeros(0)
    v = np.array(v, dtype=float).reshape(-1)
    return v


@dataclass(frozen=True, eq=False)
class LinearProgram:
    """Coefficients ``(c, A, b, G, h)`` of one LP instance.

    ``A``/``b`` or ``G``/``h`` may be omitted (``None``), giving zero rows.
    Arrays are copied, converted to float and marked read-only.
    """

    c: np.ndarray
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    G: np.ndarray | None = None
    h: np.ndarray | None = None

    def __post_init__(self):
        c = _as_vector(self.c, "c")
        D = c.shape[0]
        if D == 0:
            raise ValueError("c must have at least one entry")
        A = _as_matrix(self.A, D, "A")
        b = _as_vector(self.b, "b")
        G = _as_matrix(self.G, D, "G")
        h = _as_vector(self.h, "h")
        if A.shape[1] != D or G.shape[1] != D:
            raise ValueError(
                f"constraint matrices need {D} columns, got A {A.shape}, G {G.shape}"
            )
        if A.shape[0] != b.shape[0]:
            raise ValueError(f"A has {A.shape[0]} rows but b has {b.shape[0]} entries")
        if G.shape[0] != h.shape[0]:
            raise ValueError(f"G has {G.shape[0]} rows but h has {h.shape[0]} entries")
        for name, arr in (("c", c), ("A", A), ("b", b), ("G", G), ("h", h)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def D(self) -> int:
        return self.c.shape[0]

    @property
    def M1(self) -> int:
        return self.A.shape[0]

    @property
    def M2(self) -> int:
        return self.G.shape[0]

    def to_dict(self) -> dict[str, Any]:
        out = {"c": self.c.tolist(), "A": self.A.tolist(), "b": self.b.tolist()}
        if self.M2:
            out["G"] = self.G.tolist()
            out["h"] = self.h.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "LinearProgram":
        return cls(d["c"], d.get("A"), d.get("b"), d.get("G"), d.get("h"))

    def permuted(self, perm) -> "LinearProgram":
        """Copy with the inequality rows reordered by ``perm``."""
        perm = np.asarray(perm)
        return LinearProgram(self.c, self.A[perm], self.b[perm], self.G, self.h)


def load_lp(path) -> LinearProgram:
    return LinearProgram.from_dict(json.loads(Path(path).read_text()))


def save_lp(lp: LinearProgram, path) -> None:
    Path(path).write_text(json.dumps(lp.to_dict()))


@dataclass(frozen=True, eq=False)
class PrimalDualSolution:
    x: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    status: Status
    objective: float
    iterations: int
    kkt_residual: float
    # solver internals; empty for oracle solutions
    diagnostics: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL

    def to_dict(self) -> dict[str, Any]:
        return {
            "status": self.status.value,
            "x": self.x.tolist(),
            "lam": self.lam.tolist(),
            "nu": self.nu.tolist(),
            "objective": float(self.objective),
            "iterations": int(self.iterations),
            "kkt_residual": float(self.kkt_residual),
        }


@dataclass(frozen=True)
class KktResiduals:
    primal_ineq: float
    primal_eq: float
    dual: float
    complementarity: float
    sign: float

    def max(self) -> float:
        return max(self.primal_ineq, self.primal_eq, self.dual, self.complementarity, self.sign)

    def within(self, tol: float) -> bool:
        return self.max() <= tol


def check_kkt(lp: LinearProgram, sol: PrimalDualSolution, tol: float | None = None) -> KktResiduals:
    """Absolute residuals of the five KKT conditions at ``sol``.

    ``tol`` is accepted for signature symmetry; callers compare against it
    themselves via :meth:`KktResiduals.within`.
    """
    x, lam, nu = (np.asarray(v, dtype=float) for v in (sol.x, sol.lam, sol.nu))
    if x.shape != (lp.D,) or lam.shape != (lp.M1,) or nu.shape != (lp.M2,):
        raise ValueError(
            f"solution shapes x{x.shape} lam{lam.shape} nu{nu.shape} do not match "
            f"LP (D={lp.D}, M1={lp.M1}, M2={lp.M2})"
        )
    slack = lp.A @ x - lp.b
    return KktResiduals(
        primal_ineq=float(max(0.0, slack.max(initial=0.0))),
        primal_eq=float(np.abs(lp.G @ x - lp.h).max(initial=0.0)),
        dual=float(np.abs(lp.A.T @ lam + lp.G.T @ nu - lp.c).max(initial=0.0)),
        complementarity=float(np.abs(lam * slack).max(initial=0.0)),
        sign=float(max(0.0, lam.max(initial=0.0))),
    )


@dataclass(frozen=True)
class DegeneracyReport:
    active_inequalities: tuple[int, ...]
    strictly_active: tuple[int, ...]
    weakly_active: tuple[int, ...]
    is_degenerate: bool
    active_rank: int


def degeneracy_report(
    lp: LinearProgram,
    sol: PrimalDualSolution,
    tol_active: float | None = None,
    tol_dual: float | None = None,
) -> DegeneracyReport:
    """Split inequality rows into strictly active, weakly active and inactive.

    A solution is degenerate when the equality rows together with the active
    inequality rows outnumber ``D`` or are linearly dependent.
    """
    if not sol.optimal:
        raise ValueError(f"degeneracy is only defined at an optimum, got {sol.status.value}")
    if tol_active is None:
        tol_active = 1e-6 * (1.0 + np.abs(lp.b).max(initial=0.0))
    if tol_dual is None:
        tol_dual = 1e-6 * (1.0 + np.abs(lp.c).max(initial=0.0))
    x = np.asarray(sol.x, dtype=float)
    lam = np.asarray(sol.lam, dtype=float)
    if x.shape != (lp.D,) or lam.shape != (lp.M1,):
        raise ValueError("solution shape does not match LP")
    slack = lp.b - lp.A @ x
    active = np.flatnonzero(np.abs(slack) <= tol_active)
    strict = active[lam[active] < -tol_dual]
    weak = active[lam[active] >= -tol_dual]
    rows = np.vstack([lp.G, lp.A[active]])
    rank = int(np.linalg.matrix_rank(rows)) if rows.shape[0] else 0
    degenerate = rows.shape[0] > lp.D or rank < rows.shape[0]
    return DegeneracyReport(
        active_inequalities=tuple(int(i) for i in active),
        strictly_active=tuple(int(i) for i in strict),
        weakly_active=tuple(int(i) for i in weak),
        is_degenerate=bool(degenerate),
        active_rank=rank,
    )


# -- vertex enumeration oracle ------------------------------------------------

_ENUM_MAX_D = 10
_ENUM_MAX_ROWS = 24
_ENUM_CHUNK = 20000


def _square_solutions(G, h, A, b, k):
    """Yield (subsets, points) for every nonsingular [G; A_S] x = [h; b_S], |S| = k."""
    M1, r = A.shape
    combos = itertools.combinations(range(M1), k)
    while True:
        batch = list(itertools.islice(combos, _ENUM_CHUNK))
        if not batch:
            return
        chunk = np.array(batch, dtype=int).reshape(len(batch), k)
        n = chunk.shape[0]
        mats = np.concatenate([np.broadcast_to(G, (n,) + G.shape), A[chunk]], axis=1)
        rhs = np.concatenate([np.broadcast_to(h, (n,) + h.shape), b[chunk]], axis=1)
        sv = np.linalg.svd(mats, compute_uv=False)
        ok = sv[:, -1] > 1e-10 * np.maximum(sv[:, 0], 1.0)
        if np.any(ok):
            pts = np.linalg.solve(mats[ok], rhs[ok][..., None])[..., 0]
            yield chunk[ok], pts


def _extreme_rays(G, A, k):
    """Yield candidate extreme rays of {d : A d <= 0, G d = 0} (both signs)."""
    M1, r = A.shape
    combos = itertools.combinations(range(M1), k)
    while True:
        batch = list(itertools.islice(combos, _ENUM_CHUNK))
        if not batch:
            return
        chunk = np.array(batch, dtype=int).reshape(len(batch), k)
        n = chunk.shape[0]
        mats = np.concatenate([np.broadcast_to(G, (n,) + G.shape), A[chunk]], axis=1)
        if mats.shape[1] == 0:
            dirs = np.eye(r)
        else:
            _, sv, vt = np.linalg.svd(mats, full_matrices=True)
            # rank must be exactly r - 1 for a one-dimensional solution set
            full = sv[:, -1] > 1e-10 * np.maximum(sv[:, 0], 1.0)
            dirs = vt[full, -1, :]
        if dirs.size:
            yield np.concatenate([dirs, -dirs], axis=0)


def vertex_enumeration_solve(lp: LinearProgram, tol: float = 1e-9) -> PrimalDualSolution:
    """Solve a small LP exactly by enumerating all basic solutions.

    Lineality directions (null space of ``[A; G]``) are projected out first, so
    the remaining polyhedron is pointed: it is empty iff it has no vertex, and
    unbounded iff an extreme ray of the recession cone improves the cost.
    """
    D, M1, M2 = lp.D, lp.M1, lp.M2
    if D > _ENUM_MAX_D or M1 + M2 > _ENUM_MAX_ROWS:
        raise ValueError(
            f"vertex enumeration limited to D <= {_ENUM_MAX_D} and M1+M2 <= "
            f"{_ENUM_MAX_ROWS}; got D={D}, M1+M2={M1 + M2}"
        )
    A, b, G, h, c = lp.A, lp.b, lp.G, lp.h, lp.c
    if M2 and np.linalg.matrix_rank(G) < M2:
        raise ValueError("vertex enumeration requires G with full row rank")
    stacked = np.vstack([A, G])
    if stacked.shape[0]:
        _, sv, vt = np.linalg.svd(stacked)
        r = int(np.sum(sv > 1e-12 * max(sv[0], 1.0)))
    else:
        vt, r = np.eye(D), 0
    Q = vt[:r].T            # row space basis, x = Q z
    N = vt[r:].T            # lineality space
    scale_b = 1.0 + np.abs(np.concatenate([b, h])).max(initial=0.0)
    scale_c = 1.0 + np.abs(c).max()
    c_lin = N.T @ c if N.size else np.zeros(0)
    if c_lin.size and np.abs(c_lin).max() > tol * scale_c:
        feasible = vertex_enumeration_solve(LinearProgram(np.zeros(D), A, b, G, h), tol)
        status = (Status.DUAL_INFEASIBLE_UNBOUNDED if feasible.status is not Status.PRIMAL_INFEASIBLE
                  else Status.PRIMAL_INFEASIBLE)
        return _failed(lp, status)
    Ar, Gr, cr = A @ Q, G @ Q, Q.T @ c
    k = r - M2
    if r == 0:
        ok = np.all(b >= -tol * scale_b) and np.all(np.abs(h) <= tol * scale_b)
        if not ok:
            return _failed(lp, Status.PRIMAL_INFEASIBLE)
        return _finish(lp, np.zeros(D), np.zeros(M1), np.zeros(M2), 1)

    best_val, best_z = np.inf, None
    n_bases = 0
    feas_tol = tol * scale_b
    for subsets, pts in _square_solutions(Gr, h, Ar, b, k):
        n_bases += subsets.shape[0]
        viol = (pts @ Ar.T - b).max(axis=1, initial=-np.inf) if M1 else np.full(len(pts), -np.inf)
        feas = viol <= feas_tol
        if not np.any(feas):
            continue
        vals = pts[feas] @ cr
        i = int(np.argmin(vals))
        if vals[i] < best_val - 1e-12 * (1 + abs(vals[i])):
            best_val, best_z = float(vals[i]), pts[feas][i]
    if best_z is None:
        return _failed(lp, Status.PRIMAL_INFEASIBLE, n_bases)

    for rays in _extreme_rays(Gr, Ar, k - 1) if k >= 1 else ():
        in_cone = (rays @ Ar.T).max(axis=1, initial=-np.inf) <= tol if M1 else np.ones(len(rays), bool)
        if np.any(in_cone & (rays @ cr < -tol * scale_c)):
            return _failed(lp, Status.DUAL_INFEASIBLE_UNBOUNDED, n_bases)

    # duals from a dual-feasible basis at the optimal vertex
    slack = b - Ar @ best_z
    act = np.flatnonzero(np.abs(slack) <= 1e3 * feas_tol)
    best_lam, best_nu, best_worst = None, None, np.inf
    for S in itertools.combinations(act.tolist(), k):
        B = np.vstack([Gr, Ar[list(S)]])
        if np.linalg.matrix_rank(B) < r:
            continue
        mult = np.linalg.solve(B.T, cr)
        nu_S, lam_S = mult[:M2], mult[M2:]
        worst = lam_S.max(initial=-np.inf)
        if worst < best_worst:
            lam = np.zeros(M1)
            lam[list(S)] = lam_S
            best_lam, best_nu, best_worst = lam, nu_S, worst
            if worst <= 0:
                break
    if best_lam is None:
        best_lam, best_nu = np.zeros(M1), np.zeros(M2)
    return _finish(lp, Q @ best_z, best_lam, best_nu, n_bases)


def _finish(lp, x, lam, nu, iterations) -> PrimalDualSolution:
    tmp = PrimalDualSolution(x, lam, nu, Status.OPTIMAL, float(lp.c @ x), iterations, 0.0)
    res = check_kkt(lp, tmp).max()
    return PrimalDualSolution(x, lam, nu, Status.OPTIMAL, float(lp.c @ x), iterations, res)


def _failed(lp, status, iterations=0) -> PrimalDualSolution:
    return PrimalDualSolution(
        np.full(lp.D, np.nan), np.full(lp.M1, np.nan), np.full(lp.M2, np.nan),
        status, np.nan, iterations, np.inf,
    )


def enumeration_cost(D: int, M1: int, M2: int) -> int:
    """Number of square systems the oracle would examine."""
    return comb(M1, max(D - M2, 0))


def random_feasible_lp(rng: np.random.Generator, D: int, M1: int, M2: int = 0) -> LinearProgram:
    """Random LP that is feasible with an interior point and has a bounded optimum.

    Primal feasibility comes from a known strictly feasible point and the cost is
    built from a dual-feasible pair, so the optimum exists by weak duality.
    """
    x0 = rng.standard_normal(D)
    A = rng.standard_normal((M1, D))
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    b = A @ x0 + rng.uniform(0.1, 1.0, M1)
    G = rng.standard_normal((M2, D))
    h = G @ x0
    lam0 = -rng.exponential(1.0, M1) * (rng.uniform(size=M1) < 0.6)
    nu0 = rng.standard_normal(M2)
    c = A.T @ lam0 + G.T @ nu0
    if np.abs(c).max(initial=0.0) < 1e-3:
        c = A.T @ (-np.ones(M1)) + G.T @ nu0
    return LinearProgram(c, A, b, G, h)
