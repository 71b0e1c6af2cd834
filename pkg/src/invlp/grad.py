"""Gradients of LP-solution losses with respect to the LP coefficients.

Three routes are provided and cross-checked in the test-suite:

* ``direct``: closed-form objective-error gradients built from the optimal
  primal-dual pair (valid at non-degenerate optima);
* ``implicit``: vector-Jacobian products from the differentiated KKT system;
* ``finite_difference``: central differences with re-solves at tight tolerance.
"""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg
from scipy.linalg import lapack

from . import ipm
from .lp import (
    LinearProgram,
    PrimalDualSolution,
    DegeneracyReport,
    degeneracy_report,
    vertex_enumeration_solve,
    Status,
)

__all__ = [
    "Loss",
    "Method",
    "CoefficientJacobians",
    "DegenerateSolutionWarning",
    "IllConditionedKKT",
    "FiniteDifferenceError",
    "objective_error",
    "direct_objective_error_grads",
    "aoe_coefficient_grads",
    "implicit_grads",
    "aoe_implicit_grads",
    "sde_implicit_grads",
    "finite_difference_grads",
    "SolutionJacobianAction",
    "UniquenessFlags",
    "uniqueness_flags",
]


class Loss(str, enum.Enum):
    AOE = "aoe"
    SDE = "sde"


class Method(str, enum.Enum):
    DIRECT = "direct"
    IMPLICIT = "implicit"
    FINITE_DIFFERENCE = "fd"


class DegenerateSolutionWarning(UserWarning):
    pass


class IllConditionedKKT(np.linalg.LinAlgError):
    def __init__(self, condition: float):
        super().__init__(f"differentiated KKT system is singular or ill-conditioned (cond ~ {condition:.3g})")
        self.condition = condition


class FiniteDifferenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class CoefficientJacobians:
    """Derivatives of a scalar with respect to ``(c, A, b, G, h)``."""

    dc: np.ndarray
    dA: np.ndarray
    db: np.ndarray
    dG: np.ndarray
    dh: np.ndarray

    @classmethod
    def zeros(cls, lp: LinearProgram) -> "CoefficientJacobians":
        return cls(np.zeros(lp.D), np.zeros((lp.M1, lp.D)), np.zeros(lp.M1),
                   np.zeros((lp.M2, lp.D)), np.zeros(lp.M2))

    def blocks(self):
        return self.dc, self.dA, self.db, self.dG, self.dh

    def flat(self) -> np.ndarray:
        return np.concatenate([blk.ravel() for blk in self.blocks()])

    def scaled(self, alpha: float) -> "CoefficientJacobians":
        return CoefficientJacobians(*(alpha * blk for blk in self.blocks()))

    def __add__(self, other: "CoefficientJacobians") -> "CoefficientJacobians":
        return CoefficientJacobians(*(a + b for a, b in zip(self.blocks(), other.blocks())))

    def to_dict(self) -> dict:
        names = ("dz_dc", "dz_dA", "dz_db", "dz_dG", "dz_dh")
        return {k: v.tolist() for k, v in zip(names, self.blocks())}


def objective_error(lp: LinearProgram, x_star, x_obs) -> float:
    """``z = c^T (x_obs - x*)``."""
    return float(lp.c @ (np.asarray(x_obs, float) - np.asarray(x_star, float)))


def _require_optimal(sol: PrimalDualSolution):
    if not sol.optimal:
        raise ValueError(f"gradients need an optimal solution, got {sol.status.value}")


def direct_objective_error_grads(
    lp: LinearProgram, sol: PrimalDualSolution, x_obs, warn_degenerate: bool = True
) -> CoefficientJacobians:
    """Closed-form total derivatives of ``z = c^T (x_obs - x*)``.

    ``dz/db`` and ``dz/dh`` are the (negated) duals themselves. At a
    degenerate optimum the same expressions are returned as one element of
    the subdifferential and a :class:`DegenerateSolutionWarning` is issued.
    """
    _require_optimal(sol)
    x_obs = np.asarray(x_obs, dtype=float)
    if warn_degenerate and degeneracy_report(lp, sol).is_degenerate:
        warnings.warn("optimum is degenerate; returning a subgradient", DegenerateSolutionWarning,
                      stacklevel=2)
    x, lam, nu = sol.x, sol.lam, sol.nu
    return CoefficientJacobians(
        dc=x_obs - x,
        dA=np.outer(lam, x),
        db=-lam,
        dG=np.outer(nu, x),
        dh=-nu,
    )


def aoe_coefficient_grads(lp, sol, x_obs, warn_degenerate: bool = True) -> CoefficientJacobians:
    """Gradients of ``|z|``; ``sign(0) = 0`` so a zero loss gives zero gradients."""
    z = objective_error(lp, sol.x, x_obs)
    return direct_objective_error_grads(lp, sol, x_obs, warn_degenerate).scaled(float(np.sign(z)))


def _kkt_matrix(lp: LinearProgram, sol: PrimalDualSolution) -> np.ndarray:
    D, M1, M2 = lp.D, lp.M1, lp.M2
    x, lam = sol.x, sol.lam
    n = D + M1 + M2
    K = np.zeros((n, n))
    # stationarity: A^T dlam + G^T dnu
    K[:D, D:D + M1] = lp.A.T
    K[:D, D + M1:] = lp.G.T
    # complementarity: D(lam) A dx + D(Ax - b) dlam
    K[D:D + M1, :D] = lam[:, None] * lp.A
    K[D:D + M1, D:D + M1] = np.diag(lp.A @ x - lp.b)
    # equalities: G dx
    K[D + M1:, :D] = lp.G
    return K


def implicit_grads(
    lp: LinearProgram, sol: PrimalDualSolution, dl_dx, max_condition: float = 1e14
) -> CoefficientJacobians:
    """Vector-Jacobian product ``dl_dx^T dx*/d(c, A, b, G, h)``.

    Differentiating the KKT conditions gives a square linear system in
    ``(dx, dlam, dnu)``; the product is obtained from one transposed solve
    (LU plus one refinement step) against ``[dl_dx; 0; 0]``.
    """
    _require_optimal(sol)
    D, M1, M2 = lp.D, lp.M1, lp.M2
    g = np.asarray(dl_dx, dtype=float)
    if g.shape != (D,):
        raise ValueError(f"dl_dx must have length {D}")
    K = _kkt_matrix(lp, sol)
    lu, piv = scipy.linalg.lu_factor(K, check_finite=False)
    anorm = np.abs(K).sum(axis=0).max()
    rcond, _ = lapack.dgecon(lu, anorm, norm="1")
    if not np.isfinite(rcond) or rcond * max_condition < 1.0:
        raise IllConditionedKKT(np.inf if rcond == 0 else 1.0 / rcond)
    rhs = np.concatenate([g, np.zeros(M1 + M2)])
    xi = scipy.linalg.lu_solve((lu, piv), rhs, trans=1, check_finite=False)
    xi = xi + scipy.linalg.lu_solve((lu, piv), rhs - K.T @ xi, trans=1, check_finite=False)
    xi_c, xi_l, xi_n = xi[:D], xi[D:D + M1], xi[D + M1:]
    lam, nu, x = sol.lam, sol.nu, sol.x
    return CoefficientJacobians(
        dc=xi_c,
        dA=-np.outer(lam, xi_c) - np.outer(lam * xi_l, x),
        db=lam * xi_l,
        dG=-np.outer(nu, xi_c) - np.outer(xi_n, x),
        dh=xi_n,
    )


def aoe_implicit_grads(lp, sol, x_obs) -> CoefficientJacobians:
    """AOE gradients via the KKT route: implicit part plus the explicit cost term."""
    x_obs = np.asarray(x_obs, dtype=float)
    sgn = float(np.sign(objective_error(lp, sol.x, x_obs)))
    if sgn == 0.0:
        return CoefficientJacobians.zeros(lp)
    vjp = implicit_grads(lp, sol, -sgn * lp.c)
    zero = CoefficientJacobians.zeros(lp)
    explicit = CoefficientJacobians(sgn * (x_obs - sol.x), *zero.blocks()[1:])
    return vjp + explicit


def sde_implicit_grads(lp, sol, x_obs) -> CoefficientJacobians:
    return implicit_grads(lp, sol, sol.x - np.asarray(x_obs, dtype=float))


def loss_of(lp: LinearProgram, x_star, x_obs, loss: Loss) -> float:
    x_obs = np.asarray(x_obs, dtype=float)
    if Loss(loss) is Loss.AOE:
        return abs(objective_error(lp, x_star, x_obs))
    d = np.asarray(x_star, float) - x_obs
    return 0.5 * float(d @ d)


def _coefficient_entries(lp: LinearProgram):
    """(block index, multi-index, label) for every coefficient entry."""
    names = ("c", "A", "b", "G", "h")
    for bi, arr in enumerate((lp.c, lp.A, lp.b, lp.G, lp.h)):
        for idx in np.ndindex(arr.shape):
            yield bi, idx, f"{names[bi]}[{','.join(map(str, idx))}]"


def _perturbed(lp: LinearProgram, bi: int, idx, delta: float) -> LinearProgram:
    arrs = [np.array(a) for a in (lp.c, lp.A, lp.b, lp.G, lp.h)]
    arrs[bi][idx] += delta
    return LinearProgram(*arrs)


def _central_differences(lp, fn: Callable[[LinearProgram, PrimalDualSolution], float], step, settings):
    out = [np.zeros_like(a) for a in (lp.c, lp.A, lp.b, lp.G, lp.h)]
    for bi, idx, label in _coefficient_entries(lp):
        vals = []
        for sgn in (1.0, -1.0):
            plp = _perturbed(lp, bi, idx, sgn * step)
            psol = ipm.solve(plp, settings)
            if not psol.optimal:
                raise FiniteDifferenceError(
                    f"perturbing {label} by {sgn * step:+g} gave status {psol.status.value}"
                )
            vals.append(fn(plp, psol))
        out[bi][idx] = (vals[0] - vals[1]) / (2.0 * step)
    return CoefficientJacobians(*out)


def finite_difference_grads(
    lp: LinearProgram, x_obs, loss: Loss | str = Loss.AOE, step: float = 1e-5,
    settings: ipm.IpmSettings | None = None,
) -> CoefficientJacobians:
    """Central-difference gradients of the loss, re-solving every perturbed LP."""
    settings = settings or ipm.IpmSettings.tight(1e-10)
    loss = Loss(loss)
    x_obs = np.asarray(x_obs, dtype=float)
    return _central_differences(lp, lambda plp, psol: loss_of(plp, psol.x, x_obs, loss), step, settings)


class SolutionJacobianAction:
    """Maps ``g = dl/dx*`` to coefficient gradients of ``l`` through ``x*``.

    ``Direct`` is only defined for ``g`` parallel to ``-c`` (objective-error
    losses); ``FiniteDifference`` builds and caches the full solution Jacobian
    on first use.
    """

    def __init__(self, lp: LinearProgram, sol: PrimalDualSolution, method: Method | str,
                 step: float = 1e-5, settings: ipm.IpmSettings | None = None):
        _require_optimal(sol)
        self.lp, self.sol = lp, sol
        self.method_tag = Method(method)
        self.step = step
        self.settings = settings or ipm.IpmSettings.tight(1e-10)
        self._fd_jac = None

    def __call__(self, g) -> CoefficientJacobians:
        g = np.asarray(g, dtype=float)
        if self.method_tag is Method.IMPLICIT:
            return implicit_grads(self.lp, self.sol, g)
        if self.method_tag is Method.DIRECT:
            return self._direct(g)
        return self._finite_difference(g)

    def _direct(self, g):
        c = self.lp.c
        cc = float(c @ c)
        alpha = -float(g @ c) / cc if cc > 0 else 0.0
        if np.abs(g + alpha * c).max(initial=0.0) > 1e-12 * (1 + np.abs(g).max(initial=0.0)):
            raise ValueError("direct gradients need dl/dx* proportional to the cost vector")
        x, lam, nu = self.sol.x, self.sol.lam, self.sol.nu
        # -c^T dx*/dtheta scaled by alpha; the cost block vanishes
        return CoefficientJacobians(
            np.zeros_like(c), alpha * np.outer(lam, x), -alpha * lam, alpha * np.outer(nu, x), -alpha * nu
        )

    def _finite_difference(self, g):
        if self._fd_jac is None:
            D = self.lp.D
            cols = []
            for j in range(D):
                cols.append(_central_differences(
                    self.lp, lambda plp, psol, j=j: float(psol.x[j]), self.step, self.settings))
            self._fd_jac = cols
        total = CoefficientJacobians.zeros(self.lp)
        for gj, jac in zip(g, self._fd_jac):
            total = total + jac.scaled(float(gj))
        return total


@dataclass(frozen=True)
class UniquenessFlags:
    grad_c_unique: bool
    grad_b_h_unique: bool
    grad_A_G_unique: bool


def _optimal_face_is_point(lp: LinearProgram, sol: PrimalDualSolution, tol: float) -> bool:
    """Brute-force check: every coordinate has zero range over the optimal face."""
    scale = 1.0 + abs(sol.objective)
    A = np.vstack([lp.A, lp.c])
    b = np.concatenate([lp.b, [sol.objective + 1e-9 * scale]])
    for j in range(lp.D):
        lo_hi = []
        for sgn in (1.0, -1.0):
            e = np.zeros(lp.D)
            e[j] = sgn
            r = vertex_enumeration_solve(LinearProgram(e, A, b, lp.G, lp.h))
            if r.status is not Status.OPTIMAL:
                return r.status is Status.PRIMAL_INFEASIBLE
            lo_hi.append(sgn * r.objective)
        if lo_hi[1] - lo_hi[0] > tol:
            return False
    return True


def uniqueness_flags(
    lp: LinearProgram, sol: PrimalDualSolution, report: DegeneracyReport | None = None,
    use_oracle: bool | None = None, tol: float = 1e-6,
) -> UniquenessFlags:
    """Which gradient blocks are unique at ``sol``.

    ``b``/``h`` gradients are unique at non-degenerate optima; the ``c``
    gradient is unique iff ``x*`` is; ``A``/``G`` gradients additionally when
    ``c = 0``. Uniqueness of ``x*`` is decided by vertex enumeration on small
    instances and by the active-constraint rank otherwise.
    """
    _require_optimal(sol)
    report = report or degeneracy_report(lp, sol)
    if use_oracle is None:
        use_oracle = lp.D <= 10 and lp.M1 + lp.M2 + 1 <= 24
    if use_oracle:
        x_unique = _optimal_face_is_point(lp, sol, tol)
    else:
        x_unique = report.active_rank == lp.D
    c_zero = np.abs(lp.c).max() <= 1e-12
    return UniquenessFlags(
        grad_c_unique=bool(x_unique),
        grad_b_h_unique=not report.is_degenerate,
        grad_A_G_unique=bool(x_unique or c_zero),
    )
