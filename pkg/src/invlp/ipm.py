"""Dense homogeneous self-dual interior-point LP solver."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from .lp import LinearProgram, PrimalDualSolution, Status, check_kkt

__all__ = ["IpmSettings", "solve", "solve_batch", "n_threads"]

_STATUS = {
    _kernels.OPTIMAL: Status.OPTIMAL,
    _kernels.PRIMAL_INFEASIBLE: Status.PRIMAL_INFEASIBLE,
    _kernels.DUAL_INFEASIBLE: Status.DUAL_INFEASIBLE_UNBOUNDED,
    _kernels.ITERATION_LIMIT: Status.ITERATION_LIMIT,
    _kernels.NUMERICAL_FAILURE: Status.NUMERICAL_FAILURE,
}


@dataclass(frozen=True)
class IpmSettings:
    max_iters: int = 200
    tol_gap: float = 1e-8
    tol_primal: float = 1e-8
    tol_dual: float = 1e-8
    step_fraction: float = 0.99
    inf_ratio: float = 1e10

    def __post_init__(self):
        if min(self.tol_gap, self.tol_primal, self.tol_dual) <= 0:
            raise ValueError("tolerances must be positive")
        if not 0.0 < self.step_fraction < 1.0:
            raise ValueError("step_fraction must lie in (0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")

    @classmethod
    def tight(cls, tol: float = 1e-10) -> "IpmSettings":
        return cls(tol_gap=tol, tol_primal=tol, tol_dual=tol)


DEFAULT_SETTINGS = IpmSettings()


def _descale(v, tau):
    out = v / tau
    if not np.all(np.isfinite(out)):
        out = v.copy()
    return out


def solve(lp: LinearProgram, settings: IpmSettings = DEFAULT_SETTINGS) -> PrimalDualSolution:
    """Solve ``lp``; infeasibility and unboundedness are reported as statuses.

    When no optimum is certified the de-scaled last iterate is still returned,
    so callers always receive finite (if meaningless) ``x``, ``lam``, ``nu``.
    """
    c = np.ascontiguousarray(lp.c)
    A = np.ascontiguousarray(lp.A)
    b = np.ascontiguousarray(lp.b)
    G = np.ascontiguousarray(lp.G)
    h = np.ascontiguousarray(lp.h)
    x, s, y, nu, tau, kappa, it, code, hist, mu = _kernels.hsd_solve(
        c, A, b, G, h, int(settings.max_iters), float(settings.tol_primal),
        float(settings.tol_dual), float(settings.tol_gap), float(settings.step_fraction),
        float(settings.inf_ratio),
    )
    status = _STATUS[int(code)]
    xs = _descale(x, tau)
    lam = -_descale(y, tau)
    nus = _descale(nu, tau)
    sol = PrimalDualSolution(xs, lam, nus, status, float(c @ xs), int(it), 0.0)
    diagnostics = {
        "tau": float(tau),
        "kappa": float(kappa),
        "mu": float((s @ y) / (tau * tau) / max(lp.M1, 1)),
        "residual_history": hist,
    }
    if status is Status.PRIMAL_INFEASIBLE:
        diagnostics["certificate"] = {"y": y / max(np.abs(y).max(initial=0.0), 1e-300), "nu": nu}
    elif status is Status.DUAL_INFEASIBLE_UNBOUNDED:
        diagnostics["certificate"] = {"ray": x / max(np.abs(x).max(initial=0.0), 1e-300)}
    return PrimalDualSolution(
        xs, lam, nus, status, float(c @ xs), int(it), check_kkt(lp, sol).max(), diagnostics
    )


def n_threads() -> int:
    try:
        return max(1, int(os.environ.get("INVLP_THREADS", "1")))
    except ValueError:
        return 1


def solve_batch(
    lps: Sequence[LinearProgram], settings: IpmSettings = DEFAULT_SETTINGS
) -> list[PrimalDualSolution | Exception]:
    """Solve many LPs; output order follows input order.

    A failing instance yields its exception object in place of a solution so
    the rest of the batch is unaffected. With ``INVLP_THREADS > 1`` instances
    are spread over a thread pool; each solve is independent, so results do
    not depend on scheduling.
    """

    def one(lp):
        try:
            return solve(lp, settings)
        except Exception as exc:  # noqa: BLE001 - reported per instance
            return exc

    lps = list(lps)
    workers = n_threads()
    if workers == 1 or len(lps) < 2:
        return [one(lp) for lp in lps]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, lps))
