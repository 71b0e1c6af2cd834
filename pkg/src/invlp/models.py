"""Parametric LP families ``(u, w) -> LP`` and the admissible weight set."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
import scipy.linalg

from . import ipm
from .lp import LinearProgram, Status

__all__ = [
    "AdmissibleSet",
    "SamplingStall",
    "CoefficientSensitivities",
    "ParametricModel",
    "Observation",
    "FlowNetwork",
    "figure1_model",
    "figure5_model",
    "synthetic_plp_generator",
    "full_coefficient_model",
    "nguyen_dupuis_network",
    "nguyen_dupuis_model",
    "build_model",
    "generate_observations",
    "save_observations",
    "load_observations",
]


class SamplingStall(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class AdmissibleSet:
    """``{w : lower <= w <= upper, A w <= b, G w = h}``.

    ``sampling_lower``/``sampling_upper`` close the region for uniform
    sampling where the set itself is unbounded; they are not constraints.
    """

    K: int
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    G: np.ndarray | None = None
    h: np.ndarray | None = None
    sampling_lower: np.ndarray | None = None
    sampling_upper: np.ndarray | None = None

    def __post_init__(self):
        K = self.K

        def vec(v):
            return None if v is None else np.asarray(v, dtype=float).reshape(K).copy()

        def rows(M, r):
            if M is None:
                return np.zeros((0, K)), np.zeros(0)
            M = np.asarray(M, dtype=float).reshape(-1, K)
            return M, np.asarray(r, dtype=float).reshape(M.shape[0])

        object.__setattr__(self, "lower", vec(self.lower))
        object.__setattr__(self, "upper", vec(self.upper))
        A, b = rows(self.A, self.b)
        G, h = rows(self.G, self.h)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "h", h)
        lo = self.sampling_lower if self.sampling_lower is not None else self.lower
        hi = self.sampling_upper if self.sampling_upper is not None else self.upper
        object.__setattr__(self, "sampling_lower", vec(lo))
        object.__setattr__(self, "sampling_upper", vec(hi))
        if self.lower is not None and self.upper is not None and np.any(self.lower > self.upper):
            raise ValueError("admissible set bounds are inconsistent (lower > upper)")

    @classmethod
    def box(cls, lower, upper) -> "AdmissibleSet":
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        return cls(lower.size, lower=lower, upper=upper)

    def inequality_rows(self) -> tuple[np.ndarray, np.ndarray]:
        """Bounds and general inequalities as one ``A w <= b`` block."""
        eye = np.eye(self.K)
        blocks, rhs = [self.A], [self.b]
        if self.lower is not None:
            finite = np.isfinite(self.lower)
            blocks.append(-eye[finite])
            rhs.append(-self.lower[finite])
        if self.upper is not None:
            finite = np.isfinite(self.upper)
            blocks.append(eye[finite])
            rhs.append(self.upper[finite])
        return np.vstack(blocks), np.concatenate(rhs)

    def violation(self, w) -> float:
        w = np.asarray(w, dtype=float)
        A, b = self.inequality_rows()
        v = max(0.0, float((A @ w - b).max(initial=0.0)))
        return max(v, float(np.abs(self.G @ w - self.h).max(initial=0.0)))

    def contains(self, w, tol: float = 1e-9) -> bool:
        return self.violation(w) <= tol

    def _sampling_rows(self):
        A, b = self.inequality_rows()
        eye = np.eye(self.K)
        blocks, rhs = [A], [b]
        if self.sampling_lower is not None:
            fin = np.isfinite(self.sampling_lower)
            blocks.append(-eye[fin])
            rhs.append(-self.sampling_lower[fin])
        if self.sampling_upper is not None:
            fin = np.isfinite(self.sampling_upper)
            blocks.append(eye[fin])
            rhs.append(self.sampling_upper[fin])
        return np.vstack(blocks), np.concatenate(rhs)

    def _parametrization(self):
        """Orthonormal affine chart ``w = w_p + N z`` of the equality manifold."""
        if self.G.shape[0] == 0:
            return np.zeros(self.K), np.eye(self.K)
        w_p = np.linalg.lstsq(self.G, self.h, rcond=None)[0]
        if np.abs(self.G @ w_p - self.h).max() > 1e-9 * (1 + np.abs(self.h).max()):
            raise ValueError("admissible set equalities are inconsistent")
        return w_p, scipy.linalg.null_space(self.G)

    def _z_box(self, w_p, N, A, b):
        """Bounding box of the sampling region in chart coordinates."""
        if np.array_equal(N, np.eye(self.K)) and self.A.shape[0] == 0:
            lo, hi = self.sampling_lower, self.sampling_upper
            if lo is None or hi is None or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
                raise ValueError("sampling needs finite bounds on every weight")
            return lo.copy(), hi.copy()
        Az, bz = A @ N, b - A @ w_p
        d = N.shape[1]
        lo, hi = np.empty(d), np.empty(d)
        for j in range(d):
            e = np.zeros(d)
            e[j] = 1.0
            for sgn, out in ((1.0, lo), (-1.0, hi)):
                sol = ipm.solve(LinearProgram(sgn * e, Az, bz))
                if sol.status is Status.PRIMAL_INFEASIBLE:
                    raise ValueError("admissible set is empty")
                if not sol.optimal:
                    raise ValueError("sampling region is unbounded; set sampling bounds")
                out[j] = sol.x[j]
        return lo, hi

    def sampler(self, rng: np.random.Generator) -> Callable[[], np.ndarray]:
        """Return a function drawing uniform samples by box rejection."""
        A, b = self._sampling_rows()
        w_p, N = self._parametrization()
        lo, hi = self._z_box(w_p, N, A, b)
        stats = {"drawn": 0, "accepted": 0}
        tol = 1e-12 * (1.0 + np.abs(b).max(initial=0.0))

        def draw() -> np.ndarray:
            while True:
                for _ in range(256):
                    z = rng.uniform(lo, hi)
                    w = w_p + N @ z
                    stats["drawn"] += 1
                    if np.all(A @ w <= b + tol):
                        stats["accepted"] += 1
                        return w
                if stats["drawn"] >= 10000 and stats["accepted"] < 1e-4 * stats["drawn"]:
                    raise SamplingStall(
                        f"rejection sampling accepted {stats['accepted']} of {stats['drawn']} draws"
                    )

        return draw

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        draw = self.sampler(rng)
        if n is None:
            return draw()
        return np.array([draw() for _ in range(n)]).reshape(n, self.K)

    def to_dict(self) -> dict:
        def opt(v):
            return None if v is None else v.tolist()

        return {
            "K": self.K, "lower": opt(self.lower), "upper": opt(self.upper),
            "A": self.A.tolist(), "b": self.b.tolist(), "G": self.G.tolist(), "h": self.h.tolist(),
        }


@dataclass(frozen=True, eq=False)
class CoefficientSensitivities:
    """Derivatives of every LP coefficient with respect to each weight.

    Shapes: ``dc (D, K)``, ``dA (M1, D, K)``, ``db (M1, K)``, ``dG (M2, D, K)``,
    ``dh (M2, K)``.
    """

    dc: np.ndarray
    dA: np.ndarray
    db: np.ndarray
    dG: np.ndarray
    dh: np.ndarray

    def blocks(self):
        return self.dc, self.dA, self.db, self.dG, self.dh

    def contract(self, grads) -> np.ndarray:
        """Chain rule: coefficient gradients (a ``CoefficientJacobians``) to a length-K vector."""
        out = self.dc.T @ grads.dc
        out = out + np.einsum("mdk,md->k", self.dA, grads.dA)
        out = out + self.db.T @ grads.db
        if self.dG.shape[0]:
            out = out + np.einsum("mdk,md->k", self.dG, grads.dG)
            out = out + self.dh.T @ grads.dh
        return out


class ParametricModel:
    """A parametric LP family.

    Subclasses implement :meth:`_evaluate` (returning ``c, A, b, G, h``) and
    :meth:`_sensitivities`. ``constraints_affine`` declares that every
    constraint row is affine in ``w`` so target-feasibility rows can be
    materialized as a fixed matrix.
    """

    name = "model"
    constraints_affine = True

    def __init__(self, D: int, M1: int, M2: int, K: int, dim_u: int,
                 admissible_set: AdmissibleSet, true_w=None, seed: int | None = None,
                 params: dict | None = None):
        self.D, self.M1, self.M2, self.K, self.dim_u = D, M1, M2, K, dim_u
        self.admissible_set = admissible_set
        self.true_w = None if true_w is None else np.asarray(true_w, dtype=float)
        self.seed = seed
        self.params = dict(params or {})

    @property
    def dims(self) -> tuple[int, int, int, int, int]:
        return self.D, self.M1, self.M2, self.K, self.dim_u

    @property
    def metadata(self) -> dict:
        return {"name": self.name, "seed": self.seed, "params": self.params}

    def _check(self, u, w):
        u = np.asarray(u, dtype=float).reshape(self.dim_u)
        w = np.asarray(w, dtype=float).reshape(self.K)
        return u, w

    def coeffs(self, u, w) -> LinearProgram:
        u, w = self._check(u, w)
        return LinearProgram(*self._evaluate(u, w))

    def coeff_jacobians(self, u, w) -> CoefficientSensitivities:
        u, w = self._check(u, w)
        return CoefficientSensitivities(*self._sensitivities(u, w))

    def ineq_depends_on_w(self, u) -> np.ndarray:
        """Rows of ``A x <= b`` whose coefficients vary with ``w`` (structural)."""
        return self._dependence(u)[0]

    def eq_depends_on_w(self, u) -> np.ndarray:
        return self._dependence(u)[1]

    def _dependence(self, u):
        # structural pattern: union of sensitivities at two generic weights
        rng = np.random.default_rng(12345)
        ineq = np.zeros(self.M1, dtype=bool)
        eq = np.zeros(self.M2, dtype=bool)
        for _ in range(2):
            s = self.coeff_jacobians(u, rng.uniform(-0.5, 0.5, self.K) + self._centre())
            ineq |= (np.abs(s.dA).sum(axis=(1, 2)) + np.abs(s.db).sum(axis=1)) > 0
            if self.M2:
                eq |= (np.abs(s.dG).sum(axis=(1, 2)) + np.abs(s.dh).sum(axis=1)) > 0
        return ineq, eq

    def _centre(self):
        return self.true_w if self.true_w is not None else np.zeros(self.K)

    def sample_u(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=(n, self.dim_u))

    def _evaluate(self, u, w):  # pragma: no cover - abstract
        raise NotImplementedError

    def _sensitivities(self, u, w):  # pragma: no cover - abstract
        raise NotImplementedError

    def describe(self) -> dict:
        return {
            "family": self.name,
            "params": self.params,
            "dims": {"D": self.D, "M1": self.M1, "M2": self.M2, "K": self.K, "dim_u": self.dim_u},
            "true_w": None if self.true_w is None else self.true_w.tolist(),
            "admissible_set": self.admissible_set.to_dict(),
        }


# -- small illustrative families ----------------------------------------------

class _Figure1(ParametricModel):
    name = "figure1"

    def __init__(self):
        super().__init__(2, 3, 0, 2, 1, AdmissibleSet.box([-1.0, -1.0], [1.0, 1.0]),
                         true_w=(-0.5, -0.2))

    def _evaluate(self, u, w):
        u, (w1, w2) = u[0], w
        ang = w1 + w2 * u
        c = np.array([math.cos(ang), math.sin(ang)])
        A = np.array([[-(1.0 + w2 * u), 0.0], [0.0, -(1.0 + w1)], [1.0, 1.0]])
        b = np.array([-w1, -w2 * u, 1.0 + w1 + w2 * u])
        return c, A, b, None, None

    def _sensitivities(self, u, w):
        u, (w1, w2) = u[0], w
        ang = w1 + w2 * u
        dang = np.array([-math.sin(ang), math.cos(ang)])
        dc = np.column_stack([dang, u * dang])
        dA = np.zeros((3, 2, 2))
        dA[0, 0, 1] = -u
        dA[1, 1, 0] = -1.0
        db = np.array([[-1.0, 0.0], [0.0, -u], [1.0, u]])
        return dc, dA, db, np.zeros((0, 2, 2)), np.zeros((0, 2))

    def sample_u(self, rng, n):
        return rng.uniform(0.5, 1.5, size=(n, 1))


def figure1_model() -> ParametricModel:
    """Two-variable family with one feature; true weights (-0.5, -0.2)."""
    return _Figure1()


class _Figure5(ParametricModel):
    name = "figure5"

    def __init__(self, w_box=(0.0, 10.0)):
        lo, hi = w_box
        super().__init__(2, 5, 0, 2, 2, AdmissibleSet.box([lo, lo], [hi, hi]), true_w=(1.0, 1.0),
                         params={"w_box": list(w_box)})

    def _evaluate(self, u, w):
        c = np.array([-w[0] * u[0], -w[1] * u[1]])
        A = np.array([[1.0, 1.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
        b = np.array([max(1.0, u[0] + u[1]), 1.0, 1.0, 0.0, 0.0])
        return c, A, b, None, None

    def _sensitivities(self, u, w):
        dc = np.array([[-u[0], 0.0], [0.0, -u[1]]])
        return dc, np.zeros((5, 2, 2)), np.zeros((5, 2)), np.zeros((0, 2, 2)), np.zeros((0, 2))

    def sample_u(self, rng, n):
        return rng.uniform(0.0, 1.0, size=(n, 2))


def figure5_model() -> ParametricModel:
    """Unit-box family with a ``max(1, u1 + u2)`` budget row; true weights (1, 1)."""
    return _Figure5()


# -- synthetic generator ------------------------------------------------------

def _recession_free(A, G, tol=1e-9) -> bool:
    """True when ``{d : A d <= 0, G d = 0}`` is ``{0}``, i.e. the region is bounded."""
    D = A.shape[1]
    box = np.vstack([A, np.eye(D), -np.eye(D)])
    rhs = np.concatenate([np.zeros(A.shape[0]), np.ones(D), np.ones(D)])
    for j in range(D):
        for sgn in (1.0, -1.0):
            e = np.zeros(D)
            e[j] = sgn
            sol = ipm.solve(LinearProgram(e, box, rhs, G, np.zeros(G.shape[0])))
            if not sol.optimal or sol.objective < -tol:
                return False
    return True


class _Synthetic(ParametricModel):
    name = "synthetic"

    def __init__(self, D, M1, M2, K, dim_u, seed, true_w, tensors, params):
        W = AdmissibleSet.box(-np.ones(K), np.ones(K))
        super().__init__(D, M1, M2, K, dim_u, W, true_w=true_w, seed=seed, params=params)
        t = tensors
        self.c0, self.Cu, self.Cw = t["c0"], t["Cu"], t["Cw"]
        self.A0, self.Ak = t["A0"], t["Ak"]
        self.b0, self.Bu, self.Bw = t["b0"], t["Bu"], t["Bw"]
        self.G0, self.Gk, self.h0, self.Hw = t["G0"], t["Gk"], t["h0"], t["Hw"]
        self.x0 = t["x0"]

    def _evaluate(self, u, w):
        c = self.c0 + self.Cu @ u + self.Cw @ w
        A = self.A0 + np.tensordot(w, self.Ak, axes=1)
        b = self.b0 + self.Bu @ u + self.Bw @ w
        G = self.G0 + np.tensordot(w, self.Gk, axes=1)
        h = self.h0 + self.Hw @ w
        return c, A, b, G, h

    def _sensitivities(self, u, w):
        return (self.Cw.copy(), np.moveaxis(self.Ak, 0, -1).copy(), self.Bw.copy(),
                np.moveaxis(self.Gk, 0, -1).copy(), self.Hw.copy())


def synthetic_plp_generator(D: int, M1: int, M2: int = 0, K: int = 6, dim_u: int = 1,
                            seed: int = 0, cost_scale: float = 0.5, rhs_scale: float = 0.5,
                            matrix_scale: float = 0.1, max_tries: int = 200) -> ParametricModel:
    """Random PLP affine in ``(u, w)`` with a known ``true_w`` in ``[-1, 1]^K``.

    An interior point ``x0`` keeps slack of at least ``U[0.1, 1]`` on every row
    for all ``u`` in ``[-1, 1]^dim_u`` at ``true_w``; the feasible region at
    ``true_w`` is rejection-sampled to be bounded, so every training and
    testing LP is feasible and bounded.
    """
    if D < 2 or M1 < D + 1:
        raise ValueError("synthetic generator needs D >= 2 and M1 >= D + 1")
    if not 0 <= M2 < D or K < 1 or dim_u < 0:
        raise ValueError("need 0 <= M2 < D, K >= 1 and dim_u >= 0")
    rng = np.random.default_rng(seed)
    params = {"D": D, "M1": M1, "M2": M2, "K": K, "dim_u": dim_u, "seed": seed,
              "cost_scale": cost_scale, "rhs_scale": rhs_scale, "matrix_scale": matrix_scale}
    for _ in range(max_tries):
        x0 = rng.normal(size=D)
        A0 = rng.normal(size=(M1, D))
        A0 /= np.linalg.norm(A0, axis=1, keepdims=True)
        Ak = rng.normal(0.0, matrix_scale, size=(K, M1, D))
        G0 = rng.normal(size=(M2, D))
        Gk = rng.normal(0.0, matrix_scale, size=(K, M2, D))
        true_w = rng.uniform(-1.0, 1.0, size=K)
        A_star = A0 + np.tensordot(true_w, Ak, axes=1)
        G_star = G0 + np.tensordot(true_w, Gk, axes=1)
        c0 = rng.normal(size=D)
        c0 /= np.linalg.norm(c0)
        Cu = rng.normal(0.0, cost_scale, size=(D, dim_u))
        Cw = rng.normal(0.0, cost_scale, size=(D, K))
        Bu = rng.normal(0.0, rhs_scale, size=(M1, dim_u))
        Bw = rng.normal(0.0, rhs_scale, size=(M1, K))
        Hw = rng.normal(0.0, rhs_scale, size=(M2, K))
        s = rng.uniform(0.1, 1.0, size=M1)
        if M2 and np.linalg.matrix_rank(G_star) < M2:
            continue
        if not _recession_free(A_star, G_star):
            continue
        # worst case of Bu u over the unit box is -sum|Bu|
        b0 = A_star @ x0 + s + np.abs(Bu).sum(axis=1) - Bw @ true_w
        h0 = G_star @ x0 - Hw @ true_w
        tensors = dict(c0=c0, Cu=Cu, Cw=Cw, A0=A0, Ak=Ak, b0=b0, Bu=Bu, Bw=Bw,
                       G0=G0, Gk=Gk, h0=h0, Hw=Hw, x0=x0)
        return _Synthetic(D, M1, M2, K, dim_u, seed, true_w, tensors, params)
    raise RuntimeError(f"no bounded synthetic instance found in {max_tries} attempts")


# -- full coefficient model ---------------------------------------------------

class _FullCoefficient(ParametricModel):
    name = "full_coefficient"

    def __init__(self, base: LinearProgram, radius: float, params):
        D, M1, M2 = base.D, base.M1, base.M2
        K = D + M1 * D + M1 + M2 * D + M2
        w_true = self.pack(base)
        W = AdmissibleSet.box(w_true - radius, w_true + radius)
        super().__init__(D, M1, M2, K, 0, W, true_w=w_true, params=params)
        self.base = base

    @staticmethod
    def pack(lp: LinearProgram) -> np.ndarray:
        return np.concatenate([lp.c, lp.A.ravel(), lp.b, lp.G.ravel(), lp.h])

    def unpack(self, w):
        D, M1, M2 = self.D, self.M1, self.M2
        sizes = np.cumsum([D, M1 * D, M1, M2 * D])
        c, A, b, G, h = np.split(w, sizes)
        return c, A.reshape(M1, D), b, G.reshape(M2, D), h

    def _evaluate(self, u, w):
        return self.unpack(w)

    def _sensitivities(self, u, w):
        D, M1, M2, K = self.D, self.M1, self.M2, self.K
        dc, dA, db, dG, dh = self.unpack_matrix(np.eye(K))
        return (dc, dA.reshape(M1, D, K), db, dG.reshape(M2, D, K), dh)

    def unpack_matrix(self, M):
        D, M1, M2 = self.D, self.M1, self.M2
        sizes = np.cumsum([D, M1 * D, M1, M2 * D])
        return np.split(M, sizes, axis=0)

    def sample_u(self, rng, n):
        return np.zeros((n, 0))


def full_coefficient_model(base: LinearProgram, radius: float = 0.5) -> ParametricModel:
    """Every LP coefficient is a weight; ``u`` is ignored.

    The admissible set is the box ``pack(base) +- radius``.
    """
    return _FullCoefficient(base, radius, {"radius": radius})


# -- Nguyen-Dupuis multi-commodity flow ----------------------------------------

_ND_ARCS = [(1, 5), (1, 12), (4, 5), (4, 9), (5, 6), (5, 9), (6, 7), (6, 10), (7, 8), (7, 11),
            (8, 2), (9, 10), (9, 13), (10, 11), (11, 2), (11, 3), (12, 6), (12, 8), (13, 3)]
_ND_OD = [(1, 2), (1, 3), (4, 2), (4, 3)]


@dataclass(frozen=True, eq=False)
class FlowNetwork:
    nodes: int
    arcs: tuple
    commodities: tuple
    length: np.ndarray
    toll: np.ndarray

    def __post_init__(self):
        for t, h in self.arcs:
            if not (1 <= t <= self.nodes and 1 <= h <= self.nodes):
                raise ValueError(f"arc ({t},{h}) references an unknown node")
        if any(d <= 0 for _, _, d in self.commodities):
            raise ValueError("demands must be positive")
        if np.any(np.asarray(self.length) <= 0):
            raise ValueError("arc lengths must be positive")

    def incidence(self) -> np.ndarray:
        """Node-arc incidence: +1 at the tail, -1 at the head."""
        E = np.zeros((self.nodes, len(self.arcs)))
        for j, (t, h) in enumerate(self.arcs):
            E[t - 1, j] = 1.0
            E[h - 1, j] = -1.0
        return E


def nguyen_dupuis_network(seed: int = 0) -> FlowNetwork:
    """13-node, 19-arc network with four OD pairs and seeded arc features."""
    rng = np.random.default_rng(seed)
    n_arcs = len(_ND_ARCS)
    return FlowNetwork(
        nodes=13, arcs=tuple(_ND_ARCS), commodities=tuple((s, t, 1.0) for s, t in _ND_OD),
        length=rng.uniform(0.5, 2.0, size=n_arcs), toll=rng.uniform(0.0, 1.0, size=n_arcs),
    )


class _NguyenDupuis(ParametricModel):
    name = "nguyen"

    def __init__(self, net: FlowNetwork, seed, true_w):
        n_arcs, n_com = len(net.arcs), len(net.commodities)
        D = n_arcs * n_com
        W = AdmissibleSet(7, lower=np.zeros(7), G=[[0, 0, 1, 1, 1, 0, 0]], h=[1.0],
                          sampling_upper=np.ones(7))
        super().__init__(D, n_arcs + D, (net.nodes - 1) * n_com, 7, 1, W,
                         true_w=true_w, seed=seed, params={"seed": seed})
        self.net = net
        E = net.incidence()[:-1]  # one row per commodity is redundant
        # variable index j * n_com + k for arc j, commodity k
        G = np.zeros(((net.nodes - 1) * n_com, D))
        h = np.zeros(G.shape[0])
        for k, (s, t, d) in enumerate(net.commodities):
            rows = slice(k * (net.nodes - 1), (k + 1) * (net.nodes - 1))
            G[rows, k::n_com] = E
            supply = np.zeros(net.nodes)
            supply[s - 1] = d
            supply[t - 1] = -d
            h[rows] = supply[:-1]
        cap = np.zeros((n_arcs, D))
        for j in range(n_arcs):
            cap[j, j * n_com:(j + 1) * n_com] = 1.0
        self._A = np.vstack([cap, -np.eye(D)])
        self._G, self._h = G, h
        self.n_arcs, self.n_com = n_arcs, n_com

    def arc_costs(self, t, w):
        l, p = self.net.length, self.net.toll
        theta = 2.0 * math.pi * (w[2] + w[3] * t + w[4] * l)
        return l + w[0] * p + w[1] * l * (np.sin(theta) + 1.0)

    def _evaluate(self, u, w):
        c = np.repeat(self.arc_costs(u[0], w), self.n_com)
        b = np.concatenate([1.0 + w[5] + w[6] * self.net.length, np.zeros(self.D)])
        return c, self._A, b, self._G, self._h

    def _sensitivities(self, u, w):
        t = u[0]
        l, p = self.net.length, self.net.toll
        theta = 2.0 * math.pi * (w[2] + w[3] * t + w[4] * l)
        dtheta = w[1] * l * np.cos(theta) * 2.0 * math.pi
        dcj = np.column_stack([p, l * (np.sin(theta) + 1.0), dtheta, dtheta * t, dtheta * l,
                               np.zeros_like(l), np.zeros_like(l)])
        dc = np.repeat(dcj, self.n_com, axis=0)
        db = np.zeros((self.M1, 7))
        db[:self.n_arcs, 5] = 1.0
        db[:self.n_arcs, 6] = l
        return (dc, np.zeros((self.M1, self.D, 7)), db,
                np.zeros((self.M2, self.D, 7)), np.zeros((self.M2, 7)))

    def _dependence(self, u):
        ineq = np.zeros(self.M1, dtype=bool)
        ineq[:self.n_arcs] = True
        return ineq, np.zeros(self.M2, dtype=bool)

    def sample_u(self, rng, n):
        return rng.uniform(0.0, 1.0, size=(n, 1))


def nguyen_dupuis_model(seed: int = 0, true_w=None) -> ParametricModel:
    """Multi-commodity min-cost flow with learned periodic costs and capacities.

    ``true_w`` defaults to a uniform draw from the admissible set.
    """
    net = nguyen_dupuis_network(seed)
    model = _NguyenDupuis(net, seed, None)
    if true_w is None:
        true_w = model.admissible_set.sample(np.random.default_rng([seed, 7]))
    model.true_w = np.asarray(true_w, dtype=float)
    return model


# -- registry and datasets ----------------------------------------------------

def build_model(family: str, **params) -> ParametricModel:
    """Construct a model from its family name and generator parameters.

    Unknown parameters raise ``TypeError``, as they would for the direct
    constructors.
    """
    fixed = {"figure1": figure1_model, "figure5": figure5_model}
    if family in fixed:
        if params:
            raise TypeError(f"{family} takes no parameters, got {sorted(params)}")
        return fixed[family]()
    if family == "synthetic":
        return synthetic_plp_generator(**params)
    if family == "nguyen":
        return nguyen_dupuis_model(**params)
    if family == "full_coefficient":
        from .lp import random_feasible_lp

        extra = set(params) - {"D", "M1", "seed", "radius"}
        if extra:
            raise TypeError(f"unexpected full_coefficient parameters {sorted(extra)}")
        D, M1 = int(params.get("D", 10)), int(params.get("M1", 80))
        rng = np.random.default_rng(params.get("seed", 0))
        model = full_coefficient_model(random_feasible_lp(rng, D, M1, 0), params.get("radius", 0.5))
        model.params.update({"D": D, "M1": M1, "seed": params.get("seed", 0)})
        model.seed = params.get("seed", 0)
        return model
    raise ValueError(f"unknown model family {family!r}")


@dataclass(frozen=True, eq=False)
class Observation:
    u: np.ndarray
    x_obs: np.ndarray

    def to_dict(self) -> dict:
        return {"u": self.u.tolist(), "x_obs": self.x_obs.tolist()}


def generate_observations(model: ParametricModel, us: Sequence, w=None,
                          settings: ipm.IpmSettings | None = None) -> list[Observation]:
    """Targets ``x_obs = x*(u, w)``; raises if any LP is not solved to optimality."""
    w = model.true_w if w is None else np.asarray(w, dtype=float)
    if w is None:
        raise ValueError("model has no true_w; pass w explicitly")
    settings = settings or ipm.IpmSettings.tight(1e-10)
    out = []
    for i, u in enumerate(us):
        u = np.asarray(u, dtype=float).reshape(model.dim_u)
        sol = ipm.solve(model.coeffs(u, w), settings)
        if not sol.optimal:
            raise RuntimeError(f"target LP {i} is {sol.status.value}")
        out.append(Observation(u, sol.x.copy()))
    return out


def save_observations(obs: Sequence[Observation], path) -> None:
    with open(path, "w") as fh:
        json.dump([o.to_dict() for o in obs], fh)


def load_observations(path) -> list[Observation]:
    with open(path) as fh:
        data = json.load(fh)
    return [Observation(np.asarray(d["u"], dtype=float), np.asarray(d["x_obs"], dtype=float))
            for d in data]
