"""Numeric kernels for the homogeneous interior-point solver.

Everything here is written in the numpy subset numba understands. With numba
enabled the functions are compiled (``nogil``, cached); with
``INVLP_DISABLE_NUMBA=1`` they run as ordinary numpy code and the dense LU
primitives are taken from scipy instead of the hand-written loops.
"""
import numpy as np
import scipy.linalg

from ._jit import USE_NUMBA, maybe_njit

# status codes shared with ipm.py
OPTIMAL = 0
PRIMAL_INFEASIBLE = 1
DUAL_INFEASIBLE = 2
ITERATION_LIMIT = 3
NUMERICAL_FAILURE = 4

_CERT_TOL = 1e-6
# factors with a smaller row-relative pivot are treated as singular
_PIVOT_FLOOR = 1e-200


def _lu_factor_loops(M):
    """Partial-pivoting LU with LAPACK-style pivot vector."""
    n = M.shape[0]
    LU = M.copy()
    piv = np.zeros(n, dtype=np.int64)
    for k in range(n):
        p = k
        big = abs(LU[k, k])
        for i in range(k + 1, n):
            if abs(LU[i, k]) > big:
                big = abs(LU[i, k])
                p = i
        piv[k] = p
        if p != k:
            for j in range(n):
                tmp = LU[k, j]
                LU[k, j] = LU[p, j]
                LU[p, j] = tmp
        pivot = LU[k, k]
        if pivot == 0.0:
            continue
        for i in range(k + 1, n):
            LU[i, k] /= pivot
        for i in range(k + 1, n):
            f = LU[i, k]
            if f != 0.0:
                for j in range(k + 1, n):
                    LU[i, j] -= f * LU[k, j]
    return LU, piv


def _lu_solve_loops(LU, piv, rhs):
    n = LU.shape[0]
    x = rhs.copy()
    for k in range(n):
        p = piv[k]
        if p != k:
            tmp = x[k]
            x[k] = x[p]
            x[p] = tmp
    for i in range(n):
        acc = x[i]
        for j in range(i):
            acc -= LU[i, j] * x[j]
        x[i] = acc
    for i in range(n - 1, -1, -1):
        acc = x[i]
        for j in range(i + 1, n):
            acc -= LU[i, j] * x[j]
        x[i] = acc / LU[i, i]
    return x


def _lu_factor_scipy(M):
    return scipy.linalg.lu_factor(M, check_finite=False)


def _lu_solve_scipy(LU, piv, rhs):
    return scipy.linalg.lu_solve((LU, piv), rhs, check_finite=False)


if USE_NUMBA:
    lu_factor = maybe_njit(_lu_factor_loops)
    lu_solve = maybe_njit(_lu_solve_loops)
else:
    lu_factor = _lu_factor_scipy
    lu_solve = _lu_solve_scipy


@maybe_njit
def absmax(v):
    m = 0.0
    for i in range(v.shape[0]):
        a = abs(v[i])
        if a > m:
            m = a
    return m


@maybe_njit
def _max_step(v, dv):
    alpha = np.inf
    for i in range(v.shape[0]):
        if dv[i] < 0.0:
            a = -v[i] / dv[i]
            if a < alpha:
                alpha = a
    return alpha


@maybe_njit
def _pivot_ratio(LU):
    """Smallest ``|U_ii| / max_j |U_ij|`` over the rows of the U factor."""
    n = LU.shape[0]
    lo = 1.0
    for i in range(n):
        m = 0.0
        for j in range(i, n):
            m = max(m, abs(LU[i, j]))
        if m == 0.0:
            return 0.0
        lo = min(lo, abs(LU[i, i]) / m)
    return lo


@maybe_njit
def refined_solve(K, LU, piv, rhs):
    """LU solve followed by one step of iterative refinement."""
    z = lu_solve(LU, piv, rhs)
    r = rhs - K @ z
    return z + lu_solve(LU, piv, r)


@maybe_njit
def factor_regularized(K, signs, scale):
    """Factor ``K``; if a pivot collapses, retry with quasi-definite shifts.

    ``signs`` gives the sign of the diagonal shift per row and ``scale`` the
    magnitude of the constraint data. Returns (K_used, LU, piv, ok).
    """
    n = K.shape[0]
    LU, piv = lu_factor(K)
    if _pivot_ratio(LU) > _PIVOT_FLOOR and np.all(np.isfinite(LU)):
        return K, LU, piv, True
    for reg in (1e-12, 1e-9, 1e-6):
        Kr = K.copy()
        for i in range(n):
            Kr[i, i] += signs[i] * reg * scale
        LU, piv = lu_factor(Kr)
        if _pivot_ratio(LU) > _PIVOT_FLOOR and np.all(np.isfinite(LU)):
            return Kr, LU, piv, True
    return K, LU, piv, False


@maybe_njit
def _augmented_solve(K, LU, piv, r1, r2, r3):
    """Solve  A^T dy - G^T dnu = r3,  -A dx + (s/y) dy = r1,  -G dx = r2.

    ``K`` holds the symmetric form [[0, -A^T, G^T], [-A, S/Y, 0], [G, 0, 0]].
    """
    D = r3.shape[0]
    M1 = r1.shape[0]
    rhs = np.concatenate((-r3, r1, -r2))
    z = refined_solve(K, LU, piv, rhs)
    return z[:D], z[D:D + M1], z[D + M1:]


@maybe_njit
def _direction(K, LU, piv, b, c, h, F1, F2, F3, F4,
               s, y, tau, kappa, eta, r_sy, r_tk, vx, vy, vnu, a1):
    """Newton direction for right-hand sides ``-eta F`` and ``(r_sy, r_tk)``."""
    ux, uy, unu = _augmented_solve(K, LU, piv, -eta * F1 + r_sy / y, -eta * F2, -eta * F3)
    a0 = -(b @ uy) + h @ unu - c @ ux
    dtau = (-eta * F4 - a0 + r_tk / tau) / (a1 + kappa / tau)
    dx = ux + vx * dtau
    dy = uy + vy * dtau
    dnu = unu + vnu * dtau
    ds = (r_sy - s * dy) / y
    dkappa = (r_tk - kappa * dtau) / tau
    return dx, ds, dy, dnu, dtau, dkappa


@maybe_njit
def _refined_direction(K, LU, piv, A, G, b, c, h, F1, F2, F3, F4,
                       s, y, tau, kappa, eta, r_sy, r_tk, vx, vy, vnu, a1):
    """Direction plus one refinement pass against the full Newton system."""
    dx, ds, dy, dnu, dtau, dkappa = _direction(
        K, LU, piv, b, c, h, F1, F2, F3, F4,
        s, y, tau, kappa, eta, r_sy, r_tk, vx, vy, vnu, a1)
    # residuals of the unreduced equations, negated to match the F arguments
    q1 = eta * F1 + (b * dtau - A @ dx - ds)
    q2 = eta * F2 + (h * dtau - G @ dx)
    q3 = eta * F3 + (c * dtau + A.T @ dy - G.T @ dnu)
    q4 = eta * F4 + (-(b @ dy) + h @ dnu - c @ dx - dkappa)
    q5 = r_sy - (y * ds + s * dy)
    q6 = r_tk - (kappa * dtau + tau * dkappa)
    ex, es, ey, enu, etau, ekappa = _direction(
        K, LU, piv, b, c, h, q1, q2, q3, q4,
        s, y, tau, kappa, 1.0, q5, q6, vx, vy, vnu, a1)
    return dx + ex, ds + es, dy + ey, dnu + enu, dtau + etau, dkappa + ekappa


@maybe_njit
def _step_length(s, ds, y, dy, tau, dtau, kappa, dkappa):
    alpha = min(_max_step(s, ds), _max_step(y, dy))
    if dtau < 0.0:
        alpha = min(alpha, -tau / dtau)
    if dkappa < 0.0:
        alpha = min(alpha, -kappa / dkappa)
    return alpha


@maybe_njit
def _certificate_status(c, A, b, G, h, x, y, nu):
    """Farkas-type readout of a homogeneous iterate; ITERATION_LIMIT if neither holds."""
    M1 = A.shape[0]
    fval = b @ y - h @ nu
    fres = absmax(A.T @ y - G.T @ nu)
    if fval < 0.0 and fres <= _CERT_TOL * abs(fval):
        return PRIMAL_INFEASIBLE
    cx = c @ x
    rres = max(0.0, max(np.max(A @ x) if M1 > 0 else 0.0, absmax(G @ x)))
    if cx < 0.0 and rres <= _CERT_TOL * abs(cx):
        return DUAL_INFEASIBLE
    return ITERATION_LIMIT


@maybe_njit
def hsd_solve(c, A, b, G, h, max_iters, tol_primal, tol_dual, tol_gap,
              step_fraction, inf_ratio):
    """Mehrotra predictor-corrector on the homogeneous self-dual embedding.

    Embedding residuals (y = -lam >= 0, s = b - A x slacks):
        F1 = tau b - A x - s
        F2 = tau h - G x
        F3 = tau c + A^T y - G^T nu
        F4 = -b^T y + h^T nu - c^T x - kappa

    Returns the raw homogeneous iterate plus status code, iteration count and
    the per-iteration residual history ``max|F| / max|F_0|``.
    """
    D = c.shape[0]
    M1 = A.shape[0]
    M2 = G.shape[0]
    n = D + M1 + M2
    x = np.zeros(D)
    nu = np.zeros(M2)
    s = np.ones(M1)
    y = np.ones(M1)
    tau = 1.0
    kappa = 1.0
    bnorm = 1.0 + max(absmax(b), absmax(h))
    cnorm = 1.0 + absmax(c)
    hist = np.zeros(max_iters + 1)
    # static blocks of the augmented matrix; the slack diagonal changes per iteration
    K = np.zeros((n, n))
    K[:D, D:D + M1] = -A.T
    K[D:D + M1, :D] = -A
    K[:D, D + M1:] = G.T
    K[D + M1:, :D] = G
    signs = np.ones(n)
    signs[:D] = -1.0
    data_scale = 1.0
    for i in range(M1):
        data_scale = max(data_scale, absmax(A[i]))
    for i in range(M2):
        data_scale = max(data_scale, absmax(G[i]))
    status = ITERATION_LIMIT
    mu0 = (s @ y + tau * kappa) / (M1 + 1)
    f0 = 1.0
    it = 0
    mu = mu0
    x_prev, s_prev, y_prev, nu_prev, tau_prev, kappa_prev = x, s, y, nu, tau, kappa
    while True:
        F1 = tau * b - A @ x - s
        F2 = tau * h - G @ x
        F3 = tau * c + A.T @ y - G.T @ nu
        F4 = -(b @ y) + h @ nu - c @ x - kappa
        fnorm = max(max(absmax(F1), absmax(F2)), max(absmax(F3), abs(F4)))
        if it == 0:
            f0 = max(fnorm, 1e-300)
        elif fnorm / f0 > hist[it - 1] + 1e-12:
            # accuracy of the Newton solves is exhausted; keep the last accepted point
            x, s, y, nu, tau, kappa = x_prev, s_prev, y_prev, nu_prev, tau_prev, kappa_prev
            it -= 1
            mu = (s @ y + tau * kappa) / (M1 + 1)
            status = _certificate_status(c, A, b, G, h, x, y, nu)
            if status == ITERATION_LIMIT:
                status = NUMERICAL_FAILURE
            break
        hist[it] = fnorm / f0
        mu = (s @ y + tau * kappa) / (M1 + 1)

        pobj = (c @ x) / tau
        dobj = (-(b @ y) + h @ nu) / tau
        pres = max(absmax(F1), absmax(F2)) / tau / bnorm
        dres = absmax(F3) / tau / cnorm
        gap = abs(pobj - dobj) / (1.0 + abs(pobj))
        comp = (s @ y) / (tau * tau) / (1.0 + abs(pobj))
        if pres <= tol_primal and dres <= tol_dual and gap <= tol_gap and comp <= tol_gap:
            status = OPTIMAL
            break

        if kappa > inf_ratio * tau or (mu < tol_gap * mu0 and tau < tol_gap * min(1.0, kappa)):
            status = _certificate_status(c, A, b, G, h, x, y, nu)
            if status != ITERATION_LIMIT:
                break

        if it >= max_iters:
            status = ITERATION_LIMIT
            break

        for i in range(M1):
            K[D + i, D + i] = s[i] / y[i]
        Ku, LU, piv, ok = factor_regularized(K, signs, data_scale)
        if not ok:
            status = NUMERICAL_FAILURE
            break
        # coefficients of dtau
        vx, vy, vnu = _augmented_solve(Ku, LU, piv, -b, -h, -c)
        a1 = -(b @ vy) + h @ vnu - c @ vx

        # predictor
        r_sy = -s * y
        r_tk = -tau * kappa
        dx, ds, dy, dnu, dtau, dkappa = _refined_direction(
            Ku, LU, piv, A, G, b, c, h, F1, F2, F3, F4,
            s, y, tau, kappa, 1.0, r_sy, r_tk, vx, vy, vnu, a1)
        alpha = min(1.0, _step_length(s, ds, y, dy, tau, dtau, kappa, dkappa))
        mu_aff = ((s + alpha * ds) @ (y + alpha * dy)
                  + (tau + alpha * dtau) * (kappa + alpha * dkappa)) / (M1 + 1)
        sigma = min(1.0, max(0.0, mu_aff / mu) ** 3)

        # corrector
        eta = 1.0 - sigma
        r_sy = -s * y + sigma * mu - ds * dy
        r_tk = -tau * kappa + sigma * mu - dtau * dkappa
        dx, ds, dy, dnu, dtau, dkappa = _refined_direction(
            Ku, LU, piv, A, G, b, c, h, F1, F2, F3, F4,
            s, y, tau, kappa, eta, r_sy, r_tk, vx, vy, vnu, a1)
        finite = (np.all(np.isfinite(dx)) and np.all(np.isfinite(ds)) and np.all(np.isfinite(dy))
                  and np.all(np.isfinite(dnu)) and np.isfinite(dtau) and np.isfinite(dkappa))
        if not finite:
            status = NUMERICAL_FAILURE
            break
        alpha = min(1.0, step_fraction * _step_length(s, ds, y, dy, tau, dtau, kappa, dkappa))
        if alpha < 1e-12:
            status = NUMERICAL_FAILURE
            break
        x_prev, s_prev, y_prev, nu_prev, tau_prev, kappa_prev = x, s, y, nu, tau, kappa
        x = x + alpha * dx
        s = s + alpha * ds
        y = y + alpha * dy
        nu = nu + alpha * dnu
        tau = tau + alpha * dtau
        kappa = kappa + alpha * dkappa
        it += 1
    return x, s, y, nu, tau, kappa, it, status, hist[:it + 1].copy(), mu
