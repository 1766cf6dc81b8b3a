"""Constrained M-step update equations and the expected log-likelihood.

Each update solves the stationarity condition of the expected complete-data
log-likelihood in one free-value vector, holding the conditional moments
fixed.  The intercept and initial-state updates are implemented in their
degenerate form, built from the deterministic-row recursion; with no
deterministic state rows those forms reduce exactly to the plain
constrained updates, which are also provided for cross-checking.
"""

from dataclasses import dataclass

import numpy as np

from .errors import IdentifiabilityError, ModelSpecError
from .linalg import kron, svd_rank, symmetrize, unvec, vec


def _solve_normal(A, b, param_name):
    A = np.atleast_2d(A)
    if A.shape[0] == 0:
        return np.zeros(0)
    rank, _ = svd_rank(A)
    if rank < A.shape[0]:
        raise IdentifiabilityError(param_name)
    return np.linalg.solve(A, b)


# ---------------------------------------------------------------------------
# precision projections


class PrecisionProjection:
    """Inverse noise covariances pushed through the loading projections.

    ``Qm(t) = Phi^T Q_t^-1 Phi`` and so on; rows and columns matching
    all-zero loading rows are exactly zero.
    """

    def __init__(self, spec, params):
        self.spec = spec
        self._Qm = self._per_time(spec, params, "Q")
        self._Rm = self._per_time(spec, params, "R")
        if spec.gl:
            Pi = params.Pi
            self.LAMm = symmetrize(Pi.T @ np.linalg.solve(params.Lam, Pi))
        else:
            self.LAMm = np.zeros((spec.m, spec.m))

    @staticmethod
    def _per_time(spec, params, name):
        if name == "Q":
            proj, inner_dim, outer = params.Phi, spec.gq, spec.m
            mat_at = params.Q
        else:
            proj, inner_dim, outer = params.Xi_proj, spec.gr, spec.n
            mat_at = params.R
        if inner_dim == 0:
            return [np.zeros((outer, outer))]
        count = spec.T if spec.design(name).time_varying else 1
        return [symmetrize(proj.T @ np.linalg.solve(mat_at(t), proj))
                for t in range(1, count + 1)]

    def Qm(self, t):
        return self._Qm[t - 1] if len(self._Qm) > 1 else self._Qm[0]

    def Rm(self, t):
        return self._Rm[t - 1] if len(self._Rm) > 1 else self._Rm[0]


def precision_projections(spec, params):
    return PrecisionProjection(spec, params)


# ---------------------------------------------------------------------------
# deterministic-row classification


@dataclass(frozen=True)
class RowClassification:
    """Which state rows are deterministic at each time.

    ``I_d[t]`` flags rows that are deterministic functions of the initial
    state at model time t (all rows at t0 by convention).  ``I_s`` flags the
    directly stochastic rows (noise every step), ``I_is`` rows that ever
    pick up noise through the transition matrix.  ``Iq0``/``Ir0``/``Ilam0``
    flag the all-zero rows of the three noise loadings.
    """

    M: np.ndarray
    I_d: np.ndarray
    I_is: np.ndarray
    I_s: np.ndarray
    Iq0: np.ndarray
    Ir0: np.ndarray
    Ilam0: np.ndarray


def classify_state_rows(B_pattern, g_zero_rows, T, t0, Ir0=None, Ilam0=None):
    """Track deterministic rows over time from the transition adjacency.

    Works on the 0/1 nonzero pattern of the transition matrix, never on
    numeric products (entries can cancel numerically while a noise path
    exists).  A row is deterministic at t0 + tau when its row of the
    (tau - 1)-th adjacency power has zeros in every directly stochastic
    column.  Once a row leaves the deterministic set it may not re-enter;
    that pattern is rejected.
    """
    M = (np.atleast_2d(np.asarray(B_pattern)) != 0).astype(int)
    m = M.shape[0]
    g_zero = np.asarray(g_zero_rows, dtype=bool)
    direct = ~g_zero
    I_d = np.zeros((T + 1, m), dtype=bool)
    I_d[t0] = True
    left = np.zeros(m, dtype=bool)
    power = np.eye(m, dtype=int)  # adjacency^(tau-1)
    for t in range(t0 + 1, T + 1):
        det_now = g_zero & ~(power[:, direct].any(axis=1))
        re_entering = det_now & left
        if re_entering.any():
            raise ModelSpecError(
                f"state rows {np.flatnonzero(re_entering).tolist()} re-enter the "
                f"deterministic set at t={t}; the transition structure flips rows "
                f"between deterministic and stochastic")
        left |= g_zero & ~det_now
        I_d[t] = det_now
        power = (power @ M > 0).astype(int)
    I_is = g_zero & left
    Ir0 = np.zeros(0, dtype=bool) if Ir0 is None else np.asarray(Ir0, dtype=bool)
    Ilam0 = g_zero.copy() if Ilam0 is None else np.asarray(Ilam0, dtype=bool)
    return RowClassification(M, I_d, I_is, direct.copy(), g_zero.copy(), Ir0, Ilam0)


def b_patterns(design_B):
    """Structural nonzero pattern of the transition matrix per time entry.

    An estimated cell counts as nonzero regardless of its current value.
    """
    m = design_B.target_rows
    pats = []
    for f, D in zip(design_B.f_by_time, design_B.D_by_time):
        nz = (np.abs(f) > 0) | (np.abs(D).sum(axis=1) > 0)
        pats.append(unvec(nz.astype(float), m, m) != 0)
    return pats


def classification_for(spec):
    """Row classification derived from the model structure.

    With zero-variance state rows present, the transition nonzero pattern
    must be time-invariant; without them the classification is trivial and
    a moving pattern is harmless.
    """
    g_zero = ~np.any(spec.G != 0.0, axis=1)
    pats = b_patterns(spec.design("B"))
    if g_zero.any() and any(not np.array_equal(p, pats[0]) for p in pats[1:]):
        raise ModelSpecError("the nonzero pattern of the transition matrix must "
                             "be time-invariant when state rows carry no noise")
    pattern = np.zeros_like(pats[0])
    for p in pats:
        pattern |= p
    return classify_state_rows(
        pattern, g_zero, spec.T, spec.t0,
        Ir0=~np.any(spec.H != 0.0, axis=1),
        Ilam0=~np.any(spec.F != 0.0, axis=1))


# ---------------------------------------------------------------------------
# deterministic-state recursion and delta terms


@dataclass(frozen=True)
class DetRecursion:
    """Coefficients writing deterministic state rows as functions of the
    initial state and the intercept free values:
    ``x_t(det) = B_star_t x_t0 + f_star_t + D_star_t upsilon``."""

    B_star: np.ndarray
    f_star: np.ndarray
    D_star: np.ndarray


def det_recursion(params, design_u, T, t0):
    m = design_u.target_rows
    s = design_u.s
    B_star = np.zeros((T + 1, m, m))
    f_star = np.zeros((T + 1, m))
    D_star = np.zeros((T + 1, m, s))
    B_star[t0] = np.eye(m)
    for t in range(t0 + 1, T + 1):
        B_t = params.B(t)
        B_star[t] = B_t @ B_star[t - 1]
        f_star[t] = B_t @ f_star[t - 1] + design_u.f(t)
        D_star[t] = B_t @ D_star[t - 1] + design_u.D(t)
    return DetRecursion(B_star, f_star, D_star)


@dataclass(frozen=True)
class DeltaSet:
    """Residual/coefficient pairs for the intercept and initial-state updates.

    Indices 1-4 isolate the intercept free values in the observation and
    state residuals; 5-8 do the same for the initial-state free values.
    Entries at t0 for the state-side terms (3, 4, 7, 8) are zero.
    """

    d1: np.ndarray
    d2: np.ndarray
    d3: np.ndarray
    d4: np.ndarray
    d5: np.ndarray
    d6: np.ndarray
    d7: np.ndarray
    d8: np.ndarray


def compute_deltas(spec, params, exps, rc, dr):
    n, m, T, t0 = spec.n, spec.m, spec.T, spec.t0
    design_u = spec.design("U")
    design_xi = spec.design("Xi")
    su, sp = design_u.s, design_xi.s
    D_xi, f_xi = design_xi.D(1), design_xi.f(1)
    Ilam = rc.Ilam0.astype(float)
    x0 = exps.x[t0]
    # conditional initial state with fixed rows read from the current /
    # fixed-offset initial value respectively
    E0 = (1 - Ilam) * x0 + Ilam * params.xi
    E0_offset = (1 - Ilam) * x0 + Ilam * f_xi

    d1 = np.zeros((T + 1, n))
    d2 = np.zeros((T + 1, n, su))
    d3 = np.zeros((T + 1, m))
    d4 = np.zeros((T + 1, m, su))
    d5 = np.zeros((T + 1, n))
    d6 = np.zeros((T + 1, n, sp))
    d7 = np.zeros((T + 1, m))
    d8 = np.zeros((T + 1, m, sp))

    u_star = dr.f_star + dr.D_star @ params.free.upsilon

    for t in range(1, T + 1):
        Z_t, a_t = params.Z(t), params.a(t)
        Id = rc.I_d[t].astype(float)
        keep = (1 - Id)
        ZI = Z_t * Id[None, :]
        base = exps.y[t] - Z_t @ (keep * exps.x[t]) - a_t
        d1[t] = base - ZI @ (dr.B_star[t] @ E0 + dr.f_star[t])
        d2[t] = ZI @ dr.D_star[t]
        d5[t] = base - ZI @ (dr.B_star[t] @ E0_offset + u_star[t])
        d6[t] = ZI @ dr.B_star[t] @ (Ilam[:, None] * D_xi)

    for t in range(t0 + 1, T + 1):
        B_t = params.B(t)
        Id_prev = rc.I_d[t - 1].astype(float)
        keep_prev = 1 - Id_prev
        BI = B_t * Id_prev[None, :]
        base = exps.x[t] - B_t @ (keep_prev * exps.x[t - 1])
        d3[t] = base - BI @ (dr.B_star[t - 1] @ E0 + dr.f_star[t - 1]) \
            - design_u.f(t)
        d4[t] = design_u.D(t) + BI @ dr.D_star[t - 1]
        d7[t] = base - BI @ (dr.B_star[t - 1] @ E0_offset + u_star[t - 1]) \
            - params.u(t)
        d8[t] = BI @ dr.B_star[t - 1] @ (Ilam[:, None] * D_xi)

    return DeltaSet(d1, d2, d3, d4, d5, d6, d7, d8)


# ---------------------------------------------------------------------------
# moment substitution at the initial time


def t0_moments(spec, params, exps):
    """Initial-time moments with fixed rows read from the current xi.

    Stochastic rows keep their smoothed values; rows fixed through all-zero
    F rows are parameters and their (co)variances vanish.  Returns
    ``(x0, P0, P_lag at t0+1, yx at t0 or None)``.
    """
    t0 = spec.t0
    Ilam = ~np.any(spec.F != 0.0, axis=1)
    keep = (~Ilam).astype(float)
    x0 = keep * exps.x[t0] + Ilam * params.xi
    V0 = keep[:, None] * exps.V[t0] * keep[None, :]
    P0 = V0 + np.outer(x0, x0)
    P_lag_1 = None
    if spec.T >= t0 + 1:
        P_lag_1 = exps.V_lag[t0 + 1] * keep[None, :] + np.outer(exps.x[t0 + 1], x0)
    yx0 = None
    if t0 == 1:
        yx0 = (exps.yx[1] - np.outer(exps.y[1], exps.x[1])) * keep[None, :] \
            + np.outer(exps.y[1], x0)
    return x0, P0, P_lag_1, yx0


def _state_moment_row(spec, params, exps, t):
    """(x_{t-1}, P_{t-1}, P_lag_t) with the t0 substitution applied."""
    if t == spec.t0 + 1:
        x0, P0, P_lag_1, _ = t0_moments(spec, params, exps)
        return x0, P0, P_lag_1
    return exps.x[t - 1], exps.P[t - 1], exps.P_lag[t]


def _obs_moment_row(spec, params, exps, t):
    """(x_t, P_t, yx_t) with the t0 substitution applied when t = t0."""
    if t == spec.t0 == 1:
        x0, P0, _, yx0 = t0_moments(spec, params, exps)
        return x0, P0, yx0
    return exps.x[t], exps.P[t], exps.yx[t]


# ---------------------------------------------------------------------------
# update equations


def update_beta(spec, params, exps, proj):
    """Transition-matrix free values."""
    design = spec.design("B")
    s = design.s
    A = np.zeros((s, s))
    b = np.zeros(s)
    for t in range(spec.t0 + 1, spec.T + 1):
        Qm = proj.Qm(t)
        x_prev, P_prev, P_lag = _state_moment_row(spec, params, exps, t)
        D, f = design.D(t), design.f(t)
        big = kron(P_prev, Qm)
        A += D.T @ big @ D
        b += D.T @ (vec(Qm @ P_lag) - big @ f - vec(Qm @ np.outer(params.u(t), x_prev)))
    return _solve_normal(A, b, "B")


def update_zeta(spec, params, exps, proj):
    """Observation-matrix free values (exact analog of the transition update)."""
    design = spec.design("Z")
    s = design.s
    A = np.zeros((s, s))
    b = np.zeros(s)
    for t in range(1, spec.T + 1):
        Rm = proj.Rm(t)
        x_t, P_t, yx_t = _obs_moment_row(spec, params, exps, t)
        D, f = design.D(t), design.f(t)
        big = kron(P_t, Rm)
        A += D.T @ big @ D
        b += D.T @ (vec(Rm @ yx_t) - big @ f - vec(Rm @ np.outer(params.a(t), x_t)))
    return _solve_normal(A, b, "Z")


def update_alpha(spec, params, exps, proj):
    """Observation-intercept free values."""
    design = spec.design("A")
    s = design.s
    A = np.zeros((s, s))
    b = np.zeros(s)
    for t in range(1, spec.T + 1):
        Rm = proj.Rm(t)
        x_t, _, _ = _obs_moment_row(spec, params, exps, t)
        D = design.D(t)
        A += D.T @ Rm @ D
        b += D.T @ Rm @ (exps.y[t] - params.Z(t) @ x_t - design.f(t))
    return _solve_normal(A, b, "A")


def update_upsilon(spec, params, exps, proj, deltas):
    """State-intercept free values, deterministic rows folded in.

    With no deterministic rows past t0 this is algebraically the plain
    constrained update.
    """
    su = spec.design("U").s
    A = np.zeros((su, su))
    b = np.zeros(su)
    for t in range(spec.t0 + 1, spec.T + 1):
        Qm = proj.Qm(t)
        A += deltas.d4[t].T @ Qm @ deltas.d4[t]
        b += deltas.d4[t].T @ Qm @ deltas.d3[t]
    for t in range(1, spec.T + 1):
        Rm = proj.Rm(t)
        A += deltas.d2[t].T @ Rm @ deltas.d2[t]
        b += deltas.d2[t].T @ Rm @ deltas.d1[t]
    return _solve_normal(A, b, "U")


def update_upsilon_general(spec, params, exps, proj):
    """Plain constrained intercept update (no deterministic-row terms)."""
    design = spec.design("U")
    s = design.s
    A = np.zeros((s, s))
    b = np.zeros(s)
    for t in range(spec.t0 + 1, spec.T + 1):
        Qm = proj.Qm(t)
        x_prev, _, _ = _state_moment_row(spec, params, exps, t)
        D = design.D(t)
        A += D.T @ Qm @ D
        b += D.T @ Qm @ (exps.x[t] - params.B(t) @ x_prev - design.f(t))
    return _solve_normal(A, b, "U")


def _S_matrix(spec, params, exps, t):
    """Inner state-residual second moment pushed through the noise projection."""
    B_t, u_t = params.B(t), params.u(t)
    x_prev, P_prev, P_lag = _state_moment_row(spec, params, exps, t)
    x_t = exps.x[t]
    core = (exps.P[t] - P_lag @ B_t.T - B_t @ P_lag.T
            - np.outer(x_t, u_t) - np.outer(u_t, x_t)
            + B_t @ P_prev @ B_t.T + B_t @ np.outer(x_prev, u_t)
            + np.outer(u_t, x_prev) @ B_t.T + np.outer(u_t, u_t))
    return symmetrize(params.Phi @ core @ params.Phi.T)


def update_q(spec, params, exps):
    """State noise covariance free values."""
    design = spec.design("Q")
    s = design.s
    A = np.zeros((s, s))
    b = np.zeros(s)
    for t in range(spec.t0 + 1, spec.T + 1):
        D = design.D(t)
        A += D.T @ D
        b += D.T @ vec(_S_matrix(spec, params, exps, t))
    return _solve_normal(A, b, "Q")


def _R_inner(spec, params, exps, t):
    Z_t, a_t = params.Z(t), params.a(t)
    x_t, P_t, yx_t = _obs_moment_row(spec, params, exps, t)
    y_t = exps.y[t]
    core = (exps.O[t] - yx_t @ Z_t.T - Z_t @ yx_t.T
            - np.outer(y_t, a_t) - np.outer(a_t, y_t)
            + Z_t @ P_t @ Z_t.T + Z_t @ np.outer(x_t, a_t)
            + np.outer(a_t, x_t) @ Z_t.T + np.outer(a_t, a_t))
    return symmetrize(params.Xi_proj @ core @ params.Xi_proj.T)


def update_r(spec, params, exps):
    """Observation noise covariance free values."""
    design = spec.design("R")
    s = design.s
    A = np.zeros((s, s))
    b = np.zeros(s)
    for t in range(1, spec.T + 1):
        D = design.D(t)
        A += D.T @ D
        b += D.T @ vec(_R_inner(spec, params, exps, t))
    return _solve_normal(A, b, "R")


def update_xi(spec, params, exps, proj, deltas=None, mode="degenerate_general"):
    """Initial-state free values.

    ``degenerate_general`` covers every initial-state treatment and is what
    the EM loop uses; the three named modes implement the textbook special
    cases for a wholly stochastic or wholly fixed initial state and are
    retained for cross-checking.
    """
    design = spec.design("Xi")
    D, f = design.D(1), design.f(1)
    if mode == "stochastic":
        A = D.T @ proj.LAMm @ D
        b = D.T @ proj.LAMm @ (exps.x[spec.t0] - f)
        return _solve_normal(A, b, "Xi")
    if mode == "fixed_x0":
        if spec.t0 != 0:
            raise ModelSpecError("fixed_x0 update requires t0 = 0")
        B1, Qm1 = params.B(1), proj.Qm(1)
        BD = B1 @ D
        A = BD.T @ Qm1 @ BD
        b = BD.T @ Qm1 @ (exps.x[1] - B1 @ f - params.u(1))
        return _solve_normal(A, b, "Xi")
    if mode == "fixed_x1":
        if spec.t0 != 1:
            raise ModelSpecError("fixed_x1 update requires t0 = 1")
        ZD = params.Z(1) @ D
        A = ZD.T @ proj.Rm(1) @ ZD
        b = ZD.T @ proj.Rm(1) @ (exps.y[1] - params.Z(1) @ f - params.a(1))
        if spec.T >= 2:
            BD = params.B(2) @ D
            A = A + BD.T @ proj.Qm(2) @ BD
            b = b + BD.T @ proj.Qm(2) @ (exps.x[2] - params.B(2) @ f - params.u(2))
        return _solve_normal(A, b, "Xi")
    if mode != "degenerate_general":
        raise ModelSpecError(f"unknown xi update mode {mode!r}")
    if deltas is None:
        raise ModelSpecError("degenerate_general xi update needs delta terms")
    sp = design.s
    A = D.T @ proj.LAMm @ D
    Ilam = ~np.any(spec.F != 0.0, axis=1)
    E0 = np.where(Ilam, params.xi, exps.x[spec.t0])
    b = D.T @ proj.LAMm @ (E0 - f)
    for t in range(spec.t0 + 1, spec.T + 1):
        Qm = proj.Qm(t)
        A += deltas.d8[t].T @ Qm @ deltas.d8[t]
        b += deltas.d8[t].T @ Qm @ deltas.d7[t]
    for t in range(1, spec.T + 1):
        Rm = proj.Rm(t)
        A += deltas.d6[t].T @ Rm @ deltas.d6[t]
        b += deltas.d6[t].T @ Rm @ deltas.d5[t]
    return _solve_normal(A, b, "Xi")


def update_lambda(spec, params, exps):
    """Initial-state covariance free values.

    Design-projected form of the moment around the current initial mean;
    with an unconstrained design and the mean already updated to the
    smoothed value this is exactly the smoothed initial covariance.
    """
    if spec.gl == 0:
        raise ModelSpecError("Lambda update requires at least one stochastic "
                             "initial-state row")
    design = spec.design("Lambda")
    D = design.D(1)
    resid = exps.x[spec.t0] - params.xi
    moment = params.Pi @ (exps.V[spec.t0] + np.outer(resid, resid)) @ params.Pi.T
    A = D.T @ D
    b = D.T @ vec(symmetrize(moment))
    return _solve_normal(A, b, "Lambda")


# ---------------------------------------------------------------------------
# expected log-likelihood


def expected_loglik(spec, params, exps):
    """Expected complete-data log-likelihood under fixed conditional moments.

    Quadratic terms use the stored second moments so the expectation is
    exact; moments touching the initial time substitute the current initial
    value on rows fixed through all-zero F rows, so the initial-state
    dependence of the objective is carried by the parameters rather than by
    stale smoothed values.
    """
    T, t0 = spec.T, spec.t0
    proj = precision_projections(spec, params)
    total = 0.0
    count = 0.0

    if spec.gr:
        logdet_R = {}
        for t in range(1, T + 1):
            Rm = proj.Rm(t)
            total += float(np.sum(Rm * _obs_quadratic(spec, params, exps, t)))
            key = t if spec.design("R").time_varying else 0
            if key not in logdet_R:
                sign, ld = np.linalg.slogdet(params.R(t))
                if sign <= 0:
                    raise ModelSpecError("R must be positive definite")
                logdet_R[key] = ld
            total += logdet_R[key]
        count += T * spec.gr

    if spec.gq:
        logdet_Q = {}
        for t in range(t0 + 1, T + 1):
            Qm = proj.Qm(t)
            total += float(np.sum(Qm * _state_quadratic(spec, params, exps, t)))
            key = t if spec.design("Q").time_varying else 0
            if key not in logdet_Q:
                sign, ld = np.linalg.slogdet(params.Q(t))
                if sign <= 0:
                    raise ModelSpecError("Q must be positive definite")
                logdet_Q[key] = ld
            total += logdet_Q[key]
        count += (T - t0) * spec.gq

    if spec.gl:
        x0, P0, _, _ = t0_moments(spec, params, exps)
        xi = params.xi
        M0 = P0 - np.outer(x0, xi) - np.outer(xi, x0) + np.outer(xi, xi)
        total += float(np.sum(proj.LAMm * M0))
        sign, ld = np.linalg.slogdet(params.Lam)
        if sign <= 0:
            raise ModelSpecError("Lambda must be positive definite")
        total += ld
        count += spec.gl

    return -0.5 * (total + count * np.log(2.0 * np.pi))


def _obs_quadratic(spec, params, exps, t):
    Z_t, a_t = params.Z(t), params.a(t)
    x_t, P_t, yx_t = _obs_moment_row(spec, params, exps, t)
    y_t = exps.y[t]
    return (exps.O[t] - yx_t @ Z_t.T - Z_t @ yx_t.T
            - np.outer(y_t, a_t) - np.outer(a_t, y_t)
            + Z_t @ P_t @ Z_t.T + Z_t @ np.outer(x_t, a_t)
            + np.outer(a_t, x_t) @ Z_t.T + np.outer(a_t, a_t))


def _state_quadratic(spec, params, exps, t):
    B_t, u_t = params.B(t), params.u(t)
    x_prev, P_prev, P_lag = _state_moment_row(spec, params, exps, t)
    x_t = exps.x[t]
    return (exps.P[t] - P_lag @ B_t.T - B_t @ P_lag.T
            - np.outer(x_t, u_t) - np.outer(u_t, x_t)
            + B_t @ P_prev @ B_t.T + B_t @ np.outer(x_prev, u_t)
            + np.outer(u_t, x_prev) @ B_t.T + np.outer(u_t, u_t))
