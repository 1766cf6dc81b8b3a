"""Kalman filter, smoother, and lag-one covariance smoother.

Implements the classic fixed-interval recursions with two sets of
modifications:

* missing observations are handled by zeroing the matching rows of ``y``,
  ``a`` and ``Z`` and blanking cross-covariances in the full observation
  noise covariance, with all inverses taken over the observed block only;
* zero-variance (deterministic) rows are handled by restricting those same
  inverses to rows with positive variance, zeroing fully determined state
  rows exactly, and checking that the data do not contradict a
  deterministic observation row.

Time is indexed by model time: arrays have ``T + 1`` slots so that slot
``t`` is model time ``t``; slots before ``t0`` are unused.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (
    CONSISTENCY_TOL,
    FilterInconsistencyError,
    ModelSpecError,
    ZERO_DIAG_TOL,
)
from .linalg import masked_inverse, selector_from_bools, symmetrize

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class TimeSeriesData:
    """n x T observations with an explicit missingness mask.

    Missing entries of ``y`` are stored as exact zeros so downstream
    arithmetic never touches placeholder values.
    """

    y: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        y = np.array(self.y, dtype=float)
        observed = np.array(self.observed, dtype=bool)
        if y.shape != observed.shape:
            raise ModelSpecError("y and observed mask must have equal shapes")
        y[~observed] = 0.0
        y.flags.writeable = False
        observed.flags.writeable = False
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "observed", observed)

    @classmethod
    def from_array(cls, y):
        """Build from an array whose missing entries are NaN."""
        y = np.asarray(y, dtype=float)
        observed = np.isfinite(y)
        return cls(np.where(observed, y, 0.0), observed)

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def T(self):
        return self.y.shape[1]


@dataclass(frozen=True)
class FilterOutput:
    """Per-time predicted/filtered moments, gains, and the marginal loglik.

    Arrays are indexed by model time; ``x_pred[t]`` is the mean of x_t given
    data through t-1, ``x_filt[t]`` given data through t.  For ``t0 = 0``
    slot 0 of the filtered arrays holds the initial condition; for
    ``t0 = 1`` slot 1 of the predicted arrays holds it.
    """

    t0: int
    x_pred: np.ndarray
    V_pred: np.ndarray
    x_filt: np.ndarray
    V_filt: np.ndarray
    K: np.ndarray
    marginal_loglik: float


@dataclass(frozen=True)
class SmootherOutput:
    """Smoothed means/covariances (from t0) and lag-one covariances.

    ``V_lag[t]`` holds cov(x_t, x_{t-1} | all data) for t >= t0 + 1.
    """

    t0: int
    x_smooth: np.ndarray
    V_smooth: np.ndarray
    V_lag: np.ndarray


def missing_mask(observed_t):
    """Selectors extracting the observed and the missing coordinates."""
    observed_t = np.asarray(observed_t, dtype=bool)
    omega1 = selector_from_bools(observed_t)
    omega2 = selector_from_bools(~observed_t)
    return omega1, omega2


def starred_obs_params(y_t, a_t, Z_t, R_full_t, observed_t):
    """Missing-data modification of the observation parameters.

    Zeroes the missing rows of ``y``, ``a`` and ``Z`` and the covariances
    between observed and missing coordinates of the full observation noise
    covariance ``R_full_t = H R_t H^T``.
    """
    observed_t = np.asarray(observed_t, dtype=bool)
    obs = observed_t.astype(float)
    y_star = np.asarray(y_t, dtype=float).reshape(-1) * obs
    a_star = np.asarray(a_t, dtype=float).reshape(-1) * obs
    Z_star = np.asarray(Z_t, dtype=float) * obs[:, None]
    mask = np.outer(obs, obs)
    R_full_t = np.asarray(R_full_t, dtype=float)
    R_star = R_full_t * mask + R_full_t * np.outer(1 - obs, 1 - obs)
    return y_star, a_star, Z_star, R_star


def _zero_determined_rows(V):
    """Exactly zero rows/columns whose diagonal is at the structural-zero level."""
    d = np.diag(V).copy()
    determined = d <= ZERO_DIAG_TOL
    if determined.any():
        V = V.copy()
        V[determined, :] = 0.0
        V[:, determined] = 0.0
    return V


def kalman_filter(spec, params, data):
    """Forward pass: predicted/filtered moments and the innovations loglik.

    The innovation covariance is inverted over the observed coordinates,
    further restricted to positive-variance coordinates when the model has
    zero-variance observation rows.  Observed coordinates whose innovation
    variance is structurally zero are checked for consistency with the
    data; a contradiction raises ``FilterInconsistencyError`` (the model
    assigns the data likelihood zero, i.e. LL = +inf as a sentinel for
    "impossible").
    """
    m, n, T, t0 = spec.m, spec.n, spec.T, spec.t0
    y, observed = data.y, data.observed
    if data.n != n or data.T != T:
        raise ModelSpecError(f"data is {data.n}x{data.T}, model expects {n}x{T}")

    x_pred = np.zeros((T + 1, m))
    V_pred = np.zeros((T + 1, m, m))
    x_filt = np.zeros((T + 1, m))
    V_filt = np.zeros((T + 1, m, m))
    K_arr = np.zeros((T + 1, m, n))

    fixed_init = ~np.any(spec.F != 0.0, axis=1)  # all-zero F rows: fixed xi entries
    degenerate_obs = bool(np.any(np.diag(params.Rfull(1)) <= ZERO_DIAG_TOL)) or any(
        np.any(np.diag(params.Rfull(t)) <= ZERO_DIAG_TOL) for t in range(2, T + 1)
        if spec.design("R").time_varying)

    if t0 == 0:
        x_filt[0] = params.xi
        V_filt[0] = symmetrize(params.Lamfull)

    loglik = 0.0
    for t in range(1, T + 1):
        if t0 == 1 and t == 1:
            x_pred[1] = params.xi
            V_pred[1] = symmetrize(params.Lamfull)
        else:
            B_t, u_t = params.B(t), params.u(t)
            x_pred[t] = B_t @ x_filt[t - 1] + u_t
            V_pred[t] = symmetrize(B_t @ V_filt[t - 1] @ B_t.T + params.Qfull(t))

        obs_t = observed[:, t - 1]
        y_star, a_star, Z_star, R_star = starred_obs_params(
            y[:, t - 1], params.a(t), params.Z(t), params.Rfull(t), obs_t)
        sigma = symmetrize(Z_star @ V_pred[t] @ Z_star.T + R_star)

        keep = obs_t.copy()
        if degenerate_obs:
            keep &= np.diag(sigma) > ZERO_DIAG_TOL
        sel = selector_from_bools(keep)

        if np.all(V_pred[t] == 0.0):
            K = np.zeros((m, n))
        else:
            try:
                K = V_pred[t] @ Z_star.T @ masked_inverse(sigma, sel)
            except np.linalg.LinAlgError as exc:
                raise ModelSpecError(
                    f"innovation covariance singular at t={t}: the state and "
                    f"observation constraints are inconsistent ({exc})") from exc
        if t == t0 and fixed_init.any():
            K = K.copy()
            K[fixed_init, :] = 0.0
        K_arr[t] = K

        innovation = y_star - Z_star @ x_pred[t] - a_star
        dropped = obs_t & ~keep
        if dropped.any():
            bad = np.abs(innovation[dropped]) > CONSISTENCY_TOL * (
                1.0 + np.abs(y[dropped, t - 1]))
            if bad.any():
                rows = np.flatnonzero(dropped)[bad]
                raise FilterInconsistencyError(
                    f"data at t={t}, rows {rows.tolist()} contradict a "
                    f"zero-variance observation row")

        x_filt[t] = x_pred[t] + K @ innovation
        V_filt[t] = _zero_determined_rows(symmetrize((np.eye(m) - K @ Z_star) @ V_pred[t]))

        if sel.size:
            idx = np.array(sel.kept_indices)
            sig_sub = sigma[np.ix_(idx, idx)]
            eps = innovation[idx]
            sign, logdet = np.linalg.slogdet(sig_sub)
            if sign <= 0:
                raise ModelSpecError(f"innovation covariance not PD at t={t}")
            loglik -= 0.5 * (eps @ np.linalg.solve(sig_sub, eps) + logdet
                             + sel.size * LOG_2PI)

    return FilterOutput(t0, x_pred, V_pred, x_filt, V_filt, K_arr, float(loglik))


def kalman_smoother(spec, params, data, filt):
    """Backward pass: smoothed moments including model time ``t0``.

    The smoother gain uses a masked inverse of the one-step-ahead covariance
    restricted to positive-variance rows so deterministic state rows (which
    have exactly zero variance) pass through without blowing up.
    """
    m, T, t0 = spec.m, spec.T, spec.t0
    x_sm = np.zeros((T + 1, m))
    V_sm = np.zeros((T + 1, m, m))
    V_lag = np.zeros((T + 1, m, m))
    J = np.zeros((T + 1, m, m))

    x_sm[T] = filt.x_filt[T]
    V_sm[T] = filt.V_filt[T]
    for t in range(T, t0, -1):
        keep = np.diag(filt.V_pred[t]) > ZERO_DIAG_TOL
        Jt = filt.V_filt[t - 1] @ params.B(t).T @ masked_inverse(
            filt.V_pred[t], selector_from_bools(keep))
        J[t - 1] = Jt
        x_sm[t - 1] = filt.x_filt[t - 1] + Jt @ (x_sm[t] - filt.x_pred[t])
        V_sm[t - 1] = symmetrize(
            filt.V_filt[t - 1] + Jt @ (V_sm[t] - filt.V_pred[t]) @ Jt.T)

    if T >= t0 + 1:
        obs_T = data.observed[:, T - 1]
        Z_star_T = params.Z(T) * obs_T.astype(float)[:, None]
        V_lag[T] = (np.eye(m) - filt.K[T] @ Z_star_T) @ params.B(T) @ filt.V_filt[T - 1]
        for t in range(T, t0 + 1, -1):
            V_lag[t - 1] = (filt.V_filt[t - 1] @ J[t - 2].T
                            + J[t - 1] @ (V_lag[t] - params.B(t) @ filt.V_filt[t - 1])
                            @ J[t - 2].T)

    return SmootherOutput(t0, x_sm, V_sm, V_lag)
