"""Conditional moments of states and observations given the observed data.

The state moments come straight from the smoother; the observation moments
use the residual conditioner ``IR_t``, which blends the model prediction
into the missing coordinates.  With a diagonal observation covariance
``IR_t`` reduces to the indicator of the missing coordinates, and with no
missing data it is zero.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ZERO_DIAG_TOL
from .kalman import kalman_filter, kalman_smoother
from .linalg import MaskSelector, masked_inverse, selector_from_bools, symmetrize


@dataclass(frozen=True)
class ObsConditioner:
    """``IR_t`` and the selector of observed, positive-variance coordinates.

    Rows of ``IR_t`` at selected coordinates are exactly zero (the matching
    columns are zero too whenever the observation covariance is diagonal).
    """

    IR: np.ndarray
    selector: MaskSelector


@dataclass(frozen=True)
class ExpectationSet:
    """All per-time conditional moments consumed by the update equations.

    Arrays are indexed by model time (t0..T for state moments, 1..T for
    observation moments); lag arrays are valid from t0 + 1.
    """

    t0: int
    x: np.ndarray        # (T+1, m)    E[x_t | data]
    V: np.ndarray        # (T+1, m, m) var[x_t | data]
    V_lag: np.ndarray    # (T+1, m, m) cov[x_t, x_{t-1} | data]
    P: np.ndarray        # (T+1, m, m) E[x_t x_t^T | data]
    P_lag: np.ndarray    # (T+1, m, m) E[x_t x_{t-1}^T | data]
    y: np.ndarray        # (T+1, n)    E[y_t | data]
    O: np.ndarray        # (T+1, n, n) E[y_t y_t^T | data]
    W: np.ndarray        # (T+1, n, n) var[y_t | data]
    yx: np.ndarray       # (T+1, n, m) E[y_t x_t^T | data]
    yx_lag: np.ndarray   # (T+1, n, m) E[y_t x_{t-1}^T | data]


def ir_matrix(R_full_t, observed_t):
    """Residual conditioner for one time step.

    The selector keeps coordinates that are observed and carry observation
    noise (positive diagonal of ``H R H^T``); this one rule covers both the
    ordinary and the zero-variance case.  Rows and columns of ``IR_t`` at
    selected coordinates are zero.
    """
    R_full_t = np.asarray(R_full_t, dtype=float)
    observed_t = np.asarray(observed_t, dtype=bool)
    keep = observed_t & (np.diag(R_full_t) > ZERO_DIAG_TOL)
    selector = selector_from_bools(keep)
    n = R_full_t.shape[0]
    if keep.all():
        return ObsConditioner(np.zeros((n, n)), selector)
    if not keep.any():
        return ObsConditioner(np.eye(n), selector)
    IR = np.eye(n) - R_full_t @ masked_inverse(R_full_t, selector)
    IR[keep, :] = 0.0  # structurally zero rows; clear inverse round-off
    return ObsConditioner(IR, selector)


def state_moments(smoother):
    """Second moments ``P_t`` and ``P_{t,t-1}`` from the smoothed output."""
    T = smoother.x_smooth.shape[0] - 1
    t0 = smoother.t0
    P = np.zeros_like(smoother.V_smooth)
    P_lag = np.zeros_like(smoother.V_lag)
    for t in range(t0, T + 1):
        x = smoother.x_smooth[t]
        P[t] = symmetrize(smoother.V_smooth[t] + np.outer(x, x))
    for t in range(t0 + 1, T + 1):
        P_lag[t] = smoother.V_lag[t] + np.outer(smoother.x_smooth[t],
                                                smoother.x_smooth[t - 1])
    return P, P_lag


def y_expectations(spec, params, data, smoother):
    """All conditional moments, observation moments included."""
    n, m, T, t0 = spec.n, spec.m, spec.T, spec.t0
    P, P_lag = state_moments(smoother)
    y_hat = np.zeros((T + 1, n))
    O_hat = np.zeros((T + 1, n, n))
    W_hat = np.zeros((T + 1, n, n))
    yx = np.zeros((T + 1, n, m))
    yx_lag = np.zeros((T + 1, n, m))
    for t in range(1, T + 1):
        obs_t = data.observed[:, t - 1]
        R_full = params.Rfull(t)
        cond = ir_matrix(R_full, obs_t)
        IR = cond.IR
        Z_t, a_t = params.Z(t), params.a(t)
        x_t = smoother.x_smooth[t]
        V_t = smoother.V_smooth[t]
        y_t = data.y[:, t - 1]
        if cond.selector.size == n:
            # everything observed with noise: moments pass the data through
            y_hat[t] = y_t
            O_hat[t] = np.outer(y_t, y_t)
            yx[t] = np.outer(y_t, x_t)
            if t >= t0 + 1:
                yx_lag[t] = np.outer(y_t, smoother.x_smooth[t - 1])
            continue
        y_hat[t] = y_t - IR @ (y_t - Z_t @ x_t - a_t)
        I2 = np.diag((~obs_t).astype(float))
        core = IR @ R_full + IR @ Z_t @ V_t @ Z_t.T @ IR.T
        O_hat[t] = symmetrize(I2 @ core @ I2 + np.outer(y_hat[t], y_hat[t]))
        W_hat[t] = symmetrize(O_hat[t] - np.outer(y_hat[t], y_hat[t]))
        yx[t] = IR @ Z_t @ V_t + np.outer(y_hat[t], x_t)
        if t >= t0 + 1:
            yx_lag[t] = IR @ Z_t @ smoother.V_lag[t] + np.outer(
                y_hat[t], smoother.x_smooth[t - 1])
    return ExpectationSet(t0, smoother.x_smooth, smoother.V_smooth,
                          smoother.V_lag, P, P_lag, y_hat, O_hat, W_hat, yx, yx_lag)


def compute_expectations(spec, params, data):
    """One full E-step: filter, smoother, then all conditional moments.

    Returns ``(expectations, filter_output)``; the filter output carries the
    marginal log-likelihood of the parameters used.
    """
    filt = kalman_filter(spec, params, data)
    smooth = kalman_smoother(spec, params, data, filt)
    return y_expectations(spec, params, data, smooth), filt
