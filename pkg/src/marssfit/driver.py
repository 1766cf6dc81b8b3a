"""EM loop: model-validity checks, the E/M cycle, convergence control,
and Monte Carlo initialization."""

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import (
    FilterInconsistencyError,
    FitError,
    IdentifiabilityError,
    ModelSpecError,
)
from .expectations import compute_expectations
from .linalg import svd_rank, unvec
from .model import (
    FreeParams,
    ModelSpec,
    ParamDesign,
    Violation,
    materialize_params,
    validate_spec,
)
from .updates import (
    classification_for,
    compute_deltas,
    det_recursion,
    precision_projections,
    update_alpha,
    update_beta,
    update_lambda,
    update_q,
    update_r,
    update_upsilon,
    update_xi,
    update_zeta,
)

# Variance free values below this are candidates for pinning to exact zero.
DEGENERATE_PIN_TOL = 1e-8

# Ordered M-step: state block, then observation block, then initial state,
# each update consuming the freshest values.
UPDATE_ORDER = ("B", "U", "Q", "Z", "A", "R", "Xi", "Lambda")


@dataclass(frozen=True)
class EMConfig:
    max_iterations: int = 500
    abstol: float = 1e-8
    safe_mode: bool = False
    monotonicity_action: str = "warn"  # "warn" or "abort"
    mc_inits: int = 1
    mc_seed: int = 0
    mc_perturb_scale: float = 1.0

    def __post_init__(self):
        if self.abstol <= 0:
            raise ModelSpecError("abstol must be positive")
        if self.max_iterations < 1:
            raise ModelSpecError("max_iterations must be at least 1")
        if self.monotonicity_action not in ("warn", "abort"):
            raise ModelSpecError("monotonicity_action must be 'warn' or 'abort'")


@dataclass
class FitResult:
    params: FreeParams
    loglik_trace: np.ndarray
    converged: bool
    iterations_used: int
    warnings: list
    spec: ModelSpec  # final spec; variance pinning may have altered designs


# ---------------------------------------------------------------------------
# model checks


def _structural_pattern(design):
    """0/1 possibly-nonzero pattern of a designed parameter (union over time)."""
    rows, cols = design.target_rows, design.target_cols
    pat = np.zeros((rows, cols), dtype=bool)
    for f, D in zip(design.f_by_time, design.D_by_time):
        nz = (np.abs(f) > 0) | (np.abs(D).sum(axis=1) > 0)
        pat |= unvec(nz.astype(float), rows, cols) != 0
    return pat.astype(float)


def _rows_estimated(design, row_flags):
    """True if any free value loads on a flagged row of the target matrix."""
    rows = design.target_rows
    idx = [j * rows + i for j in range(design.target_cols)
           for i in range(rows) if row_flags[i]]
    return any(np.abs(D[idx, :]).sum() > 0 for D in design.D_by_time) if idx else False


def kemcheck(spec, params=None, data=None):
    """Degenerate-model validity conditions; violations come back as data.

    Structural rules (a)-(i) need only the spec.  Rule (j), the probe
    filter, additionally needs parameter values and data; rule (k), the
    iteration-1 invertibility of the intercept and initial-state normal
    matrices, needs parameter values.
    """
    out = []
    m, n = spec.m, spec.n
    Iq0 = ~np.any(spec.G != 0.0, axis=1)
    Ir0 = ~np.any(spec.H != 0.0, axis=1)
    Ilam0 = ~np.any(spec.F != 0.0, axis=1)
    dB, dU = spec.design("B"), spec.design("U")
    dZ, dA = spec.design("Z"), spec.design("A")
    dXi = spec.design("Xi")

    Z_pat = _structural_pattern(dZ)
    link = (Ir0[:, None] * Z_pat * Iq0[None, :])  # zero-noise obs reading zero-noise states

    if dB.s and link.any():
        C = np.kron(np.eye(m), link)
        if any(np.abs(C @ D).sum() > 0 for D in dB.D_by_time):
            out.append(Violation(
                "a", "transition elements linking zero-variance observation rows "
                     "to zero-variance state rows must be fixed"))
    if dU.s and link.any():
        if any(np.abs(link @ D).sum() > 0 for D in dU.D_by_time):
            out.append(Violation(
                "b", "state intercept rows feeding zero-variance observation rows "
                     "through zero-variance states must be fixed"))
    if dZ.s and _rows_estimated(dZ, Ir0):
        out.append(Violation(
            "c", "observation-matrix rows with zero observation variance must "
                 "be fixed"))
    if dA.s and _rows_estimated(dA, Ir0):
        out.append(Violation(
            "d", "observation-intercept rows with zero observation variance "
                 "must be fixed"))
    if dB.s and _rows_estimated(dB, Iq0):
        out.append(Violation(
            "e", "transition rows with zero state variance must be fixed"))

    rc = None
    try:
        rc = classification_for(spec)
    except ModelSpecError as exc:
        # a moving or row-flipping transition pattern breaks the
        # deterministic-row bookkeeping needed by the intercept and
        # initial-state updates
        if (dU.s or dXi.s or _rows_estimated(dU, Iq0)
                or _rows_estimated(dXi, Ilam0)):
            out.append(Violation("g", str(exc)))
    if rc is not None and dU.s and _rows_estimated(dU, rc.I_is):
        out.append(Violation(
            "f", "state-intercept rows that become indirectly stochastic must "
                 "be fixed"))

    if Ir0.any():
        for k in range(dZ.n_times):
            Z0 = unvec(dZ.f_by_time[k], n, m)[Ir0, :]
            nonzero = np.abs(Z0).sum(axis=1) > 0
            rank, _ = svd_rank(Z0[nonzero, :])
            if rank < int(nonzero.sum()):
                out.append(Violation(
                    "i", "zero-variance observation rows are linearly dependent: "
                         "the deterministic observation system is over-determined"))
                break

    if params is not None and data is not None:
        try:
            mats = materialize_params(spec, params)
            exps, _ = compute_expectations(spec, mats, data)
            if Ir0.any():
                for t in range(1, spec.T + 1):
                    obs = data.observed[:, t - 1] & Ir0
                    if not obs.any():
                        continue
                    resid = data.y[obs, t - 1] - (mats.Z(t) @ exps.x[t]
                                                  + mats.a(t))[obs]
                    if np.any(np.abs(resid) > 1e-6 * (1 + np.abs(data.y[obs, t - 1]))):
                        out.append(Violation(
                            "j", f"data on zero-variance observation rows are "
                                 f"inconsistent with the smoothed states at t={t}"))
                        break
        except (FilterInconsistencyError, ModelSpecError, np.linalg.LinAlgError) as exc:
            out.append(Violation("j", f"probe filter failed: {exc}"))

    if params is not None and rc is not None and (dU.s or dXi.s):
        try:
            mats = materialize_params(spec, params)
            proj = precision_projections(spec, mats)
            dr = det_recursion(mats, dU, spec.T, spec.t0)
            deltas = compute_deltas(spec, mats, _zero_expectations(spec), rc, dr)
            if dU.s:
                A = sum(deltas.d4[t].T @ proj.Qm(t) @ deltas.d4[t]
                        for t in range(spec.t0 + 1, spec.T + 1))
                A = A + sum(deltas.d2[t].T @ proj.Rm(t) @ deltas.d2[t]
                            for t in range(1, spec.T + 1))
                rank, _ = svd_rank(np.atleast_2d(A))
                if rank < dU.s:
                    out.append(Violation(
                        "k", "the state-intercept normal matrix is singular: some "
                             "intercept free values cannot be estimated"))
            if dXi.s:
                D = dXi.D(1)
                A = D.T @ proj.LAMm @ D
                A = A + sum(deltas.d8[t].T @ proj.Qm(t) @ deltas.d8[t]
                            for t in range(spec.t0 + 1, spec.T + 1))
                A = A + sum(deltas.d6[t].T @ proj.Rm(t) @ deltas.d6[t]
                            for t in range(1, spec.T + 1))
                rank, _ = svd_rank(np.atleast_2d(A))
                if rank < dXi.s:
                    out.append(Violation(
                        "k", "the initial-state normal matrix is singular: some "
                             "initial-state free values cannot be estimated"))
        except ModelSpecError as exc:
            out.append(Violation("k", f"cannot form iteration-1 normal matrices: {exc}"))

    return out


def _zero_expectations(spec):
    """Placeholder moments; the delta coefficient matrices ignore them."""
    from .expectations import ExpectationSet

    T, m, n = spec.T, spec.m, spec.n
    z = np.zeros
    return ExpectationSet(spec.t0, z((T + 1, m)), z((T + 1, m, m)), z((T + 1, m, m)),
                          z((T + 1, m, m)), z((T + 1, m, m)), z((T + 1, n)),
                          z((T + 1, n, n)), z((T + 1, n, n)), z((T + 1, n, m)),
                          z((T + 1, n, m)))


# ---------------------------------------------------------------------------
# one EM step


def em_step(spec, params, data, config):
    """One E-step followed by the ordered M-step.

    Returns ``(new_params, marginal_loglik)`` where the log-likelihood is the
    one of the incoming parameters (computed by this step's first E-step).
    In safe mode the E-step is re-run before every parameter update.
    """
    mats = materialize_params(spec, params)
    exps, filt = compute_expectations(spec, mats, data)
    loglik = filt.marginal_loglik
    rc = None

    current = params
    for name in UPDATE_ORDER:
        design = spec.design(name)
        if design.s == 0:
            continue
        if name == "Lambda" and spec.gl == 0:
            continue
        mats = materialize_params(spec, current)
        if config.safe_mode and current is not params:
            exps, _ = compute_expectations(spec, mats, data)
        proj = precision_projections(spec, mats)
        if name in ("U", "Xi"):
            if rc is None:
                rc = classification_for(spec)
            dr = det_recursion(mats, spec.design("U"), spec.T, spec.t0)
            deltas = compute_deltas(spec, mats, exps, rc, dr)
        if name == "B":
            value = update_beta(spec, mats, exps, proj)
        elif name == "U":
            value = update_upsilon(spec, mats, exps, proj, deltas)
        elif name == "Q":
            value = update_q(spec, mats, exps)
        elif name == "Z":
            value = update_zeta(spec, mats, exps, proj)
        elif name == "A":
            value = update_alpha(spec, mats, exps, proj)
        elif name == "R":
            value = update_r(spec, mats, exps)
        elif name == "Xi":
            value = update_xi(spec, mats, exps, proj, deltas)
        else:
            value = update_lambda(spec, mats, exps)
        current = current.with_value(name, value)
    return current, loglik


# ---------------------------------------------------------------------------
# degenerate-variance adoption


def _diag_only_columns(design):
    """Free-value indices loading exclusively on diagonal cells."""
    dim = design.target_rows
    diag_pos = {j * dim + j for j in range(dim)}
    cols = []
    for i in range(design.s):
        hit = set()
        for D in design.D_by_time:
            hit |= set(np.flatnonzero(D[:, i]).tolist())
        if hit and hit <= diag_pos:
            cols.append(i)
    return cols


def _pin_variance_to_zero(spec, params, name, col):
    """Spec with one diagonal variance value removed (loading column dropped).

    Returns ``(new_spec, new_params)`` or ``None`` when the surrounding
    structure cannot be reduced cleanly (off-diagonal couplings present).
    """
    design = spec.design(name)
    dim = design.target_rows
    drop_rows = set()
    for D in design.D_by_time:
        for pos in np.flatnonzero(D[:, col]):
            drop_rows.add(pos % dim)
    drop_rows = sorted(drop_rows)
    keep = [k for k in range(dim) if k not in drop_rows]
    # dropped rows/columns must carry nothing besides the pinned variance
    for f, D in zip(design.f_by_time, design.D_by_time):
        for k in drop_rows:
            for j in range(dim):
                if j == k:
                    continue
                for pos in (j * dim + k, k * dim + j):
                    if abs(f[pos]) > 0 or np.abs(D[pos, :]).sum() > 0:
                        return None
    keep_pos = [j * dim + i for j in keep for i in keep]
    keep_cols = [i for i in range(design.s) if i != col]
    new_design = ParamDesign(
        name, len(keep), len(keep),
        tuple(f[keep_pos] for f in design.f_by_time),
        tuple(D[np.ix_(keep_pos, keep_cols)] for D in design.D_by_time),
        tuple(design.free_names[i] for i in keep_cols))
    loading = {"Q": "G", "R": "H"}[name]
    new_loading = getattr(spec, loading)[:, keep]
    designs = dict(spec.designs)
    designs[name] = new_design
    kwargs = dict(n=spec.n, m=spec.m, T=spec.T, t0=spec.t0,
                  G=spec.G, H=spec.H, F=spec.F, designs=designs)
    kwargs[loading] = new_loading
    new_spec = ModelSpec(**kwargs)
    old_values = params.by_name(name)
    new_params = params.with_value(name, np.delete(old_values, col))
    return new_spec, new_params


def _adopt_degenerate_variances(spec, params, data, warnings):
    """Pin near-zero variances to exact zeros when the pinned model is valid.

    A variance free value below the pin tolerance is removed from the model
    (its noise dimension dropped) if the reduced spec passes the validity
    checks and the probe filter; otherwise it is floored at the tolerance
    and a warning recorded.
    """
    changed = True
    while changed:
        changed = False
        for name in ("Q", "R"):
            design = spec.design(name)
            values = params.by_name(name)
            for col in _diag_only_columns(design):
                if col >= values.size or values[col] >= DEGENERATE_PIN_TOL:
                    continue
                pinned = _pin_variance_to_zero(spec, params, name, col)
                adopted = False
                if pinned is not None:
                    new_spec, new_params = pinned
                    if not validate_spec(new_spec) and not kemcheck(
                            new_spec, new_params, data):
                        spec, params = new_spec, new_params
                        warnings.append(
                            f"{name} variance {design.free_names[col]!r} pinned "
                            f"to zero")
                        adopted = changed = True
                if not adopted:
                    floored = values.copy()
                    floored[col] = DEGENERATE_PIN_TOL
                    params = params.with_value(name, floored)
                    msg = (f"{name} variance {design.free_names[col]!r} floored "
                           f"at {DEGENERATE_PIN_TOL}")
                    if msg not in warnings:
                        warnings.append(msg)
                break
            if changed:
                break
    return spec, params


# ---------------------------------------------------------------------------
# the fit loop


def em_fit(spec, init, data, config=None):
    """Iterate EM until the log-likelihood change drops below ``abstol``.

    The trace records the marginal log-likelihood of the parameters entering
    each iteration; EM guarantees it never decreases (a decrease beyond
    1e-8 triggers the configured monotonicity action).
    """
    config = config or EMConfig()
    problems = validate_spec(spec) + kemcheck(spec, init, data)
    if problems:
        raise ModelSpecError(
            "model failed validity checks:\n" + "\n".join(str(v) for v in problems))

    params = init
    trace = []
    warnings = []
    converged = False
    decreases = 0
    for _ in range(config.max_iterations):
        try:
            params_new, loglik = em_step(spec, params, data, config)
        except (FilterInconsistencyError, IdentifiabilityError) as exc:
            raise FitError(f"EM step failed: {exc}") from exc
        trace.append(loglik)
        if len(trace) >= 2:
            delta = trace[-1] - trace[-2]
            if delta < -1e-8:
                decreases += 1
                msg = (f"log-likelihood decreased by {-delta:.3e} at iteration "
                       f"{len(trace)}")
                if config.monotonicity_action == "abort":
                    raise FitError(msg)
                warnings.append(msg)
                if decreases >= 3:
                    warnings.append("stopped after repeated log-likelihood decreases")
                    params = params_new
                    break
            if abs(delta) < config.abstol:
                converged = True
                params = params_new
                break
        params = params_new
        spec, params = _adopt_degenerate_variances(spec, params, data, warnings)
    return FitResult(params=params, loglik_trace=np.array(trace),
                     converged=converged, iterations_used=len(trace),
                     warnings=warnings, spec=spec)


# ---------------------------------------------------------------------------
# initialization


def random_init(spec, data, rng, scale=1.0):
    """One random initialization.

    Variance values are log-uniform on [1e-2, 1] for diagonal loadings and
    zero for covariances; regression-type values are scaled normals; the
    initial state is backed out of the first observation through a
    pseudo-inverse of the observation matrix.
    """
    values = {}
    for name in ("B", "Z", "U", "A"):
        values[name] = rng.normal(scale=scale, size=spec.design(name).s)
    for name in ("Q", "R", "Lambda"):
        design = spec.design(name)
        v = np.zeros(design.s)
        for col in range(design.s):
            v[col] = np.exp(rng.uniform(np.log(1e-2), np.log(1.0)))
        for col in range(design.s):
            if col not in _diag_only_columns(design):
                v[col] = 0.0
        values[name] = v
    free = FreeParams(beta=values["B"], upsilon=values["U"], q=values["Q"],
                      zeta=values["Z"], alpha=values["A"], r=values["R"],
                      p=np.zeros(spec.design("Xi").s), lam=values["Lambda"])
    design_xi = spec.design("Xi")
    if design_xi.s:
        mats = materialize_params(spec, free, check_psd=False)
        y1 = data.y[:, 0] * data.observed[:, 0]
        target = np.linalg.pinv(mats.Z(1)) @ (y1 - mats.a(1))
        p, *_ = np.linalg.lstsq(design_xi.D(1), target - design_xi.f(1), rcond=None)
        free = free.with_value("Xi", p)
    return free


def mc_init_search(spec, data, config=None):
    """Monte Carlo restart search over random initializations.

    Runs a short EM burst from each draw and returns the initialization
    whose burst reached the highest log-likelihood.  Deterministic given
    ``mc_seed``.
    """
    config = config or EMConfig()
    if config.mc_inits < 1:
        raise ModelSpecError("mc_inits must be at least 1")
    rng = np.random.default_rng(config.mc_seed)
    burst = dataclasses.replace(config, max_iterations=min(10, config.max_iterations),
                                monotonicity_action="warn")
    best_init = None
    best_ll = -np.inf
    failures = []
    for k in range(config.mc_inits):
        init = random_init(spec, data, rng, scale=config.mc_perturb_scale)
        try:
            result = em_fit(spec, init, data, burst)
        except (FitError, ModelSpecError) as exc:
            failures.append(f"restart {k}: {exc}")
            continue
        if result.loglik_trace[-1] > best_ll:
            best_ll = result.loglik_trace[-1]
            best_init = init
    if best_init is None:
        raise FitError("all restarts failed:\n" + "\n".join(failures))
    return best_init
