"""Constrained state-space model specification.

A model is

    x_t  = B_t x_{t-1} + u_t + G w_t,    w_t ~ MVN(0, Q_t)
    y_t  = Z_t x_t + a_t + H v_t,        v_t ~ MVN(0, R_t)
    x_t0 = xi + F l,                     l   ~ MVN(0, Lambda),  t0 in {0, 1}

where every parameter matrix M is expressed through a linear design
``vec(M_t) = f_t + D_t @ values`` with fully known ``f_t`` and ``D_t``.
``G`` loads state noise (pairs with ``Q``), ``H`` loads observation noise
(pairs with ``R``); all-zero rows of ``G``/``H``/``F`` make the matching
state, observation, or initial-state rows deterministic.
"""

import re
from dataclasses import dataclass, fields, replace
from types import MappingProxyType

import numpy as np

from .errors import ModelSpecError, PSD_EIG_FLOOR
from .linalg import svd_rank, unvec, vec

PARAM_NAMES = ("B", "U", "Q", "Z", "A", "R", "Xi", "Lambda")

# Parameter name -> FreeParams attribute holding its free-value vector.
FREE_FIELDS = {
    "B": "beta",
    "U": "upsilon",
    "Q": "q",
    "Z": "zeta",
    "A": "alpha",
    "R": "r",
    "Xi": "p",
    "Lambda": "lam",
}

VARIANCE_PARAMS = ("Q", "R", "Lambda")


@dataclass(frozen=True)
class Violation:
    """One model-validity problem; plain data, never raised."""

    rule: str
    message: str

    def __str__(self):
        return f"[{self.rule}] {self.message}"


# ---------------------------------------------------------------------------
# linear designs


@dataclass(frozen=True)
class ParamDesign:
    """Linear design for one parameter: ``vec(M_t) = f_t + D_t @ values``.

    ``f_by_time`` and ``D_by_time`` hold either a single shared entry or one
    entry per time step.  ``free_names`` labels the columns of ``D``.
    """

    name: str
    target_rows: int
    target_cols: int
    f_by_time: tuple
    D_by_time: tuple
    free_names: tuple

    def __post_init__(self):
        rc = self.target_rows * self.target_cols
        s = len(self.free_names)
        f_t = tuple(np.array(f, dtype=float).reshape(-1) for f in self.f_by_time)
        D_t = tuple(np.array(D, dtype=float).reshape(rc, s) for D in self.D_by_time)
        for arr in f_t + D_t:
            arr.flags.writeable = False
        object.__setattr__(self, "f_by_time", f_t)
        object.__setattr__(self, "D_by_time", D_t)
        object.__setattr__(self, "free_names", tuple(self.free_names))
        if len(f_t) != len(D_t):
            raise ModelSpecError(f"{self.name}: f and D time lists differ in length")
        if not f_t:
            raise ModelSpecError(f"{self.name}: empty design")
        for f in f_t:
            if f.size != rc:
                raise ModelSpecError(f"{self.name}: f has length {f.size}, expected {rc}")

    @property
    def s(self):
        return len(self.free_names)

    @property
    def n_times(self):
        return len(self.f_by_time)

    @property
    def time_varying(self):
        return len(self.f_by_time) > 1

    def f(self, t):
        """Fixed part at model time ``t`` (1-based)."""
        return self.f_by_time[(t - 1) % len(self.f_by_time)] if self.time_varying \
            else self.f_by_time[0]

    def D(self, t):
        return self.D_by_time[(t - 1) % len(self.D_by_time)] if self.time_varying \
            else self.D_by_time[0]


def materialize(design, values, t=1):
    """Instantiate a design at time ``t``: ``unvec(f_t + D_t @ values)``."""
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.size != design.s:
        raise ModelSpecError(
            f"{design.name}: expected {design.s} free values, got {values.size}")
    v = design.f(t) + design.D(t) @ values
    return unvec(v, design.target_rows, design.target_cols)


def fixed_design(name, matrix):
    """Design with no free values: the parameter is the given matrix."""
    M = np.atleast_2d(np.asarray(matrix, dtype=float))
    return ParamDesign(name, M.shape[0], M.shape[1], (vec(M),),
                       (np.zeros((M.size, 0)),), ())


# ---------------------------------------------------------------------------
# symbolic grids

_TOKEN = re.compile(r"\s*(?:(?P<num>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?"
                    r"|\d+(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_]\w*)|(?P<op>[+\-*]))")


def parse_linear_cell(cell):
    """Parse one grid cell into ``(constant, {name: coefficient})``.

    Cells are numbers or linear expressions over identifiers such as
    ``"2+a+2*c"``; adjacency like ``"3c"`` also reads as a coefficient.
    """
    if isinstance(cell, (int, float, np.floating, np.integer)):
        return float(cell), {}
    tokens = []
    pos = 0
    text = str(cell)
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ModelSpecError(f"cannot parse cell {text!r} at position {pos}")
        pos = m.end()
        if m.lastgroup == "num":
            tokens.append(("num", float(m.group("num"))))
        elif m.lastgroup == "name":
            tokens.append(("name", m.group("name")))
        else:
            tokens.append(("op", m.group("op")))
    const = 0.0
    coeffs = {}
    i = 0
    sign = 1.0
    expect_term = True
    while i < len(tokens):
        kind, val = tokens[i]
        if kind == "op" and val in "+-":
            if expect_term and val == "-":
                sign = -sign
            elif expect_term:
                pass
            else:
                sign = 1.0 if val == "+" else -1.0
                expect_term = True
            i += 1
            continue
        # one term: NUM [* NAME | NAME] or NAME [* NUM]
        coeff, name = None, None
        if kind == "num":
            coeff = val
            i += 1
            if i < len(tokens) and tokens[i] == ("op", "*"):
                if i + 1 < len(tokens) and tokens[i + 1][0] == "name":
                    name = tokens[i + 1][1]
                    i += 2
                else:
                    raise ModelSpecError(f"misplaced '*' in cell {text!r}")
            elif i < len(tokens) and tokens[i][0] == "name":
                name = tokens[i][1]
                i += 1
        elif kind == "name":
            name, coeff = val, 1.0
            i += 1
            if i < len(tokens) and tokens[i] == ("op", "*"):
                if i + 1 < len(tokens) and tokens[i + 1][0] == "num":
                    coeff = tokens[i + 1][1]
                    i += 2
                else:
                    raise ModelSpecError(f"misplaced '*' in cell {text!r}")
        else:
            raise ModelSpecError(f"unexpected token in cell {text!r}")
        if name is None:
            const += sign * coeff
        else:
            coeffs[name] = coeffs.get(name, 0.0) + sign * coeff
        sign = 1.0
        expect_term = False
    if expect_term and tokens:
        raise ModelSpecError(f"dangling operator in cell {text!r}")
    return const, coeffs


def build_from_symbolic(name, cells):
    """Compile a grid of constants and linear expressions into a design.

    Free names are ordered by first appearance in a column-major scan of the
    grid.  Raises if the resulting design matrix is rank deficient, which
    means some free values are confounded (only their sum is identifiable).
    """
    rows = len(cells)
    cols = len(cells[0])
    if any(len(row) != cols for row in cells):
        raise ModelSpecError(f"{name}: ragged cell grid")
    parsed = [[parse_linear_cell(c) for c in row] for row in cells]
    names = []
    for j in range(cols):
        for i in range(rows):
            for nm in parsed[i][j][1]:
                if nm not in names:
                    names.append(nm)
    rc = rows * cols
    f = np.zeros(rc)
    D = np.zeros((rc, len(names)))
    col_of = {nm: k for k, nm in enumerate(names)}
    for j in range(cols):
        for i in range(rows):
            const, coeffs = parsed[i][j]
            pos = j * rows + i
            f[pos] = const
            for nm, cf in coeffs.items():
                D[pos, col_of[nm]] = cf
    if names:
        rank, _ = svd_rank(D)
        if rank < len(names):
            raise ModelSpecError(
                f"{name}: design matrix rank {rank} < {len(names)} free values "
                f"(confounded values)")
    return ParamDesign(name, rows, cols, (f,), (D,), tuple(names))


# ---------------------------------------------------------------------------
# structure builders for square (variance) matrices

BUILDER_KINDS = ("unconstrained-symmetric", "diagonal-equal", "diagonal-unequal",
                 "equal-varcov", "identity", "zero", "block-diagonal",
                 "block-symmetric")


def _design_from_cells(name, dim, fill):
    """Assemble (f, D, names) from a dict mapping (i, j) -> name or constant."""
    rc = dim * dim
    names = []
    entries = {}
    for j in range(dim):
        for i in range(dim):
            val = fill.get((i, j), 0.0)
            entries[(i, j)] = val
            if isinstance(val, str) and val not in names:
                names.append(val)
    f = np.zeros(rc)
    D = np.zeros((rc, len(names)))
    col_of = {nm: k for k, nm in enumerate(names)}
    for (i, j), val in entries.items():
        pos = j * dim + i
        if isinstance(val, str):
            D[pos, col_of[val]] = 1.0
        else:
            f[pos] = float(val)
    return ParamDesign(name, dim, dim, (f,), (D,), tuple(names))


def builder(name, kind, dim, blocks=None, zero_pairs=()):
    """Build a structured square design with the minimal number of free values.

    ``kind`` selects the structure; symmetric kinds share the (i, j) and
    (j, i) design rows.  ``blocks`` configures the block kinds:

    * ``block-diagonal``: list of ``(kind, size)`` or ``(kind, size, label)``
      tuples; equal labels share one set of free values and must have
      identical kind and size.
    * ``block-symmetric``: list of block sizes; diagonal blocks get one
      variance and one covariance each, off-diagonal blocks one shared
      value, except pairs listed in ``zero_pairs`` which are fixed to zero.
    """
    if kind == "identity":
        return fixed_design(name, np.eye(dim))
    if kind == "zero":
        return fixed_design(name, np.zeros((dim, dim)))
    if kind == "diagonal-equal":
        return _design_from_cells(name, dim, {(i, i): "var" for i in range(dim)})
    if kind == "diagonal-unequal":
        return _design_from_cells(name, dim, {(i, i): f"var{i + 1}" for i in range(dim)})
    if kind == "equal-varcov":
        fill = {(i, i): "var" for i in range(dim)}
        for i in range(dim):
            for j in range(dim):
                if i != j:
                    fill[(i, j)] = "cov"
        return _design_from_cells(name, dim, fill)
    if kind == "unconstrained-symmetric":
        fill = {}
        for i in range(dim):
            for j in range(dim):
                lo, hi = min(i, j), max(i, j)
                fill[(i, j)] = f"v{hi + 1}_{lo + 1}"
        return _design_from_cells(name, dim, fill)
    if kind == "block-diagonal":
        return _block_diagonal(name, dim, blocks)
    if kind == "block-symmetric":
        return _block_symmetric(name, dim, blocks, zero_pairs)
    raise ModelSpecError(f"unknown builder kind {kind!r}")


def _block_diagonal(name, dim, blocks):
    if not blocks:
        raise ModelSpecError("block-diagonal requires a list of blocks")
    norm = []
    for k, blk in enumerate(blocks):
        if len(blk) == 2:
            bkind, size = blk
            label = f"b{k + 1}"
            shared = False
        else:
            bkind, size, label = blk
            shared = True
        norm.append((bkind, int(size), str(label), shared))
    if sum(b[1] for b in norm) != dim:
        raise ModelSpecError(f"{name}: block sizes sum to {sum(b[1] for b in norm)}, "
                             f"expected {dim}")
    seen = {}
    for bkind, size, label, shared in norm:
        if label in seen and seen[label] != (bkind, size):
            raise ModelSpecError(
                f"{name}: shared blocks labelled {label!r} must be identical")
        seen[label] = (bkind, size)
    fill = {}
    offset = 0
    for bkind, size, label, _ in norm:
        sub = builder(label, bkind, size)
        subM = [[None] * size for _ in range(size)]
        f0, D0 = sub.f_by_time[0], sub.D_by_time[0]
        for j in range(size):
            for i in range(size):
                pos = j * size + i
                hit = np.flatnonzero(D0[pos])
                if hit.size:
                    subM[i][j] = f"{label}.{sub.free_names[hit[0]]}"
                else:
                    subM[i][j] = f0[pos]
        for j in range(size):
            for i in range(size):
                fill[(offset + i, offset + j)] = subM[i][j]
        offset += size
    return _design_from_cells(name, dim, fill)


def _block_symmetric(name, dim, blocks, zero_pairs):
    if not blocks:
        raise ModelSpecError("block-symmetric requires a list of block sizes")
    sizes = [int(b) for b in blocks]
    if sum(sizes) != dim:
        raise ModelSpecError(f"{name}: block sizes sum to {sum(sizes)}, expected {dim}")
    zeros = {(min(i, j), max(i, j)) for i, j in zero_pairs}
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    fill = {}
    for k, dk in enumerate(sizes):
        ok = offsets[k]
        for i in range(dk):
            for j in range(dk):
                fill[(ok + i, ok + j)] = f"var{k + 1}" if i == j else f"cov{k + 1}"
    for k in range(len(sizes)):
        for l in range(k + 1, len(sizes)):
            label = 0.0 if (k, l) in zeros else f"x{k + 1}_{l + 1}"
            for i in range(sizes[k]):
                for j in range(sizes[l]):
                    fill[(offsets[k] + i, offsets[l] + j)] = label
                    fill[(offsets[l] + j, offsets[k] + i)] = label
    return _design_from_cells(name, dim, fill)


def covariate_design(name, input_series, state_dim):
    """Time-varying intercept design driven by known covariates.

    For covariates ``h_t`` (one column per time step) and effect matrix ``C``
    the intercept is ``C @ h_t``, i.e. ``D_t = h_t^T kron I`` acting on
    ``vec(C)``.  Inputs must be fully known.
    """
    h = np.atleast_2d(np.asarray(input_series, dtype=float))
    if not np.all(np.isfinite(h)):
        raise ModelSpecError(f"{name}: covariate inputs contain missing values")
    p, T = h.shape
    names = tuple(f"c{i + 1}_{j + 1}" for j in range(p) for i in range(state_dim))
    eye = np.eye(state_dim)
    D_by_time = tuple(np.kron(h[:, t].reshape(1, p), eye) for t in range(T))
    f_by_time = tuple(np.zeros(state_dim) for _ in range(T))
    return ParamDesign(name, state_dim, 1, f_by_time, D_by_time, names)


# ---------------------------------------------------------------------------
# model spec and free values


@dataclass(frozen=True)
class ModelSpec:
    """Dimensions, noise loadings, initial-state treatment, and designs."""

    n: int
    m: int
    T: int
    t0: int
    G: np.ndarray
    H: np.ndarray
    F: np.ndarray
    designs: dict

    def __post_init__(self):
        for attr in ("G", "H", "F"):
            arr = np.asarray(getattr(self, attr), dtype=float)
            arr = arr.reshape(arr.shape[0], -1) if arr.ndim != 2 else arr
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, attr, arr)
        if self.t0 not in (0, 1):
            raise ModelSpecError("t0 must be 0 or 1")
        if self.G.shape[0] != self.m or self.F.shape[0] != self.m:
            raise ModelSpecError("G and F must have m rows")
        if self.H.shape[0] != self.n:
            raise ModelSpecError("H must have n rows")
        missing = [k for k in PARAM_NAMES if k not in self.designs]
        if missing:
            raise ModelSpecError(f"missing designs for {missing}")
        object.__setattr__(self, "designs", MappingProxyType(dict(self.designs)))

    @property
    def gq(self):
        return self.G.shape[1]

    @property
    def gr(self):
        return self.H.shape[1]

    @property
    def gl(self):
        return self.F.shape[1]

    def design(self, name):
        return self.designs[name]

    def expected_shape(self, name):
        return {
            "B": (self.m, self.m), "U": (self.m, 1), "Q": (self.gq, self.gq),
            "Z": (self.n, self.m), "A": (self.n, 1), "R": (self.gr, self.gr),
            "Xi": (self.m, 1), "Lambda": (self.gl, self.gl),
        }[name]


@dataclass(frozen=True)
class FreeParams:
    """The eight free-value vectors making up the estimated parameter set."""

    beta: np.ndarray
    upsilon: np.ndarray
    q: np.ndarray
    zeta: np.ndarray
    alpha: np.ndarray
    r: np.ndarray
    p: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        for fconf in fields(self):
            arr = np.asarray(getattr(self, fconf.name), dtype=float).reshape(-1).copy()
            arr.flags.writeable = False
            object.__setattr__(self, fconf.name, arr)

    @classmethod
    def zeros(cls, spec):
        return cls(**{FREE_FIELDS[k]: np.zeros(spec.design(k).s) for k in PARAM_NAMES})

    def by_name(self, name):
        return getattr(self, FREE_FIELDS[name])

    def with_value(self, name, vector):
        return replace(self, **{FREE_FIELDS[name]: np.asarray(vector, dtype=float)})


def _projection(mat, label):
    """(M^T M)^-1 M^T for a loading matrix; errors if M^T M is singular."""
    k = mat.shape[1]
    if k == 0:
        return np.zeros((0, mat.shape[0]))
    mtm = mat.T @ mat
    rank, _ = svd_rank(mtm)
    if rank < k:
        raise ModelSpecError(f"{label}^T {label} is singular; drop redundant columns")
    return np.linalg.solve(mtm, mat.T)


class MaterializedParams:
    """Per-time parameter matrices for one free-value assignment.

    Provides ``B(t)``, ``u(t)``, ``Q(t)``, ``Z(t)``, ``a(t)``, ``R(t)`` for
    model times 1..T plus the time-constant ``xi`` and ``Lam``, the noise
    projections, and the full-size noise covariances.
    """

    def __init__(self, spec, free, check_psd=True):
        self.spec = spec
        self.free = free
        self._per_time = {}
        for name in ("B", "U", "Q", "Z", "A", "R"):
            design = spec.design(name)
            values = free.by_name(name)
            count = spec.T if design.time_varying else 1
            mats = [materialize(design, values, t) for t in range(1, count + 1)]
            self._per_time[name] = mats
        self.xi = materialize(spec.design("Xi"), free.p, 1).reshape(-1)
        self.Lam = materialize(spec.design("Lambda"), free.lam, 1)
        if check_psd:
            for name in VARIANCE_PARAMS:
                for M in ([self.Lam] if name == "Lambda" else self._per_time[name]):
                    if M.size and np.linalg.eigvalsh(M).min() < PSD_EIG_FLOOR:
                        raise ModelSpecError(f"materialized {name} is not PSD")
        self.Phi = _projection(spec.G, "G")
        self.Xi_proj = _projection(spec.H, "H")
        self.Pi = _projection(spec.F, "F")
        self.Lamfull = spec.F @ self.Lam @ spec.F.T

    def _at(self, name, t):
        mats = self._per_time[name]
        return mats[t - 1] if len(mats) > 1 else mats[0]

    def B(self, t):
        return self._at("B", t)

    def u(self, t):
        return self._at("U", t).reshape(-1)

    def Q(self, t):
        return self._at("Q", t)

    def Z(self, t):
        return self._at("Z", t)

    def a(self, t):
        return self._at("A", t).reshape(-1)

    def R(self, t):
        return self._at("R", t)

    def Qfull(self, t):
        G = self.spec.G
        return G @ self.Q(t) @ G.T

    def Rfull(self, t):
        H = self.spec.H
        return H @ self.R(t) @ H.T


def materialize_params(spec, free, check_psd=True):
    return MaterializedParams(spec, free, check_psd=check_psd)


# ---------------------------------------------------------------------------
# simulation


def _psd_factor(C):
    """Factor S with S S^T = C for a PSD matrix (eigendecomposition based)."""
    if C.size == 0:
        return np.zeros_like(C)
    w, V = np.linalg.eigh(0.5 * (C + C.T))
    w = np.clip(w, 0.0, None)
    return V * np.sqrt(w)


def simulate(spec, free, seed):
    """Draw one trajectory: returns ``(states m x T, observations n x T)``.

    States are reported for model times 1..T.  Deterministic given the seed.
    """
    mats = materialize_params(spec, free)
    rng = np.random.default_rng(seed)
    lam_factor = _psd_factor(mats.Lam)
    q_factor = {}
    r_factor = {}
    x = mats.xi.copy()
    if spec.gl:
        x = x + spec.F @ (lam_factor @ rng.standard_normal(spec.gl))
    states = np.zeros((spec.m, spec.T))
    obs = np.zeros((spec.n, spec.T))
    for t in range(1, spec.T + 1):
        if t > spec.t0:
            x = mats.B(t) @ x + mats.u(t)
            if spec.gq:
                key = t if spec.design("Q").time_varying else 0
                if key not in q_factor:
                    q_factor[key] = _psd_factor(mats.Q(t))
                x = x + spec.G @ (q_factor[key] @ rng.standard_normal(spec.gq))
        y = mats.Z(t) @ x + mats.a(t)
        if spec.gr:
            key = t if spec.design("R").time_varying else 0
            if key not in r_factor:
                r_factor[key] = _psd_factor(mats.R(t))
            y = y + spec.H @ (r_factor[key] @ rng.standard_normal(spec.gr))
        states[:, t - 1] = x
        obs[:, t - 1] = y
    return states, obs


# ---------------------------------------------------------------------------
# validation


def _check_variance_design(name, design, out):
    rc = design.target_rows * design.target_cols
    dim = design.target_rows
    if design.target_rows != design.target_cols:
        out.append(Violation("shape", f"{name} design must be square"))
        return
    for k, (f, D) in enumerate(zip(design.f_by_time, design.D_by_time)):
        tag = f"{name}[t={k + 1}]" if design.time_varying else name
        if D.size and not np.all(np.isin(D, (0.0, 1.0))):
            out.append(Violation("variance-design",
                                 f"{tag}: D must contain only 0/1 entries"))
        rowsum = D.sum(axis=1) if D.size else np.zeros(rc)
        if np.any((rowsum != 0) & (rowsum != 1)):
            out.append(Violation("variance-design",
                                 f"{tag}: D row sums must be 0 or 1"))
        mixed = (np.abs(f) > 0) & (rowsum > 0)
        if np.any(mixed):
            out.append(Violation("variance-design",
                                 f"{tag}: rows mixing fixed and free values"))
        for i in range(dim):
            for j in range(i):
                lo, hi = j * dim + i, i * dim + j
                if f[lo] != f[hi] or (D.size and not np.array_equal(D[lo], D[hi])):
                    out.append(Violation(
                        "symmetry", f"{tag}: entries ({i + 1},{j + 1}) and "
                                    f"({j + 1},{i + 1}) must share f and D rows"))


def validate_spec(spec):
    """Check every design invariant; violations come back as data."""
    out = []
    for label, mat in (("G", spec.G), ("H", spec.H), ("F", spec.F)):
        k = mat.shape[1]
        if k:
            rank, _ = svd_rank(mat.T @ mat)
            if rank < k:
                out.append(Violation("loading-rank",
                                     f"{label}^T {label} is singular"))
    for name in PARAM_NAMES:
        design = spec.design(name)
        shape = spec.expected_shape(name)
        if (design.target_rows, design.target_cols) != shape:
            out.append(Violation("shape",
                                 f"{name} design is {design.target_rows}x"
                                 f"{design.target_cols}, expected {shape[0]}x{shape[1]}"))
            continue
        if design.n_times not in (1, spec.T):
            out.append(Violation("time-length",
                                 f"{name} design has {design.n_times} time entries, "
                                 f"expected 1 or {spec.T}"))
        if name in ("Xi", "Lambda") and design.time_varying:
            out.append(Violation("time-length", f"{name} must be time-constant"))
        if design.s:
            # identifiability needs full column rank of the designs stacked
            # over time (per-time designs may be individually deficient, as
            # with covariate-driven intercepts)
            stacked = np.vstack(design.D_by_time)
            rank, _ = svd_rank(stacked)
            if rank < design.s:
                out.append(Violation(
                    "rank", f"{name}: design matrix rank {rank} < {design.s} "
                            f"free values (confounded)"))
        if name in VARIANCE_PARAMS and design.target_rows:
            _check_variance_design(name, design, out)
    return out
