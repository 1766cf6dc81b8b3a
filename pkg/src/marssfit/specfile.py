"""Model-spec file format: a YAML document describing one model.

Top-level fields: ``n``, ``m``, ``T`` (optional when data supply it),
``t0``, the noise loadings ``G``/``H``/``F`` (row-lists, ``identity``, or
``none`` for an empty loading), one block per parameter (``B``, ``U``,
``Q``, ``Z``, ``A``, ``R``, ``Xi``, ``Lambda``), and an optional nested
``values`` mapping of free-value assignments per parameter.

A parameter block is one of::

    B: {kind: identity}                      # structure builder
    Q: {kind: block-diagonal, blocks: [[equal-varcov, 2], [diagonal-equal, 1]]}
    U: {symbolic: [["u1"], ["u2"]]}          # grid of numbers/expressions
    Z: {fixed: [[1, 0], [0, 1]]}             # fully fixed matrix
    A: {f: [...], D: [[...]]}                # explicit design
    R: {f_by_time: [...], D_by_time: [...]}  # per-time explicit design
"""

import numpy as np
import yaml

from .errors import ModelSpecError
from .kalman import TimeSeriesData
from .model import (
    FREE_FIELDS,
    FreeParams,
    ModelSpec,
    PARAM_NAMES,
    ParamDesign,
    build_from_symbolic,
    builder,
    fixed_design,
)

MISSING_TOKEN = "NA"


def _loading(entry, rows, default_cols):
    if entry is None or entry == "identity":
        return np.eye(rows)
    if entry == "none":
        return np.zeros((rows, 0))
    mat = np.atleast_2d(np.asarray(entry, dtype=float))
    if mat.shape[0] != rows:
        raise ModelSpecError(f"loading matrix has {mat.shape[0]} rows, expected {rows}")
    return mat


def _default_design(name, shape, n, m):
    rows, cols = shape
    if name == "B":
        return builder("B", "identity", m)
    if name in ("U", "A"):
        return fixed_design(name, np.zeros((rows, 1)))
    if name == "Z":
        Z = np.zeros((n, m))
        for i in range(min(n, m)):
            Z[i, i] = 1.0
        return fixed_design("Z", Z)
    if name == "Xi":
        return build_from_symbolic("Xi", [[f"xi{i + 1}"] for i in range(m)])
    # covariances default to one free variance per diagonal entry
    return builder(name, "diagonal-unequal", rows) if rows else \
        fixed_design(name, np.zeros((0, 0)))


def _design_from_block(name, block, shape, T):
    rows, cols = shape
    if not isinstance(block, dict):
        raise ModelSpecError(f"{name}: parameter block must be a mapping")
    keys = set(block) - {"values"}
    if "kind" in keys:
        blocks = block.get("blocks")
        if blocks is not None:
            blocks = [tuple(b) for b in blocks]
        return builder(name, block["kind"], rows, blocks=blocks,
                       zero_pairs=[tuple(p) for p in block.get("zero_pairs", [])])
    if "symbolic" in keys:
        return build_from_symbolic(name, block["symbolic"])
    if "fixed" in keys:
        M = np.atleast_2d(np.asarray(block["fixed"], dtype=float))
        if M.shape != shape:
            raise ModelSpecError(f"{name}: fixed matrix is {M.shape}, expected {shape}")
        return fixed_design(name, M)
    if "f" in keys or "D" in keys:
        f = np.asarray(block.get("f", np.zeros(rows * cols)), dtype=float)
        D = np.asarray(block.get("D", np.zeros((rows * cols, 0))), dtype=float)
        names = block.get("names") or [f"{name.lower()}{k + 1}"
                                       for k in range(D.shape[1] if D.ndim == 2 else 0)]
        return ParamDesign(name, rows, cols, (f,), (np.atleast_2d(D),), tuple(names))
    if "f_by_time" in keys or "D_by_time" in keys:
        f_list = block.get("f_by_time")
        D_list = block.get("D_by_time")
        if f_list is None or D_list is None or len(f_list) != len(D_list):
            raise ModelSpecError(f"{name}: f_by_time and D_by_time must both be "
                                 f"given with equal lengths")
        if T is not None and len(f_list) not in (1, T):
            raise ModelSpecError(f"{name}: per-time design must have 1 or {T} entries")
        D0 = np.atleast_2d(np.asarray(D_list[0], dtype=float))
        names = block.get("names") or [f"{name.lower()}{k + 1}"
                                       for k in range(D0.shape[1])]
        return ParamDesign(name, rows, cols,
                           tuple(np.asarray(f, dtype=float) for f in f_list),
                           tuple(np.atleast_2d(np.asarray(D, dtype=float))
                                 for D in D_list),
                           tuple(names))
    raise ModelSpecError(f"{name}: block needs one of kind/symbolic/fixed/f/f_by_time")


def parse_document(doc, T=None):
    """Assemble a ``ModelSpec`` plus any free-value assignments.

    ``T`` overrides (or supplies) the series length, e.g. from a data file.
    Returns ``(spec, values)`` where ``values`` maps parameter name to a
    dict of free-name assignments (possibly empty).
    """
    if not isinstance(doc, dict):
        raise ModelSpecError("spec document must be a mapping")
    try:
        n = int(doc["n"])
        m = int(doc["m"])
    except KeyError as exc:
        raise ModelSpecError(f"spec document is missing {exc}") from exc
    if T is None:
        if "T" not in doc:
            raise ModelSpecError("series length T is needed (give T in the spec "
                                 "or supply data)")
        T = int(doc["T"])
    elif "T" in doc and int(doc["T"]) != T:
        raise ModelSpecError(f"spec declares T={doc['T']} but data have T={T}")
    t0 = int(doc.get("t0", 0))
    G = _loading(doc.get("G"), m, m)
    H = _loading(doc.get("H"), n, n)
    F = _loading(doc.get("F"), m, m)
    shapes = {"B": (m, m), "U": (m, 1), "Q": (G.shape[1], G.shape[1]),
              "Z": (n, m), "A": (n, 1), "R": (H.shape[1], H.shape[1]),
              "Xi": (m, 1), "Lambda": (F.shape[1], F.shape[1])}
    designs = {}
    values = {}
    for name in PARAM_NAMES:
        block = doc.get(name)
        if block is None:
            designs[name] = _default_design(name, shapes[name], n, m)
        else:
            designs[name] = _design_from_block(name, block, shapes[name], T)
            if isinstance(block, dict) and "values" in block:
                values[name] = dict(block["values"])
    for name, mapping in (doc.get("values") or {}).items():
        if name not in PARAM_NAMES:
            raise ModelSpecError(f"values given for unknown parameter {name!r}")
        values.setdefault(name, {}).update(mapping)
    spec = ModelSpec(n=n, m=m, T=T, t0=t0, G=G, H=H, F=F, designs=designs)
    return spec, values


def load_spec(path, T=None):
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    return parse_document(doc, T=T)


def free_params_from_values(spec, values):
    """Build a complete ``FreeParams`` from per-parameter value mappings.

    Every free name of every estimated parameter must be assigned.
    """
    fields = {}
    missing = []
    for name in PARAM_NAMES:
        design = spec.design(name)
        given = values.get(name, {})
        vec_ = np.zeros(design.s)
        for k, free_name in enumerate(design.free_names):
            if free_name in given:
                vec_[k] = float(given[free_name])
            else:
                missing.append(f"{name}:{free_name}")
        unknown = set(given) - set(design.free_names)
        if unknown:
            raise ModelSpecError(f"{name}: unknown free names {sorted(unknown)}")
        fields[FREE_FIELDS[name]] = vec_
    if missing:
        raise ModelSpecError(f"missing values for free names: {', '.join(missing)}")
    return FreeParams(**fields)


def has_complete_values(spec, values):
    return all(f in values.get(name, {})
               for name in PARAM_NAMES for f in spec.design(name).free_names)


# ---------------------------------------------------------------------------
# data CSV


def read_data_csv(path):
    """Read an n x T series file: header of time labels, one row per series,
    ``NA`` for missing entries."""
    rows = []
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if len(lines) < 2:
        raise ModelSpecError(f"{path}: expected a header line plus data rows")
    width = len(lines[0].split(","))
    for ln in lines[1:]:
        cells = [c.strip() for c in ln.split(",")]
        if len(cells) != width:
            raise ModelSpecError(f"{path}: row has {len(cells)} cells, header "
                                 f"has {width}")
        row = [np.nan if c.upper() == MISSING_TOKEN else float(c) for c in cells]
        rows.append(row)
    return TimeSeriesData.from_array(np.array(rows, dtype=float))


def format_float(x):
    return f"{x:.17g}"


def write_data_csv(path, y, observed=None):
    n, T = y.shape
    with open(path, "w") as fh:
        fh.write(",".join(str(t) for t in range(1, T + 1)) + "\n")
        for i in range(n):
            cells = []
            for t in range(T):
                if observed is not None and not observed[i, t]:
                    cells.append(MISSING_TOKEN)
                else:
                    cells.append(format_float(y[i, t]))
            fh.write(",".join(cells) + "\n")


def write_matrix_csv(path, M):
    M = np.atleast_2d(M)
    with open(path, "w") as fh:
        for row in M:
            fh.write(",".join(format_float(v) for v in row) + "\n")
