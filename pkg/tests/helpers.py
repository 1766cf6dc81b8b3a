"""Shared construction helpers for the test suite."""

import numpy as np

from marssfit.kalman import TimeSeriesData
from marssfit.model import (
    FreeParams,
    ModelSpec,
    build_from_symbolic,
    builder,
    fixed_design,
    materialize_params,
    vec,
)

FREE_ATTR = {"B": "beta", "U": "upsilon", "Q": "q", "Z": "zeta",
             "A": "alpha", "R": "r", "Xi": "p", "Lambda": "lam"}


def _free_design(name, rows, cols, prefix):
    cells = [[f"{prefix}{i + 1}_{j + 1}" for j in range(cols)] for i in range(rows)]
    return build_from_symbolic(name, cells)


def spec_from_matrices(B, U, Q, Z, A, R, Xi, Lam, T, t0=0,
                       G=None, H=None, F=None, free=()):
    """Build a spec plus matching free values from explicit matrices.

    Parameters named in ``free`` get fully free designs (unconstrained
    symmetric for the covariances); everything else is fixed at the given
    matrix.  Returns ``(spec, FreeParams)`` such that materializing the free
    values reproduces the inputs.
    """
    B, Q, Z, R, Lam = (np.atleast_2d(np.asarray(M, dtype=float))
                       for M in (B, Q, Z, R, Lam))
    U = np.asarray(U, dtype=float).reshape(-1, 1)
    A = np.asarray(A, dtype=float).reshape(-1, 1)
    Xi = np.asarray(Xi, dtype=float).reshape(-1, 1)
    m = B.shape[0]
    n = Z.shape[0]
    G = np.eye(m) if G is None else np.asarray(G, dtype=float)
    H = np.eye(n) if H is None else np.asarray(H, dtype=float)
    F = np.eye(m) if F is None else np.asarray(F, dtype=float)
    targets = {"B": B, "U": U, "Q": Q, "Z": Z, "A": A, "R": R, "Xi": Xi, "Lambda": Lam}
    designs = {}
    values = {}
    for name, M in targets.items():
        if name not in free:
            designs[name] = fixed_design(name, M)
            values[FREE_ATTR[name]] = np.zeros(0)
            continue
        if name in ("Q", "R", "Lambda"):
            design = builder(name, "unconstrained-symmetric", M.shape[0])
        else:
            design = _free_design(name, M.shape[0], M.shape[1],
                                  {"B": "b", "U": "u", "Z": "z", "A": "a",
                                   "Xi": "p"}[name])
        designs[name] = design
        v, *_ = np.linalg.lstsq(design.D(1), vec(M) - design.f(1), rcond=None)
        values[FREE_ATTR[name]] = v
    spec = ModelSpec(n=n, m=m, T=T, t0=t0, G=G, H=H, F=F, designs=designs)
    return spec, FreeParams(**values)


def random_psd(rng, dim, scale=1.0, jitter=0.3):
    A = rng.normal(size=(dim, dim))
    return scale * (A @ A.T / dim + jitter * np.eye(dim))


def random_model(rng, n, m, T, t0=0, free=()):
    """Random well-conditioned model; returns (spec, free values, mats)."""
    B = 0.9 * rng.uniform(-1, 1, size=(m, m)) / m + np.eye(m) * rng.uniform(0.2, 0.8)
    U = rng.normal(scale=0.5, size=(m, 1))
    Q = random_psd(rng, m, scale=rng.uniform(0.3, 1.5))
    Z = rng.normal(size=(n, m))
    A = rng.normal(scale=0.5, size=(n, 1))
    R = random_psd(rng, n, scale=rng.uniform(0.3, 1.5))
    Xi = rng.normal(size=(m, 1))
    Lam = random_psd(rng, m, scale=rng.uniform(0.5, 1.5))
    spec, values = spec_from_matrices(B, U, Q, Z, A, R, Xi, Lam, T=T, t0=t0, free=free)
    return spec, values, materialize_params(spec, values)


def random_data(rng, spec, values, missing_frac=0.0):
    """Simulate data from the model and knock out a fraction of entries."""
    from marssfit.model import simulate

    _, y = simulate(spec, values, seed=int(rng.integers(2 ** 31)))
    observed = rng.uniform(size=y.shape) >= missing_frac
    return TimeSeriesData(np.where(observed, y, 0.0), observed)
