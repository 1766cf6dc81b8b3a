"""Dense matrix utilities: vec/Kronecker identities and masked inverses.

Matrices are plain 2-D ``numpy.ndarray`` objects.  ``vec`` is column-major
everywhere in this package; row-major stacking never appears.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ModelSpecError

# Relative cutoff on singular values when deciding numerical rank; small
# enough to keep round-off out, large enough to catch structural zeros.
DEFAULT_RANK_TOL = 1e-10


def vec(M):
    """Stack the columns of ``M`` into a single vector."""
    M = np.asarray(M, dtype=float)
    return M.reshape(-1, order="F").copy()


def unvec(v, rows, cols):
    """Inverse of :func:`vec`: reshape ``v`` into a ``rows x cols`` matrix.

    Raises ``ModelSpecError`` if the length of ``v`` is not ``rows * cols``.
    """
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.size != rows * cols:
        raise ModelSpecError(f"cannot reshape length-{v.size} vector to {rows}x{cols}")
    return v.reshape((rows, cols), order="F").copy()


def kron(A, B):
    """Kronecker product: block (i, j) of the result is ``A[i, j] * B``."""
    return np.kron(np.asarray(A, dtype=float), np.asarray(B, dtype=float))


def svd_rank(M, tol=DEFAULT_RANK_TOL):
    """Numerical rank of ``M``: singular values above ``tol`` times the largest.

    Returns ``(rank, singular_values)``.  An empty or all-zero matrix has
    rank 0.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return 0, np.zeros(0)
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0, s
    return int(np.sum(s > tol * s[0])), s


@dataclass(frozen=True)
class MaskSelector:
    """Row-extraction matrix: keeps ``kept_indices`` out of an ``n``-vector.

    As a matrix it is p x n with exactly one 1 per row.  Indices must be
    strictly increasing.
    """

    kept_indices: tuple
    n: int

    def __post_init__(self):
        idx = tuple(int(i) for i in self.kept_indices)
        object.__setattr__(self, "kept_indices", idx)
        if any(i < 0 or i >= self.n for i in idx):
            raise ModelSpecError(f"selector indices {idx} out of range for n={self.n}")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ModelSpecError("selector indices must be strictly increasing")

    @property
    def size(self):
        return len(self.kept_indices)

    def as_matrix(self):
        omega = np.zeros((len(self.kept_indices), self.n))
        for row, i in enumerate(self.kept_indices):
            omega[row, i] = 1.0
        return omega

    def complement(self):
        dropped = tuple(i for i in range(self.n) if i not in set(self.kept_indices))
        return MaskSelector(dropped, self.n)


def selector_from_bools(keep, n=None):
    """Build a :class:`MaskSelector` from a boolean keep-vector."""
    keep = np.asarray(keep, dtype=bool)
    n = keep.size if n is None else n
    return MaskSelector(tuple(np.flatnonzero(keep)), n)


def _checked_inverse(sub):
    """Inverse with a singularity check.

    Symmetric positive-definite blocks (the overwhelmingly common case here)
    go through a Cholesky factor; anything else falls back to an explicit
    rank check before the plain inverse.
    """
    if sub.shape == (1, 1):
        if sub[0, 0] == 0.0:
            raise np.linalg.LinAlgError("kept 1x1 submatrix is singular (rank 0)")
        return np.array([[1.0 / sub[0, 0]]])
    if np.array_equal(sub, sub.T):
        try:
            c = np.linalg.inv(np.linalg.cholesky(sub))
            return c.T @ c
        except np.linalg.LinAlgError:
            pass
    rank, _ = svd_rank(sub)
    if rank < sub.shape[0]:
        raise np.linalg.LinAlgError(
            f"kept {sub.shape[0]}x{sub.shape[0]} submatrix is singular "
            f"(rank {rank})")
    return np.linalg.inv(sub)


def masked_inverse(M, keep):
    """Generalized inverse restricted to the rows/columns in ``keep``.

    Returns the n x n matrix ``Omega^T (Omega M Omega^T)^-1 Omega`` where
    ``Omega`` extracts the kept indices; dropped rows and columns of the
    result are zero.  An empty keep set yields the all-zero matrix, the
    convention used for fully missing observation vectors.

    Raises ``numpy.linalg.LinAlgError`` if the kept submatrix is singular.
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    if M.shape != (n, n):
        raise ModelSpecError("masked_inverse requires a square matrix")
    if isinstance(keep, MaskSelector):
        if keep.n != n:
            raise ModelSpecError("selector dimension does not match matrix")
        idx = np.array(keep.kept_indices, dtype=int)
    else:
        idx = np.array(sorted(int(i) for i in keep), dtype=int)
    if idx.size == n:
        return _checked_inverse(M)
    out = np.zeros_like(M)
    if idx.size == 0:
        return out
    sub = M[idx[:, None], idx]
    out[idx[:, None], idx] = _checked_inverse(sub)
    return out


def symmetrize(M):
    """(M + M^T) / 2, suppressing asymmetric round-off."""
    return 0.5 * (M + M.T)
