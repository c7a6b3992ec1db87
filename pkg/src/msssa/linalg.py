"""Dense linear algebra kernel.

Every matrix in the package is a two-dimensional ``numpy.ndarray`` of
``float64`` stored in row-major (C) order.  The binary file format in
:mod:`msssa.io` writes the payload in the same order, so a matrix read back
from disk is bitwise identical to the one written.
"""

from typing import NamedTuple

import numpy as np

from .errors import IllConditionedError, InvalidDimensionError, NumericError

__all__ = [
    "SymEig",
    "as_matrix",
    "build_tv_matrix",
    "sym_eigendecompose",
    "sylvester_solve_diag",
    "pseudo_inverse",
]

DEFAULT_O_FLOOR = 1e-8
EIG_CLAMP_TOL = 1e-10


def as_matrix(a, name="matrix"):
    """Validate and return `a` as a finite, C-ordered 2-D float64 array."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise InvalidDimensionError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name} contains non-finite values")
    return m


class SymEig(NamedTuple):
    """Eigendecomposition ``S = basis @ diag(eigenvalues) @ basis.T``.

    ``basis`` holds orthonormal eigenvectors as columns and ``eigenvalues``
    is sorted in ascending order.
    """

    basis: np.ndarray
    eigenvalues: np.ndarray

    def reconstruct(self):
        return (self.basis * self.eigenvalues) @ self.basis.T


def build_tv_matrix(T):
    """Return the ``T x (T-1)`` first-difference matrix.

    Column ``j`` holds ``-1`` at row ``j`` and ``+1`` at row ``j+1``, so that
    ``x @ P`` gives the consecutive differences ``x[1:] - x[:-1]`` of a row
    vector ``x``.

    Examples
    --------
    >>> build_tv_matrix(3)
    array([[-1.,  0.],
           [ 1., -1.],
           [ 0.,  1.]])
    """
    if int(T) != T or T < 2:
        raise InvalidDimensionError(f"TV matrix needs T >= 2, got {T}")
    T = int(T)
    P = np.zeros((T, T - 1))
    j = np.arange(T - 1)
    P[j, j] = -1.0
    P[j + 1, j] = 1.0
    return P


def sym_eigendecompose(S, clamp_tol=EIG_CLAMP_TOL):
    """Eigendecomposition of a real symmetric matrix.

    The input is symmetrized as ``(S + S.T) / 2`` before calling LAPACK, and
    eigenvalues in ``[-clamp_tol, 0)`` are set to zero: Gram matrices such as
    ``2 Phi^T Phi`` are positive semi-definite but rounding can push their
    null eigenvalues slightly below zero.

    Parameters
    ----------
    S : array_like, shape (n, n)
        Symmetric matrix; asymmetry above ``1e-9 * max|S|`` is rejected.
    clamp_tol : float, optional
        Magnitude of negative eigenvalues treated as rounding noise.

    Returns
    -------
    SymEig
    """
    S = as_matrix(S, "S")
    n, m = S.shape
    if n != m:
        raise InvalidDimensionError(f"eigendecomposition needs a square matrix, got {S.shape}")
    scale = np.max(np.abs(S)) if S.size else 0.0
    if np.max(np.abs(S - S.T), initial=0.0) > 1e-9 * scale:
        raise InvalidDimensionError("matrix is not symmetric")
    S = 0.5 * (S + S.T)
    try:
        w, V = np.linalg.eigh(S)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"symmetric eigensolver did not converge: {exc}") from exc
    w = np.where((w < 0.0) & (w >= -clamp_tol), 0.0, w)
    return SymEig(np.ascontiguousarray(V), w)


def divisor_grid(dw, dz):
    """``O[n, t] = dw[n] + dz[t]``."""
    return dw[:, None] + dz[None, :]


def check_divisor_grid(O, floor):
    """Raise :class:`IllConditionedError` if any entry of `O` is below `floor`."""
    k = int(np.argmin(O))
    omin = O.flat[k]
    if not omin >= floor:
        n, t = np.unravel_index(k, O.shape)
        raise IllConditionedError(
            f"divisor grid entry O[{n}, {t}] = {omin:.3e} is below the floor {floor:.1e}; "
            "increase the penalty parameters",
            min_value=float(omin),
            index=(int(n), int(t)),
        )


def sylvester_solve_diag(eigW, eigZ, M, floor=DEFAULT_O_FLOOR):
    """Solve ``W X + X Z = M`` for symmetric ``W`` and ``Z``.

    With ``W = F diag(dw) F^T`` and ``Z = G diag(dz) G^T`` the equation
    becomes ``dw[n] X'[n, t] + X'[n, t] dz[t] = M'[n, t]`` in the rotated
    coordinates ``X' = F^T X G``, which is an element-wise division.

    Parameters
    ----------
    eigW, eigZ : SymEig
        Eigendecompositions of ``W`` (n x n) and ``Z`` (t x t).
    M : array_like, shape (n, t)
        Right-hand side.
    floor : float, optional
        Smallest admissible ``dw[n] + dz[t]``.

    Returns
    -------
    X : ndarray, shape (n, t)
    """
    M = as_matrix(M, "M")
    F, dw = eigW
    G, dz = eigZ
    if M.shape != (F.shape[0], G.shape[0]):
        raise InvalidDimensionError(
            f"right-hand side shape {M.shape} does not match W {F.shape} and Z {G.shape}"
        )
    O = divisor_grid(dw, dz)
    check_divisor_grid(O, floor)
    return F @ ((F.T @ M @ G) / O) @ G.T


def pseudo_inverse(A, rank_tol=1e-10):
    """Moore-Penrose pseudo-inverse.

    Singular values below ``rank_tol`` times the largest one are treated as
    zero.  An all-zero input yields the all-zero matrix of transposed shape.
    This is how a data-driven analysis operator is built from a dictionary of
    spatial patterns (``P = pseudo_inverse(Phi_s)``).
    """
    A = as_matrix(A, "A")
    if A.size == 0:
        raise InvalidDimensionError("pseudo-inverse of an empty matrix")
    return np.linalg.pinv(A, rcond=rank_tol)
