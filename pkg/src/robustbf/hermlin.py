"""Dense complex linear algebra helpers.

Complex Hermitian matrices are mapped to real symmetric matrices with the
block convention ``[[Re H, -Im H], [Im H, Re H]]``.  Under this map the
complex trace pairing satisfies ``Re tr(A B) = tr(embed(A) embed(B)) / 2``,
which is the factor every caller pairing embedded blocks has to apply.
"""
import numpy as np

HERM_TOL = 1e-10


class DimensionError(ValueError):
    pass


class NumericError(ValueError):
    pass


def as_vector(w):
    """Return ``w`` as a finite 1-D complex array."""
    w = np.asarray(w, dtype=complex).reshape(-1)
    if w.size < 1:
        raise DimensionError("vector must have at least one entry")
    if not np.all(np.isfinite(w)):
        raise NumericError("vector has non-finite entries")
    return w


def as_hermitian(H, tol=HERM_TOL):
    """Validate a square complex matrix and symmetrize it.

    Asymmetry up to ``tol`` (relative to the largest entry) is absorbed by
    averaging with the conjugate transpose, larger asymmetry is rejected.
    """
    H = np.atleast_2d(np.asarray(H, dtype=complex))
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {H.shape}")
    if not np.all(np.isfinite(H)):
        raise NumericError("matrix has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(H))))
    if np.max(np.abs(H - H.conj().T)) > tol * scale:
        raise ValueError("matrix is not Hermitian")
    H = 0.5 * (H + H.conj().T)
    H[np.diag_indices_from(H)] = H.diagonal().real
    return H


def as_symmetric(S, tol=HERM_TOL):
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {S.shape}")
    scale = max(1.0, float(np.max(np.abs(S)))) if S.size else 1.0
    if S.size and np.max(np.abs(S - S.T)) > tol * scale:
        raise ValueError("matrix is not symmetric")
    return 0.5 * (S + S.T)


def embed_hermitian(H):
    """Real symmetric ``2n x 2n`` image of a Hermitian ``n x n`` matrix."""
    H = as_hermitian(H)
    re, im = H.real, H.imag
    return np.block([[re, -im], [im, re]])


def deembed_hermitian(S):
    """Inverse of :func:`embed_hermitian`, averaging the redundant blocks."""
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {S.shape}")
    if S.shape[0] % 2:
        raise DimensionError(f"embedded matrix must have even dimension, got {S.shape[0]}")
    n = S.shape[0] // 2
    s11, s12 = S[:n, :n], S[:n, n:]
    s21, s22 = S[n:, :n], S[n:, n:]
    H = 0.5 * (s11 + s22) + 0.5j * (s21 - s12)
    H = 0.5 * (H + H.conj().T)
    H[np.diag_indices_from(H)] = H.diagonal().real
    return H


def embed_vector(w):
    """Stack ``(Re w, Im w)``; pairs with :func:`embed_hermitian`."""
    w = as_vector(w)
    return np.concatenate([w.real, w.imag])


def deembed_vector(v):
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.size % 2:
        raise DimensionError("embedded vector must have even length")
    n = v.size // 2
    return v[:n] + 1j * v[n:]


def j_matrix(n):
    """The real ``2n x 2n`` matrix of multiplication by ``i``."""
    eye, zero = np.eye(n), np.zeros((n, n))
    return np.block([[zero, -eye], [eye, zero]])


def j_average(S):
    """Project a real symmetric ``2n x 2n`` matrix onto the embedded subspace."""
    n = S.shape[0] // 2
    J = j_matrix(n)
    return 0.5 * (S + J @ S @ J.T)


def hermitian_eig(H):
    """Eigenvalues in descending order with orthonormal eigenvectors.

    Returns ``(lam, V)`` where column ``V[:, i]`` belongs to ``lam[i]``.
    """
    H = as_hermitian(H)
    lam, V = np.linalg.eigh(H)
    return lam[::-1].copy(), V[:, ::-1].copy()


def outer(w):
    """Hermitian outer product ``w w^H``."""
    w = as_vector(w)
    return np.outer(w, w.conj())


def herm_basis(n):
    """Real basis of the ``n^2``-dimensional space of ``n x n`` Hermitian matrices.

    Ordering: diagonal entries, then for each ``i < j`` the real part
    ``E_ij + E_ji`` followed by the imaginary part ``i E_ij - i E_ji``.
    A Hermitian ``H`` is recovered from its coordinates ``p`` as
    ``sum(p[k] * B[k])`` with ``p`` given by :func:`herm_coords`.
    """
    basis = np.zeros((n * n, n, n), dtype=complex)
    k = 0
    for i in range(n):
        basis[k, i, i] = 1.0
        k += 1
    for i in range(n):
        for j in range(i + 1, n):
            basis[k, i, j] = basis[k, j, i] = 1.0
            basis[k + 1, i, j] = 1j
            basis[k + 1, j, i] = -1j
            k += 2
    return basis


def herm_coords(H):
    """Coordinates of ``H`` in :func:`herm_basis`."""
    H = np.asarray(H, dtype=complex)
    n = H.shape[0]
    p = np.empty(n * n)
    p[:n] = H.diagonal().real
    iu, ju = np.triu_indices(n, 1)
    p[n::2] = H[iu, ju].real
    p[n + 1::2] = H[iu, ju].imag
    return p


def from_herm_coords(p, n):
    p = np.asarray(p, dtype=float)
    H = np.zeros((n, n), dtype=complex)
    H[np.diag_indices(n)] = p[:n]
    iu, ju = np.triu_indices(n, 1)
    H[iu, ju] = p[n::2] + 1j * p[n + 1::2]
    H[ju, iu] = p[n::2] - 1j * p[n + 1::2]
    return H
