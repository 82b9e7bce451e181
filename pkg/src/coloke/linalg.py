"""Small dense linear algebra: non-symmetric eigensolver, ridge fits, rank-one updates.

Matrices here are tiny (lifted dimensions of a handful), so the eigensolver
favours robustness over speed: Householder reduction to Hessenberg form
followed by Wilkinson-shifted complex QR sweeps.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DimensionError, NonFiniteError, SingularUpdateError

MAX_EIG_DIM = 64
MAX_QR_SWEEPS = 10_000
DEFECT_COND = 1e10


@dataclass
class EigenDecomposition:
    """Eigenvalues with right/left eigenvectors stored as matrix columns.

    ``left[:, i]`` satisfies ``left[:, i].conj() @ A == eigenvalues[i] * left[:, i].conj()``
    and is scaled so that ``left[:, i].conj() @ right[:, i] == 1``.
    """

    eigenvalues: np.ndarray
    right: np.ndarray
    left: np.ndarray
    is_defective: bool

    @property
    def right_eigenvectors(self):
        return [self.right[:, i] for i in range(self.right.shape[1])]

    @property
    def left_eigenvectors(self):
        return [self.left[:, i] for i in range(self.left.shape[1])]


def _as_square(A):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NonFiniteError("matrix has non-finite entries")
    return A


def hessenberg(A):
    """Householder reduction ``A = Q H Q^T`` with ``H`` upper Hessenberg."""
    H = np.array(A, dtype=float)
    n = H.shape[0]
    Q = np.eye(n)
    for k in range(n - 2):
        x = H[k + 1:, k].copy()
        alpha = np.linalg.norm(x)
        if alpha == 0.0:
            continue
        if x[0] > 0:
            alpha = -alpha
        v = x
        v[0] -= alpha
        vnorm = np.linalg.norm(v)
        if vnorm == 0.0:
            continue
        v /= vnorm
        H[k + 1:, :] -= 2.0 * np.outer(v, v @ H[k + 1:, :])
        H[:, k + 1:] -= 2.0 * np.outer(H[:, k + 1:] @ v, v)
        Q[:, k + 1:] -= 2.0 * np.outer(Q[:, k + 1:] @ v, v)
        H[k + 2:, k] = 0.0
    return H, Q


def _givens(a, b):
    # returns (c, s) with [[c, s], [-conj(s), c]] @ [a, b] = [r, 0], c real
    if b == 0:
        return 1.0, 0j
    if a == 0:
        return 0.0, np.conj(b) / abs(b)
    r = np.hypot(abs(a), abs(b))
    c = abs(a) / r
    s = (a / abs(a)) * np.conj(b) / r
    return c, s


def _wilkinson_shift(a, b, c, d):
    # eigenvalue of [[a, b], [c, d]] closest to d
    tr = a + d
    det = a * d - b * c
    disc = np.sqrt(tr * tr / 4.0 - det)
    l1 = tr / 2.0 + disc
    l2 = tr / 2.0 - disc
    return l1 if abs(l1 - d) < abs(l2 - d) else l2


def schur(A, max_sweeps=MAX_QR_SWEEPS):
    """Complex Schur form ``A = Z T Z^H`` via shifted QR on the Hessenberg form."""
    A = _as_square(A)
    n = A.shape[0]
    H, Q = hessenberg(A)
    T = H.astype(complex)
    Z = Q.astype(complex)
    eps = np.finfo(float).eps
    scale = max(np.abs(A).max(), np.finfo(float).tiny)
    hi = n - 1
    sweeps = 0
    since_deflation = 0
    while hi > 0:
        lo = hi
        while lo > 0:
            off = abs(T[lo, lo - 1])
            if off <= eps * (abs(T[lo, lo]) + abs(T[lo - 1, lo - 1])) or off <= eps * eps * scale:
                T[lo, lo - 1] = 0.0
                break
            lo -= 1
        if lo == hi:
            hi -= 1
            since_deflation = 0
            continue
        sweeps += 1
        since_deflation += 1
        if sweeps > max_sweeps:
            raise ConvergenceError(f"QR iteration did not converge in {max_sweeps} sweeps")
        if since_deflation % 11 == 0:
            mu = T[hi, hi] + 0.75 * abs(T[hi, hi - 1])
        else:
            mu = _wilkinson_shift(T[hi - 1, hi - 1], T[hi - 1, hi], T[hi, hi - 1], T[hi, hi])
        for k in range(lo, hi + 1):
            T[k, k] -= mu
        rotations = []
        for k in range(lo, hi):
            c, s = _givens(T[k, k], T[k + 1, k])
            rows = T[[k, k + 1], :]
            T[k, :] = c * rows[0] + s * rows[1]
            T[k + 1, :] = -np.conj(s) * rows[0] + c * rows[1]
            T[k + 1, k] = 0.0
            rotations.append((k, c, s))
        for k, c, s in rotations:
            cols = T[:, [k, k + 1]]
            T[:, k] = c * cols[:, 0] + np.conj(s) * cols[:, 1]
            T[:, k + 1] = -s * cols[:, 0] + c * cols[:, 1]
            zc = Z[:, [k, k + 1]]
            Z[:, k] = c * zc[:, 0] + np.conj(s) * zc[:, 1]
            Z[:, k + 1] = -s * zc[:, 0] + c * zc[:, 1]
        for k in range(lo, hi + 1):
            T[k, k] += mu
    return np.triu(T), Z


def _triangular_eigvecs(T):
    n = T.shape[0]
    eps = np.finfo(float).eps
    small = eps * max(np.abs(T).max(), np.finfo(float).tiny)
    Y = np.zeros((n, n), dtype=complex)
    for i in range(n):
        lam = T[i, i]
        Y[i, i] = 1.0
        for j in range(i - 1, -1, -1):
            num = T[j, j + 1:i + 1] @ Y[j + 1:i + 1, i]
            den = T[j, j] - lam
            if abs(den) < small:
                den = small
            Y[j, i] = -num / den
        Y[:, i] /= np.linalg.norm(Y[:, i])
    return Y


def eig(A):
    """Eigen-decomposition of a small real (or complex) square matrix.

    Eigenvalues are sorted by descending real part, ties broken by descending
    imaginary part. Left eigenvectors come from the inverse of the right
    eigenvector matrix, which normalises ``w^H v = 1`` for free. When that
    matrix is numerically singular the decomposition is flagged defective and
    the left vectors are only a best effort.
    """
    A = _as_square(A)
    n = A.shape[0]
    if n > MAX_EIG_DIM:
        raise DimensionError(f"eig supports dimension <= {MAX_EIG_DIM}, got {n}")
    T, Z = schur(A)
    V = Z @ _triangular_eigvecs(T)
    lam = np.diag(T).copy()
    order = np.lexsort((-lam.imag, -lam.real))
    lam = lam[order]
    V = V[:, order]
    V /= np.linalg.norm(V, axis=0)
    defective = bool(np.linalg.cond(V) > DEFECT_COND)
    if defective:
        W = np.linalg.pinv(V).conj().T
    else:
        W = np.linalg.inv(V).conj().T
    return EigenDecomposition(eigenvalues=lam, right=V, left=W, is_defective=defective)


def ridge_reconstruction(Z, Phi_Z, rho):
    """Minimiser of ``sum ||z_k - C phi_k||^2 + rho ||C||_F^2`` over the columns.

    Closed form ``C = Z Phi^T (Phi Phi^T + rho I)^{-1}``.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    Phi_Z = np.atleast_2d(np.asarray(Phi_Z, dtype=float))
    if Z.shape[1] != Phi_Z.shape[1]:
        raise DimensionError(f"column counts differ: {Z.shape[1]} vs {Phi_Z.shape[1]}")
    if Z.shape[1] < 1:
        raise DimensionError("need at least one column")
    if not rho > 0:
        raise ValueError("rho must be positive")
    r = Phi_Z.shape[0]
    G = Phi_Z @ Phi_Z.T + rho * np.eye(r)
    return np.linalg.solve(G, Phi_Z @ Z.T).T


def sherman_morrison_update(P, u, tol=1e-12):
    """Return ``(P^{-1} + u u^T)^{-1}`` from ``P`` in O(n^2)."""
    P = np.asarray(P, dtype=float)
    u = np.asarray(u, dtype=float).ravel()
    if P.shape != (u.size, u.size):
        raise DimensionError(f"P shape {P.shape} incompatible with u of length {u.size}")
    Pu = P @ u
    denom = 1.0 + u @ Pu
    if denom <= tol:
        raise SingularUpdateError(f"Sherman-Morrison denominator {denom:.3e} <= {tol:.1e}")
    out = P - np.outer(Pu, Pu) / denom
    return 0.5 * (out + out.T)


def mat_pow_apply(K, j, v):
    """``K^j v`` by ``j`` successive products."""
    K = np.asarray(K)
    v = np.asarray(v)
    if j < 0:
        raise ValueError("power must be non-negative")
    if K.ndim != 2 or K.shape[0] != K.shape[1] or K.shape[1] != v.shape[0]:
        raise DimensionError(f"K shape {K.shape} incompatible with v of length {v.shape[0]}")
    out = v.copy()
    for _ in range(j):
        out = K @ out
    return out
