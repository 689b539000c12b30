"""Small dense linear algebra needed by exact k-DPP sampling."""

from __future__ import annotations

import numpy as np

from .errors import EigenDecompositionError

__all__ = ["sym_eig", "elementary_symmetric"]


def sym_eig(A, tol=1e-12, max_sweeps=100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps over all (p, q) pairs until the off-diagonal Frobenius norm drops
    below ``tol * max(1, ||A||_F)``. Returns ascending eigenvalues and the
    matching orthonormal eigenvectors as columns.
    """
    A = np.array(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise EigenDecompositionError(f"expected a square matrix, got shape {A.shape}")
    n = A.shape[0]
    scale = max(1.0, float(np.linalg.norm(A)))
    if not np.all(np.isfinite(A)):
        raise EigenDecompositionError("matrix has non-finite entries")
    if np.max(np.abs(A - A.T), initial=0.0) > 1e-10 * scale:
        raise EigenDecompositionError("matrix is not symmetric")
    A = 0.5 * (A + A.T)
    V = np.eye(n)
    target = tol * scale

    def off_norm(M):
        # direct sum: ||M||^2 - ||diag||^2 cancels catastrophically near convergence
        return float(np.linalg.norm(M - np.diag(np.diag(M))))

    for _ in range(max_sweeps):
        if off_norm(A) < target:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) < 1e-300:
                    continue
                tau = (A[q, q] - A[p, p]) / (2.0 * apq)
                if abs(tau) > 1e150:
                    t = 0.5 / tau
                else:
                    t = (1.0 if tau >= 0 else -1.0) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                col_p, col_q = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * col_p - s * col_q
                A[:, q] = s * col_p + c * col_q
                row_p, row_q = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * row_p - s * row_q
                A[q, :] = s * row_p + c * row_q
                A[p, q] = A[q, p] = 0.0
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    else:
        if off_norm(A) >= target:
            raise EigenDecompositionError(f"Jacobi did not converge in {max_sweeps} sweeps")

    vals = np.diag(A).copy()
    order = np.argsort(vals, kind="stable")
    return vals[order], V[:, order]


def elementary_symmetric(values, k):
    """Table ``E[j, i] = e_j(values[:i])`` for ``j <= k`` and ``i <= N``."""
    values = np.asarray(values, dtype=np.float64)
    N = values.shape[0]
    if k > N:
        raise ValueError(f"k={k} exceeds the number of values {N}")
    E = np.zeros((k + 1, N + 1))
    E[0, :] = 1.0
    for i in range(1, N + 1):
        E[1:, i] = E[1:, i - 1] + values[i - 1] * E[:-1, i - 1]
    return E
