"""Minimal dense linear-algebra substrate.

Matrices are plain float64 numpy arrays (row-major); everything here is
deterministic, double precision, and free of shared mutable state. The
symmetric eigensolver is a self-contained cyclic Jacobi iteration rather
than a LAPACK call, so results are reproducible bit-for-bit across BLAS
builds.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, NumericalFailureError

JACOBI_MAX_SWEEPS = 100
_JACOBI_REL_TOL = 1e-15
_SYMMETRY_TOL = 1e-9


@dataclass(frozen=True)
class EigenPair:
    """Orthonormal eigenvectors (columns) with eigenvalues sorted descending."""

    vectors: np.ndarray
    values: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T


def _as_square_symmetric(matrix) -> np.ndarray:
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("matrix contains non-finite entries")
    scale = max(1.0, float(np.max(np.abs(a))) if a.size else 1.0)
    if a.size and float(np.max(np.abs(a - a.T))) > _SYMMETRY_TOL * scale:
        raise InvalidInputError("matrix is not symmetric within tolerance 1e-9")
    return 0.5 * (a + a.T)


def _off_diagonal_norm(a: np.ndarray) -> float:
    off = a - np.diag(np.diag(a))
    return float(np.sqrt(np.sum(off * off)))


def sym_eig(matrix) -> EigenPair:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi sweeps.

    Input is symmetrized before iterating. Eigenvalues come back sorted
    descending, ties broken by original index, and the returned vectors
    satisfy A = Q diag(values) Q^T to ~1e-15 relative.
    """
    a = _as_square_symmetric(matrix)
    n = a.shape[0]
    q = np.eye(n)
    if n <= 1:
        return EigenPair(vectors=q, values=np.diag(a).copy())

    norm = float(np.sqrt(np.sum(a * a)))
    target = _JACOBI_REL_TOL * max(norm, np.finfo(float).tiny)
    converged = _off_diagonal_norm(a) <= target
    for _ in range(JACOBI_MAX_SWEEPS):
        if converged:
            break
        for p in range(n - 1):
            for qq in range(p + 1, n):
                apq = a[p, qq]
                if apq == 0.0:
                    continue
                tau = (a[qq, qq] - a[p, p]) / (2.0 * apq)
                t = np.copysign(1.0, tau) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                # A <- J^T A J with the plane rotation J acting on (p, qq)
                col_p = a[:, p].copy()
                col_q = a[:, qq].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, qq] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[qq, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[qq, :] = s * row_p + c * row_q
                a[p, qq] = 0.0
                a[qq, p] = 0.0
                vec_p = q[:, p].copy()
                vec_q = q[:, qq].copy()
                q[:, p] = c * vec_p - s * vec_q
                q[:, qq] = s * vec_p + c * vec_q
        converged = _off_diagonal_norm(a) <= target
    if not converged:
        raise NumericalFailureError(
            f"Jacobi iteration did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )
    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    return EigenPair(vectors=q[:, order], values=values[order])


def kron_matvec(a, b, v) -> np.ndarray:
    """Multiply (a (x) b) by v without materializing the Kronecker product.

    Uses the identity (A (x) B) vec(V) = vec(B V A^T) with column-major vec,
    so v must have length cols(a) * cols(b).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    v = np.asarray(v, dtype=float)
    if a.ndim != 2 or b.ndim != 2:
        raise InvalidInputError("kron_matvec expects two matrices")
    if v.ndim != 1 or v.size != a.shape[1] * b.shape[1]:
        raise InvalidInputError(
            f"vector length {v.size} does not match cols(a)*cols(b) "
            f"= {a.shape[1]}*{b.shape[1]}"
        )
    vm = np.reshape(v, (b.shape[1], a.shape[1]), order="F")
    return np.reshape(b @ vm @ a.T, -1, order="F")


def seeded_rng(seed) -> np.random.Generator:
    """Deterministic random stream (PCG64) for a given seed.

    The same seed reproduces identical draws across runs and platforms;
    `seed` may be an int or a numpy SeedSequence.
    """
    return np.random.Generator(np.random.PCG64(seed))
