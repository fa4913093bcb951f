"""Dense linear algebra and statistics used by the encodings and evaluation.

Matrices are plain 2-D float64 numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SYM_TOL = 1e-12
ZERO_EIG_TOL = 1e-8
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


class NumericsError(ArithmeticError):
    pass


class ConvergenceError(NumericsError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (off-diagonal residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class EigenDecomposition:
    eigenvalues: np.ndarray  # ascending
    eigenvectors: np.ndarray  # column i pairs with eigenvalues[i]

    def nontrivial(self, tol: float = ZERO_EIG_TOL) -> tuple[np.ndarray, np.ndarray]:
        """Eigenpairs with eigenvalue above ``tol``."""
        keep = self.eigenvalues > tol
        return self.eigenvalues[keep], self.eigenvectors[:, keep]


def check_symmetric(a: np.ndarray, tol: float = SYM_TOL) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NumericsError(f"expected a square matrix, got shape {a.shape}")
    if a.size and np.max(np.abs(a - a.T)) > tol:
        raise NumericsError("matrix is not symmetric")


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    # largest-magnitude entry made positive; near-ties resolved to the lowest index
    out = vecs.copy()
    for j in range(out.shape[1]):
        col = np.abs(out[:, j])
        if col.size == 0:
            continue
        k = int(np.flatnonzero(col >= col.max() - 1e-12)[0])
        if out[k, j] < 0:
            out[:, j] = -out[:, j]
    return out


def _off_norm(a: np.ndarray) -> float:
    off = a - np.diag(np.diag(a))
    return float(np.sqrt(np.sum(off * off)))


def sym_eig(a: np.ndarray, tol: float = JACOBI_TOL,
            max_sweeps: int = JACOBI_MAX_SWEEPS) -> EigenDecomposition:
    """Full eigendecomposition of a symmetric matrix by cyclic Jacobi sweeps.

    Pairs ``(p, q)`` are visited in row-major order each sweep; iteration stops
    once the off-diagonal Frobenius norm drops below ``tol * max(1, ||A||_F)``.
    Eigenvalues are returned ascending and eigenvector signs are fixed so the
    largest-magnitude entry of each column is positive.
    """
    a = np.array(a, dtype=np.float64)
    check_symmetric(a)
    n = a.shape[0]
    v = np.eye(n)
    scale = max(1.0, float(np.linalg.norm(a)))
    off = 0.0
    for _ in range(max_sweeps):
        off = _off_norm(a)
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(tau) > 1e150:
                    t = 0.5 / tau
                elif tau >= 0:
                    t = 1.0 / (tau + math.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q]
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :]
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        off = _off_norm(a)
        if off > tol * scale:
            raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps", off)
    vals = np.diag(a).copy()
    order = np.argsort(vals, kind="stable")
    return EigenDecomposition(vals[order], _fix_signs(v[:, order]))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise NumericsError(f"shape mismatch {a.shape} @ {b.shape}")
    return a @ b


def matpow(a: np.ndarray, k: int) -> np.ndarray:
    if k < 0:
        raise NumericsError("negative matrix power")
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NumericsError(f"matpow needs a square matrix, got {a.shape}")
    out = np.eye(a.shape[0])
    for _ in range(k):
        out = matmul(a, out)
    return out


def pinv_from_eig(dec: EigenDecomposition, tol: float = ZERO_EIG_TOL) -> np.ndarray:
    """Pseudoinverse ``sum_{lam > tol} u u^T / lam`` of a PSD matrix."""
    vals, vecs = dec.nontrivial(tol)
    return (vecs / vals) @ vecs.T


def r2_score(y_true, y_pred) -> float:
    y_true = np.asarray(y_true, dtype=np.float64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.float64).ravel()
    if y_true.shape != y_pred.shape:
        raise NumericsError(f"length mismatch {y_true.size} vs {y_pred.size}")
    if y_true.size < 2:
        raise NumericsError("R^2 needs at least two values")
    ss_res = float(np.sum((y_true - y_pred) ** 2))
    ss_tot = float(np.sum((y_true - y_true.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return 1.0 - ss_res / ss_tot


def gaussian_matrix(rows: int, cols: int, seed: int) -> np.ndarray:
    """i.i.d. N(0, 1) entries: PCG64 uniforms through the Box-Muller transform."""
    count = rows * cols
    pairs = (count + 1) // 2
    u = np.random.Generator(np.random.PCG64(seed)).random((2, pairs))
    radius = np.sqrt(-2.0 * np.log1p(-u[0]))  # 1 - u lies in (0, 1]
    theta = 2.0 * math.pi * u[1]
    z = np.empty(2 * pairs)
    z[0::2] = radius * np.cos(theta)
    z[1::2] = radius * np.sin(theta)
    return z[:count].reshape(rows, cols)
