"""
Dense linear algebra on small matrices

- One-sided Jacobi SVD with full orthogonal factors
- Orthonormal basis completion via a Householder reflector
- Modified Gram-Schmidt with rank detection

Matrices here are at most a few hundred wide (usually (r+1)x(r+1) with r <= 32),
so the routines favour exactness over asymptotic speed. All functions are pure.
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from okgrad.errors import ConvergenceError, ShapeError

logger = logging.getLogger(__name__)

MAX_SWEEPS = 100
JACOBI_TOL = 1e-12
RANK_TOL = 1e-10
UNIT_TOL = 1e-8


def check_mat(c, name="matrix"):
    """Return ``c`` as a finite 2-d float array or raise ShapeError"""
    arr = np.asarray(c, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-d matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name} contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class SvdResult:
    """c = u @ diag(d) @ v.T with u (m x m), v (n x n) orthogonal, d non-increasing"""
    u: np.ndarray
    d: np.ndarray
    v: np.ndarray

    def reconstruct(self):
        m, n = self.u.shape[0], self.v.shape[0]
        k = len(self.d)
        return self.u[:, :k] @ np.diag(self.d) @ self.v[:, :k].T if k else np.zeros((m, n))


class GramSchmidt(NamedTuple):
    onb: np.ndarray          # (q, dim), rows orthonormal
    coeffs: np.ndarray       # (q, count), coeffs[i, j] = <onb_i, input_j>
    effective_rank: int


def _jacobi_columns(a):
    """Orthogonalize the columns of a (m >= n) by plane rotations; returns (w, v)"""
    w = a.copy()
    n = w.shape[1]
    v = np.eye(n)
    scale = np.linalg.norm(a)
    floor = (JACOBI_TOL * scale) ** 2
    for sweep in range(1, MAX_SWEEPS + 1):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = w[:, i] @ w[:, i]
                beta = w[:, j] @ w[:, j]
                gamma = w[:, i] @ w[:, j]
                if alpha * beta <= floor * floor or abs(gamma) <= JACOBI_TOL * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                wi, wj = w[:, i].copy(), w[:, j]
                w[:, i] = c * wi - s * wj
                w[:, j] = s * wi + c * wj
                vi, vj = v[:, i].copy(), v[:, j]
                v[:, i] = c * vi - s * vj
                v[:, j] = s * vi + c * vj
        if not rotated:
            logger.debug("jacobi converged after %d sweeps", sweep)
            return w, v
    raise ConvergenceError("one-sided Jacobi SVD did not converge", MAX_SWEEPS)


def _complete_columns(cols, m):
    """Extend orthonormal columns (m x k) to an orthogonal m x m matrix"""
    candidates = np.hstack([cols, np.eye(m)]) if cols.size else np.eye(m)
    basis = gram_schmidt(list(candidates.T)).onb
    return basis[:m].T


def svd(c):
    """Full singular value decomposition of a small dense matrix"""
    a = check_mat(c, "svd input")
    m, n = a.shape
    if m < n:
        t = svd(a.T)
        return SvdResult(u=t.v, d=t.d, v=t.u)

    w, v = _jacobi_columns(a)
    d = np.linalg.norm(w, axis=0)
    order = np.argsort(-d, kind="stable")
    d, w, v = d[order], w[:, order], v[:, order]

    # columns with vanishing norm carry no direction; completion supplies one
    tiny = 1e-15 * max(np.linalg.norm(a), np.finfo(float).tiny)
    live = d > tiny
    u_live = w[:, live] / d[live]
    if u_live.shape[1]:
        u_live = gram_schmidt(list(u_live.T)).onb.T
    u = _complete_columns(u_live, m)
    d = np.where(live, d, 0.0)
    return SvdResult(u=u, d=d, v=v)


def complete_onb(z0, n=None):
    """Vectors z1..z_{n-1} that extend the unit vector z0 to an orthonormal basis

    Uses the Householder reflector H with H e1 = -sign(z0_1) z0; its columns 2..n are
    orthonormal and orthogonal to z0. Returned as an (n-1, n) array of rows.
    """
    z0 = np.asarray(z0, dtype=float).ravel()
    if n is not None and n != len(z0):
        raise ShapeError(f"z0 has dimension {len(z0)}, expected {n}")
    n = len(z0)
    if n == 0 or abs(np.linalg.norm(z0) - 1.0) > UNIT_TOL:
        raise ShapeError(f"z0 must be a unit vector, got norm {np.linalg.norm(z0) if n else 0.0}")
    sign = 1.0 if z0[0] >= 0 else -1.0
    v = sign * z0
    v[0] += 1.0
    h = np.eye(n) - 2.0 * np.outer(v, v) / (v @ v)
    return h[:, 1:].T.copy()


def gram_schmidt(vectors):
    """Orthonormal basis of span(vectors) with reconstruction coefficients

    Modified Gram-Schmidt with one re-orthogonalization pass. A vector whose residual
    is below RANK_TOL times the largest input norm adds no basis vector.
    """
    if len(vectors) == 0:
        raise ShapeError("gram_schmidt needs at least one vector")
    mat = np.array([np.asarray(x, dtype=float).ravel() for x in vectors])
    if mat.ndim != 2:
        raise ShapeError("gram_schmidt inputs must share a common dimension")
    norms = np.linalg.norm(mat, axis=1)
    threshold = RANK_TOL * norms.max()
    basis = []
    for x in mat:
        res = x.copy()
        for _ in range(2):
            for q in basis:
                res -= (q @ res) * q
        norm = np.linalg.norm(res)
        if norm > threshold and norm > 0.0:
            basis.append(res / norm)
    onb = np.array(basis) if basis else np.zeros((0, mat.shape[1]))
    coeffs = onb @ mat.T
    return GramSchmidt(onb=onb, coeffs=coeffs, effective_rank=len(basis))
