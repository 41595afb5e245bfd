"""
Kronecker-Sum representation and the mixing procedures built on it

A KroneckerSum stores G = sum_i u_i (x) A_i with every u_i of shape (a, b) and every
A_i of shape (c, d), so G is (a*c) x (b*d). A TripleSum stores sum_i a_i (x) b_i (x) c_i
with a_i a row, b_i a column and c_i a row.

Compression from r+1 to r terms:
- ok_compress: rewrite the terms in orthonormal bases of both factor spans, which turns
  the problem into approximating a small coefficient matrix C, then hand C to
  lowrank.opt (or lowrank.opt_bias for the biased variant)
- sign_trick_mix: merge two terms with one shared random sign (after norm balancing)
- kfavg_compress: r independent sign tricks, the averaging baseline
- ktp_mix: merge two triple products with signs (s1, s2, s1*s2)
"""

import logging
import os
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from okgrad import lowrank
from okgrad.errors import DenseCapError, ShapeError
from okgrad.smalllin import gram_schmidt

logger = logging.getLogger(__name__)

DENSE_CAP = int(os.getenv("OKGRAD_DENSE_CAP", "10000000"))


@dataclass(frozen=True)
class KronFormat:
    a: int
    b: int
    c: int
    d: int

    def __post_init__(self):
        if min(self.a, self.b, self.c, self.d) < 1:
            raise ShapeError(f"Kronecker format entries must be positive: {self}")

    @property
    def dense_shape(self):
        return self.a * self.c, self.b * self.d


@dataclass
class KroneckerSum:
    format: KronFormat
    terms: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        u_shape = (self.format.a, self.format.b)
        a_shape = (self.format.c, self.format.d)
        for u, big in self.terms:
            if u.shape != u_shape or big.shape != a_shape:
                raise ShapeError(
                    f"term shapes {u.shape}, {big.shape} do not match format {u_shape}, {a_shape}"
                )

    @classmethod
    def zeros(cls, fmt, r):
        return cls(fmt, [(np.zeros((fmt.a, fmt.b)), np.zeros((fmt.c, fmt.d))) for _ in range(r)])

    def __len__(self):
        return len(self.terms)

    @property
    def nbytes(self):
        return sum(u.nbytes + big.nbytes for u, big in self.terms)


@dataclass
class TripleSum:
    """sum_i a_i (x) b_i (x) c_i with a_i (1 x p), b_i (n x 1), c_i (1 x q)"""
    p: int
    n: int
    q: int
    terms: List[Tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        for a, b, c in self.terms:
            if a.shape != (1, self.p) or b.shape != (self.n, 1) or c.shape != (1, self.q):
                raise ShapeError(f"triple shapes {a.shape}, {b.shape}, {c.shape} inconsistent")

    @classmethod
    def zeros(cls, r, p, n, q):
        return cls(p, n, q, [(np.zeros((1, p)), np.zeros((n, 1)), np.zeros((1, q))) for _ in range(r)])

    def __len__(self):
        return len(self.terms)

    @property
    def nbytes(self):
        return sum(a.nbytes + b.nbytes + c.nbytes for a, b, c in self.terms)


def dense(g, cap=None):
    """Materialize a KroneckerSum or TripleSum as a dense matrix"""
    cap = DENSE_CAP if cap is None else cap
    if isinstance(g, KroneckerSum):
        rows, cols = g.format.dense_shape
    elif isinstance(g, TripleSum):
        rows, cols = g.n, g.p * g.q
    else:
        raise ShapeError(f"cannot densify {type(g).__name__}")
    if rows * cols > cap:
        raise DenseCapError(rows * cols, cap)

    out = np.zeros((rows, cols))
    if isinstance(g, KroneckerSum):
        for u, big in g.terms:
            out += np.kron(u, big)
    else:
        for a, b, c in g.terms:
            out += np.kron(a, b @ c)
    return out


def ok_compress(g, r, rng, biased=False):
    """Approximate an (r+1)-term KroneckerSum by r terms, unbiasedly with minimum variance

    With ``biased=True`` the closest deterministic r-term sum is returned instead.
    """
    if len(g) <= r:
        return g
    if len(g) != r + 1:
        raise ShapeError(f"ok_compress expects {r + 1} terms, got {len(g)}")

    fmt = g.format
    gs_u = gram_schmidt([u for u, _ in g.terms])
    gs_a = gram_schmidt([big for _, big in g.terms])
    q_u, q_a = gs_u.effective_rank, gs_a.effective_rank
    if q_u == 0 or q_a == 0:
        return KroneckerSum.zeros(fmt, r)

    # sum_j u_j (x) A_j = sum_{i,k} C[i, k] v_i (x) B_k
    coeff = gs_u.coeffs @ gs_a.coeffs.T
    if biased or min(q_u, q_a) <= r:
        l, r_mat = lowrank.opt_bias(coeff, min(r, q_u, q_a))
    else:
        sample = lowrank.opt(coeff, r, rng)
        l, r_mat = sample.l, sample.r_mat

    new_u = l.T @ gs_u.onb
    new_a = r_mat.T @ gs_a.onb
    terms = [
        (new_u[j].reshape(fmt.a, fmt.b), new_a[j].reshape(fmt.c, fmt.d))
        for j in range(l.shape[1])
    ]
    while len(terms) < r:
        terms.append((np.zeros((fmt.a, fmt.b)), np.zeros((fmt.c, fmt.d))))
    return KroneckerSum(fmt, terms)


def _balance(u, big):
    """Rescale a factor pair so both factors have the same norm"""
    nu, nb = np.linalg.norm(u), np.linalg.norm(big)
    if nu == 0.0 or nb == 0.0:
        return u, big
    rho = np.sqrt(nb / nu)
    return u * rho, big / rho


def sign_trick_mix(t1, t2, rng):
    """Unbiased single-term merge of u (x) A + h (x) D with one random sign"""
    u, big_a = t1
    h, big_d = t2
    if u.shape != h.shape or big_a.shape != big_d.shape:
        raise ShapeError(f"sign trick shape mismatch: {u.shape}/{h.shape}, {big_a.shape}/{big_d.shape}")
    u, big_a = _balance(u, big_a)
    h, big_d = _balance(h, big_d)
    c = rng.signs(1)[0]
    return u + c * h, big_a + c * big_d


def kfavg_compress(g, r, rng):
    """r-KF-RTRL-AVG step: mix each of the first r terms (scaled by r) with the last one"""
    if len(g) != r + 1:
        raise ShapeError(f"kfavg_compress expects {r + 1} terms, got {len(g)}")
    h, big_d = g.terms[-1]
    terms = []
    for u, big_a in g.terms[:-1]:
        new_u, new_a = sign_trick_mix((r * u, big_a), (h, big_d), rng)
        terms.append((new_u / r, new_a))
    return KroneckerSum(g.format, terms)


def ktp_mix(t1, t2, rng):
    """Unbiased merge of two triple products with signs (s1, s2, s1*s2)"""
    a, b, c = t1
    h, d, e = t2
    if a.shape != h.shape or b.shape != d.shape or c.shape != e.shape:
        raise ShapeError("ktp_mix shape mismatch")
    s1, s2 = rng.signs(2)
    return a + s1 * h, b + s2 * d, c + s1 * s2 * e
