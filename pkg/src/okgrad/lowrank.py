"""
Unbiased low-rank approximation of small matrices

opt() draws a random pair (L', R') with E[L' R'^T] = C, rank(L' R'^T) <= r and the
smallest variance E||L' R'^T - C||^2 any such approximator can reach. The recipe:
SVD reduces C to a non-negative diagonal; the largest singular values are kept
deterministically, the remaining tail is spread over k random rank-one directions
whose signs are drawn fresh on every call. opt_bias() is the deterministic
Eckart-Young counterpart.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from okgrad import smalllin
from okgrad.errors import ShapeError

logger = logging.getLogger(__name__)

ORDER_TOL = 1e-12
SUM_TOL = 1e-6
RANGE_TOL = 1e-9


@dataclass(frozen=True)
class DiagSplit:
    """Where the deterministic head of a diagonal ends and the mixed tail starts

    ``m`` is 1-based: entries d_1..d_{m-1} are kept exactly, d_m..d_n are mixed
    into k = r - m + 1 random directions.
    """
    m: int
    k: int
    s1: float
    s2: float
    variance_bound: float


@dataclass(frozen=True)
class LowRankSample:
    l: np.ndarray
    r_mat: np.ndarray
    sign_draw: np.ndarray = field(default_factory=lambda: np.empty(0))

    def product(self):
        return self.l @ self.r_mat.T


def _check_diag(d):
    d = np.asarray(d, dtype=float).ravel()
    if d.size == 0:
        raise ShapeError("diagonal must be non-empty")
    if not np.all(np.isfinite(d)):
        raise ShapeError("diagonal contains NaN or Inf")
    scale = max(float(np.abs(d).max()), 1.0)
    if np.any(d < -ORDER_TOL * scale):
        raise ShapeError("diagonal entries must be non-negative")
    if np.any(np.diff(d) > ORDER_TOL * scale):
        raise ShapeError("diagonal must be sorted non-increasing")
    return np.clip(d, 0.0, None)


def _check_rank(r):
    if int(r) != r or r < 1:
        raise ShapeError(f"rank must be a positive integer, got {r}")
    return int(r)


def split_index(d, r):
    """Smallest m with (r - m + 1) d_m <= sum_{j >= m} d_j, and the variance it implies"""
    d = _check_diag(d)
    r = _check_rank(r)
    n = len(d)
    suffix = np.cumsum(d[::-1])[::-1]
    m = n + 1
    for i in range(1, n + 1):
        lhs = (r - i + 1) * d[i - 1]
        if lhs <= suffix[i - 1] * (1.0 + ORDER_TOL):
            m = i
            break
    k = r - m + 1
    tail = d[m - 1:]
    s1 = float(tail.sum())
    s2 = float((tail * tail).sum())
    bound = s1 * s1 / k - s2 if k > 0 and s1 > 0.0 else 0.0
    return DiagSplit(m=m, k=k, s1=s1, s2=s2, variance_bound=max(bound, 0.0))


def sample_opt_diag(d, r, rng):
    """Minimum-variance unbiased rank-r sample of diag(d); returns L' = R' (n x r)"""
    d = _check_diag(d)
    split = split_index(d, r)
    n = len(d)
    m, k, s1 = split.m, split.k, split.s1
    l = np.zeros((n, r))
    head = min(m - 1, n)
    l[np.arange(head), np.arange(head)] = np.sqrt(d[:head])

    tail = d[m - 1:]
    if s1 <= 0.0 or len(tail) == 0:
        return LowRankSample(l=l, r_mat=l.copy())
    if len(tail) <= k:
        idx = np.arange(m - 1, n)
        l[idx, idx] = np.sqrt(tail)
        return LowRankSample(l=l, r_mat=l.copy())

    w = np.minimum(tail * k / s1, 1.0)
    if len(tail) == k + 1:
        z0 = np.sqrt(np.clip(1.0 - w, 0.0, None))
        z0 /= np.linalg.norm(z0)
        zmat = smalllin.complete_onb(z0).T
    else:
        zmat = idempotent_with_diagonal(w).T

    s = rng.signs(len(tail))
    l[m - 1:, m - 1:m - 1 + k] = np.sqrt(s1 / k) * (s[:, None] * zmat)
    return LowRankSample(l=l, r_mat=l.copy(), sign_draw=s)


def _truncate(svd_result, r):
    root = np.sqrt(svd_result.d[:r])
    l = svd_result.u[:, :r] * root
    r_mat = svd_result.v[:, :r] * root
    return l, r_mat


def _check_target(c, r):
    c = smalllin.check_mat(c, "target matrix")
    r = _check_rank(r)
    if r > min(c.shape):
        raise ShapeError(f"rank {r} exceeds min dimension of {c.shape}")
    return c, r


def opt(c, r, rng):
    """Minimum-variance unbiased rank-r approximation of c as a random (L', R')"""
    c, r = _check_target(c, r)
    dec = smalllin.svd(c)
    d = dec.d
    nonzero = int(np.count_nonzero(d > smalllin.RANK_TOL * d[0])) if d[0] > 0 else 0
    if nonzero <= r:
        l, r_mat = _truncate(dec, r)
        return LowRankSample(l=l, r_mat=r_mat)

    sample = sample_opt_diag(d, r, rng)
    q = len(d)
    return LowRankSample(
        l=dec.u[:, :q] @ sample.l,
        r_mat=dec.v[:, :q] @ sample.r_mat,
        sign_draw=sample.sign_draw,
    )


def opt_bias(c, r):
    """Closest rank-r matrix to c (Eckart-Young), as factors (l, r_mat)"""
    c, r = _check_target(c, r)
    return _truncate(smalllin.svd(c), r)


def idempotent_with_diagonal(d):
    """Orthonormal rows z_1..z_r with diag(sum z_i z_i^T) = d

    Requires d in [0, 1] summing to a positive integer r. Built recursively: sort
    descending, move mass between the two entries straddling the running-sum-1
    boundary so the head sums to exactly one, recurse on the tail with r - 1, then
    rotate those two coordinates back to their original diagonal values.
    """
    d = np.asarray(d, dtype=float).ravel()
    if d.size == 0 or not np.all(np.isfinite(d)):
        raise ShapeError("diagonal must be a non-empty finite vector")
    if np.any(d < -RANGE_TOL) or np.any(d > 1.0 + RANGE_TOL):
        raise ShapeError("diagonal entries must lie in [0, 1]")
    total = float(d.sum())
    r = int(round(total))
    if r < 1 or abs(total - r) > SUM_TOL:
        raise ShapeError(f"diagonal must sum to a positive integer, got {total}")
    return _idempotent_rows(np.clip(d, 0.0, 1.0), r)


def _idempotent_rows(d, r):
    n = len(d)
    order = np.argsort(-d, kind="stable")
    ds = d[order]

    if r >= n:
        rows = np.eye(n)
    elif r == 1:
        z = np.sqrt(ds)
        rows = (z / np.linalg.norm(z))[None, :]
    else:
        cums = np.cumsum(ds)
        m = int(np.searchsorted(cums, 1.0 + 1e-12, side="right"))
        m = min(max(m, 1), n - 1)
        alpha = max(1.0 - cums[m - 1], 0.0)
        dp = ds.copy()
        dp[m - 1] += alpha
        dp[m] = max(dp[m] - alpha, 0.0)

        tail_rows = _idempotent_rows(dp[m:], r - 1)
        rows = np.zeros((r, n))
        rows[:r - 1, m:] = tail_rows
        head = np.sqrt(dp[:m])
        rows[r - 1, :m] = head / np.linalg.norm(head)

        denom = 2.0 * alpha + ds[m - 1] - ds[m]
        sin2 = np.clip(alpha / denom, 0.0, 1.0) if denom > 0 else 0.0
        s, c = np.sqrt(sin2), np.sqrt(1.0 - sin2)
        a, b = rows[:, m - 1].copy(), rows[:, m].copy()
        rows[:, m - 1] = c * a + s * b
        rows[:, m] = -s * a + c * b

    out = np.empty_like(rows)
    out[:, order] = rows
    return out
