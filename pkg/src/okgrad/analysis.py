"""
Gradient-quality measurement

- cosine between an approximate and the exact recurrent gradient
- noise_protocol: frozen network, exact RTRL co-evolved with an approximator
- estimator_moments: mean/variance of a random sampler, exhaustive when the number
  of sign outcomes is small enough, Monte-Carlo otherwise
- rank_sweep: variance of the optimal unbiased rank-r approximation across r
"""

import logging
import os
from typing import List, NamedTuple, Optional

import numpy as np
import pandas as pd

from okgrad import lowrank, rnn, smalllin
from okgrad.approximators import ExactRtrl, make_algo, parse_algo
from okgrad.errors import DenseCapError, ShapeError
from okgrad.models import CosineRecord
from okgrad.signs import (MAX_ENUMERATION_BITS, ScriptedSigns, SignStream,
                          count_signs, sign_patterns)

logger = logging.getLogger(__name__)

ORACLE_MEM_MB = int(os.getenv("OKGRAD_ORACLE_MEM_MB", "2048"))
MIN_NORM = 1e-12
FILTER_THRESHOLD = 1e-4
NOISE_SALT = 17
MC_SAMPLES = 10_000


def cosine(a, b) -> Optional[float]:
    """Cosine of the angle between two gradients; None when either is (near) zero"""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare gradients of sizes {a.size} and {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < MIN_NORM or nb < MIN_NORM:
        return None
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def oracle_bytes(n, p):
    return 8 * n * p * 2 * n


def noise_protocol(params, algo, steps, ids, seed=0, repetition=0,
                   filter_threshold=FILTER_THRESHOLD, mem_cap_mb=None) -> List[CosineRecord]:
    """Cosine of the approximate vs exact recurrent gradient on a frozen network

    Both algorithms see the same inputs ``ids`` (wrapping); the loss at step t is the
    prediction of ids[t + 1].
    """
    spec = parse_algo(algo)
    if spec.name == "tbptt":
        raise ShapeError("tbptt produces no per-step gradient estimate")
    cap = (ORACLE_MEM_MB if mem_cap_mb is None else mem_cap_mb) * 2 ** 20
    need = oracle_bytes(params.n, params.p)
    if need > cap:
        raise DenseCapError(need, cap)
    ids = np.asarray(ids)
    if len(ids) < 2:
        raise ShapeError("noise protocol needs at least two input characters")

    exact = ExactRtrl(params.n, params.p, None)
    approx = make_algo(spec, params.n, params.p, SignStream(seed, repetition, NOISE_SALT))
    h = np.zeros(params.n)
    records = []
    for t in range(steps):
        x, y = ids[t % len(ids)], ids[(t + 1) % len(ids)]
        step = rnn.forward(params, h, x)
        exact.advance(step, params)
        approx.advance(step, params)
        dl_dh = rnn.head_loss(params, step.h_next, y).dl_dh
        true = exact.estimate(dl_dh)
        est = approx.estimate(dl_dh)
        true_norm = float(np.linalg.norm(true))
        records.append(CosineRecord(
            step=t + 1,
            cosine=cosine(est, true),
            true_norm=true_norm,
            approx_norm=float(np.linalg.norm(est)),
            filtered=true_norm < filter_threshold,
        ))
        h = step.h_next
    kept = [r.cosine for r in records if not r.filtered and r.cosine is not None]
    if kept:
        logger.info(f"{spec} repetition {repetition}: mean cosine {np.mean(kept):.4f} over {len(kept)} steps")
    return records


def records_frame(records):
    cols = ["step", "cosine", "true_norm", "approx_norm", "filtered"]
    return pd.DataFrame([r.model_dump() for r in records], columns=cols)


def aggregate_cosines(frames):
    """Per-step mean/std of cosines over repetitions, ignoring filtered and missing values"""
    cols = ["step", "mean_cosine", "std_cosine", "count"]
    if not frames:
        return pd.DataFrame(columns=cols)
    df = pd.concat(frames, ignore_index=True)
    df = df[~df["filtered"].astype(bool) & df["cosine"].notna()]
    if df.empty:
        return pd.DataFrame(columns=cols)
    out = df.groupby("step")["cosine"].agg(
        mean_cosine="mean",
        std_cosine=lambda s: s.std(ddof=0),
        count="count",
    ).reset_index()
    return out[cols]


class Moments(NamedTuple):
    mean: np.ndarray
    mean_error: float     # |E[X] - target| relative to |target| (absolute when target is 0)
    variance: float       # E|X - target|^2
    std_error: float      # 0 in exhaustive mode
    samples: int
    exhaustive: bool


def estimator_moments(target, sampler, n_samples=None, seed=0, allow_fallback=True) -> Moments:
    """Mean and variance of ``sampler(rng)`` around ``target``

    With ``n_samples=None`` every sign outcome is enumerated, which requires the sampler
    to consume a fixed number of signs (at most 2^16 outcomes); otherwise Monte-Carlo
    with ``n_samples`` draws. Without ``allow_fallback`` an oversized enumeration raises
    EnumerationError instead of switching to Monte-Carlo.
    """
    target = np.asarray(target, dtype=float)
    norm = np.linalg.norm(target)
    scale = norm if norm > 0 else 1.0

    if n_samples is None:
        count = count_signs(sampler)
        if count > MAX_ENUMERATION_BITS and allow_fallback:
            logger.info(f"{count} signs exceed the enumeration cap, falling back to Monte-Carlo")
            n_samples = MC_SAMPLES
        else:
            outs = []
            for pattern in sign_patterns(count):
                rng = ScriptedSigns(pattern)
                outs.append(np.asarray(sampler(rng), dtype=float))
            outs = np.array(outs)
            mean = outs.mean(axis=0)
            sq = np.array([np.sum((o - target) ** 2) for o in outs])
            return Moments(mean, float(np.linalg.norm(mean - target) / scale),
                           float(sq.mean()), 0.0, len(outs), True)

    rng = SignStream(seed)
    total = np.zeros_like(target)
    sq = np.empty(n_samples)
    for i in range(n_samples):
        out = np.asarray(sampler(rng), dtype=float)
        total += out
        sq[i] = np.sum((out - target) ** 2)
    mean = total / n_samples
    std_error = float(sq.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else float("inf")
    return Moments(mean, float(np.linalg.norm(mean - target) / scale),
                   float(sq.mean()), std_error, n_samples, False)


class RankVariance(NamedTuple):
    rank: int
    variance: float
    bound: float


def rank_sweep(c, ranks) -> List[RankVariance]:
    """Enumerated variance of opt(c, r) next to its closed-form value, for each r"""
    c = smalllin.check_mat(c, "target matrix")
    d = smalllin.svd(c).d
    out = []
    for r in ranks:
        moments = estimator_moments(c, lambda rng, r=r: lowrank.opt(c, r, rng).product())
        bound = lowrank.split_index(d, r).variance_bound
        out.append(RankVariance(int(r), moments.variance, bound))
        logger.debug(f"rank {r}: variance {moments.variance:.6g}, bound {bound:.6g}")
    return out
