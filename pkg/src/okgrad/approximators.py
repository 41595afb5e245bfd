"""
Online gradient algorithms for the RHN

Every algorithm keeps a per-lane approximation of G_t = dh_t/dW and exposes

    advance(step, params)   fold one forward step into the state
    estimate(dl_dh)         recurrent gradient (p x 2n) for the loss at this step
    reset()                 zero the state when the hidden state is reset

Algorithm strings:
    exact | tbptt:<T> | uoro | kf | kfavg:<r> | ok:<r> | bok:<r> | kfapprox:<r> | ktp:<r>
"""

import logging
import re
from typing import NamedTuple, Optional

import numpy as np

from okgrad import kronsum, lowrank, rnn
from okgrad.errors import ShapeError
from okgrad.kronsum import KronFormat, KroneckerSum, TripleSum

logger = logging.getLogger(__name__)

ALGO_PATTERN = re.compile(r"^(exact|uoro|kf|tbptt|kfavg|ok|bok|kfapprox|ktp)(?::(\d+))?$")
RANKED = {"tbptt", "kfavg", "ok", "bok", "kfapprox", "ktp"}


class AlgoSpec(NamedTuple):
    name: str
    rank: Optional[int] = None

    def __str__(self):
        return self.name if self.rank is None else f"{self.name}:{self.rank}"


def parse_algo(text):
    """'ok:4' -> AlgoSpec('ok', 4); raises ShapeError on anything outside the grammar"""
    match = ALGO_PATTERN.match(str(text).strip().lower())
    if not match:
        raise ShapeError(f"unknown algorithm '{text}'")
    name, rank = match.group(1), match.group(2)
    if name in RANKED:
        if rank is None or int(rank) < 1:
            raise ShapeError(f"algorithm '{name}' needs a positive parameter, e.g. {name}:4")
        return AlgoSpec(name, int(rank))
    if rank is not None:
        raise ShapeError(f"algorithm '{name}' takes no parameter")
    return AlgoSpec(name)


def block_diag_lowrank(d1, d2, r, rng):
    """Unbiased minimum-variance rank-r factors of (diag(d1) | diag(d2))

    Row j of the block has norm sigma_j = sqrt(d1_j^2 + d2_j^2) and the rows are mutually
    orthogonal, so the block is already in SVD form up to a permutation. Returns
    b (n x r) and c (r x 2n) with E[b @ c] equal to the block.
    """
    d1 = np.asarray(d1, dtype=float)
    d2 = np.asarray(d2, dtype=float)
    if d1.shape != d2.shape or d1.ndim != 1:
        raise ShapeError(f"diagonals must be matching vectors, got {d1.shape} and {d2.shape}")
    n = len(d1)
    sigma = np.sqrt(d1 * d1 + d2 * d2)
    order = np.argsort(-sigma, kind="stable")
    sample = lowrank.sample_opt_diag(sigma[order], r, rng)

    b = np.empty((n, r))
    b[order] = sample.l
    safe = np.where(sigma > 0.0, sigma, 1.0)
    c = np.hstack([(b * (d1 / safe)[:, None]).T, (b * (d2 / safe)[:, None]).T])
    return b, c


class GradAlgo:
    """Common interface; subclasses own one lane's state"""

    name = "base"
    online = True

    def __init__(self, n, p, rng, rank=None):
        self.n = n
        self.p = p
        self.rng = rng
        self.rank = rank
        self.reset()

    @property
    def spec(self):
        return AlgoSpec(self.name, self.rank)

    @property
    def fmt(self):
        return KronFormat(1, self.p, self.n, 2 * self.n)

    def _check(self, step, params):
        if params.n != self.n or params.p != self.p:
            raise ShapeError(f"{self.spec} built for n={self.n}, p={self.p}; got n={params.n}, p={params.p}")

    def advance(self, step, params):
        raise NotImplementedError

    def estimate(self, dl_dh):
        raise NotImplementedError

    def reset(self):
        raise NotImplementedError

    @property
    def state_bytes(self):
        raise NotImplementedError


class ExactRtrl(GradAlgo):
    name = "exact"

    def reset(self):
        self.state = rnn.RtrlState.zeros(self.n, self.p)

    def advance(self, step, params):
        self._check(step, params)
        self.state = rnn.rtrl_step(
            self.state, rnn.jacobian_h(step, params), rnn.immediate_factor(step, params)
        )

    def estimate(self, dl_dh):
        return rnn.contract_dense(dl_dh, self.state.g_mat, self.p)

    @property
    def state_bytes(self):
        return self.state.g_mat.nbytes


class Tbptt(GradAlgo):
    """Truncated BPTT; estimate() returns None until a window of T steps is complete

    reset() marks a cut instead of dropping the window, so gradients from steps before
    the reset are kept but nothing flows backwards across it.
    """
    name = "tbptt"
    online = False

    def __init__(self, n, p, rng, rank=None):
        self.steps, self.dl_dhs, self.cuts = [], [], set()
        self.params = None
        super().__init__(n, p, rng, rank)

    def reset(self):
        self.cuts.add(len(self.steps))

    def advance(self, step, params):
        self._check(step, params)
        self.steps.append(step)
        self.params = params

    def estimate(self, dl_dh):
        self.dl_dhs.append(np.asarray(dl_dh, dtype=float))
        if len(self.dl_dhs) < self.rank:
            return None
        grad = rnn.backprop_window(self.steps, self.dl_dhs, self.params, self.cuts)
        self.steps, self.dl_dhs, self.cuts = [], [], set()
        return grad

    @property
    def state_bytes(self):
        # h_hat plus six n-vectors per step and the stored dl_dh
        return self.rank * (self.p + 7 * self.n) * 8


class Uoro(GradAlgo):
    """Rank-one u (x) V; F_t is probed with a random sign vector nu"""
    name = "uoro"

    def reset(self):
        self.u = np.zeros(self.n)
        self.v = np.zeros((self.p, 2 * self.n))

    def advance(self, step, params):
        self._check(step, params)
        f = rnn.immediate_factor(step, params)
        nu = self.rng.signs(self.n)
        probe = np.outer(f.h_hat[0], np.concatenate([nu * f.d1, nu * f.d2]))
        hu = rnn.jacobian_h(step, params) @ self.u
        self.u, self.v = kronsum.sign_trick_mix((hu, self.v), (nu, probe), self.rng)

    def estimate(self, dl_dh):
        return float(np.dot(dl_dh, self.u)) * self.v

    @property
    def state_bytes(self):
        return self.u.nbytes + self.v.nbytes


class _KronAlgo(GradAlgo):
    """Algorithms whose state is an r-term KroneckerSum with format (1, p, n, 2n)"""

    terms = 1

    def reset(self):
        self.state = KroneckerSum.zeros(self.fmt, self.terms)

    def _propagated(self, step, params):
        h_jac = rnn.jacobian_h(step, params)
        return [(u, h_jac @ big) for u, big in self.state.terms]

    def estimate(self, dl_dh):
        grad = np.zeros((self.p, 2 * self.n))
        for u, big in self.state.terms:
            grad += np.outer(u[0], dl_dh @ big)
        return grad

    @property
    def state_bytes(self):
        return self.state.nbytes


class KfRtrl(_KronAlgo):
    name = "kf"

    def advance(self, step, params):
        self._check(step, params)
        (u, big), = self._propagated(step, params)
        f = rnn.immediate_factor(step, params)
        self.state = KroneckerSum(self.fmt, [kronsum.sign_trick_mix((u, big), (f.h_hat, f.d_block), self.rng)])


class KfAvg(_KronAlgo):
    """r independent KF-RTRL copies averaged; stored as one r-term sum"""
    name = "kfavg"

    @property
    def terms(self):
        return self.rank

    def advance(self, step, params):
        self._check(step, params)
        f = rnn.immediate_factor(step, params)
        g = KroneckerSum(self.fmt, self._propagated(step, params) + [(f.h_hat, f.d_block)])
        self.state = kronsum.kfavg_compress(g, self.rank, self.rng)


class Ok(_KronAlgo):
    name = "ok"
    biased = False

    @property
    def terms(self):
        return self.rank

    def advance(self, step, params):
        self._check(step, params)
        f = rnn.immediate_factor(step, params)
        g = KroneckerSum(self.fmt, self._propagated(step, params) + [(f.h_hat, f.d_block)])
        self.state = kronsum.ok_compress(g, self.rank, self.rng, biased=self.biased)


class BOk(Ok):
    name = "bok"
    biased = True


class KfApprox(_KronAlgo):
    """KF-RTRL with the immediate factor replaced by an unbiased rank-r sample"""
    name = "kfapprox"

    def advance(self, step, params):
        self._check(step, params)
        (u, big), = self._propagated(step, params)
        f = rnn.immediate_factor(step, params)
        b, c = block_diag_lowrank(f.d1, f.d2, self.rank, self.rng)
        self.state = KroneckerSum(self.fmt, [kronsum.sign_trick_mix((u, big), (f.h_hat, b @ c), self.rng)])


class Ktp(GradAlgo):
    """Sum of r triple products a (1 x p) (x) b (n x 1) (x) c (1 x 2n), starting at zero"""
    name = "ktp"

    def reset(self):
        self.state = TripleSum.zeros(self.rank, self.p, self.n, 2 * self.n)

    def advance(self, step, params):
        self._check(step, params)
        x = step.h_hat[0, self.n:self.p - 1]
        f = rnn.immediate_factor(step, params)
        fresh_b, fresh_c = block_diag_lowrank(f.d1, f.d2, self.rank, self.rng)
        terms = []
        for i, (a, b, c) in enumerate(self.state.terms):
            hb = rnn.directional_derivative(params, step.h_prev, x, b[:, 0])[:, None]
            terms.append(
                kronsum.ktp_mix((a, hb, c), (f.h_hat, fresh_b[:, i:i + 1], fresh_c[i:i + 1]), self.rng)
            )
        self.state = TripleSum(self.p, self.n, 2 * self.n, terms)

    def estimate(self, dl_dh):
        grad = np.zeros((self.p, 2 * self.n))
        for a, b, c in self.state.terms:
            grad += float(dl_dh @ b[:, 0]) * np.outer(a[0], c[0])
        return grad

    @property
    def state_bytes(self):
        return self.state.nbytes


ALGORITHMS = {
    cls.name: cls for cls in (ExactRtrl, Tbptt, Uoro, KfRtrl, KfAvg, Ok, BOk, KfApprox, Ktp)
}


def make_algo(spec, n, p, rng):
    """Build a GradAlgo from an AlgoSpec or algorithm string"""
    if not isinstance(spec, AlgoSpec):
        spec = parse_algo(spec)
    return ALGORITHMS[spec.name](n, p, rng, rank=spec.rank)
