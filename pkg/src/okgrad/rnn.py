"""
Single-layer Recurrent Highway cell

    h_hat = [h_prev, onehot(x), 1]                     (1 x p, p = n + n_in + 1)
    g     = 2 sigmoid(h_hat w_g) - 1
    t     = sigmoid(h_hat w_t)
    h     = t * g + (1 - t) * h_prev

The recurrent parameters are stacked as W = [w_g | w_t] (p x 2n) and flattened
row-major, so the sensitivity dh/dW is an n x (p*2n) matrix whose immediate part
factors as h_hat (x) (D1 | D2) with D1, D2 diagonal. The output head is a softmax
over [h, 1] @ w_out with w_out of shape (n + 1) x v.

Also here: exact RTRL, truncated BPTT, the matrix-free directional derivative and
the binary checkpoint format.
"""

import logging
import os
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from okgrad.errors import DivergenceError, ShapeError
from okgrad.signs import SignStream

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
CARRY_BIAS = -1.0
FD_EPS = 1e-5
INIT_SALT = 101


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class RhnParams:
    w_g: np.ndarray
    w_t: np.ndarray
    w_out: np.ndarray

    def __post_init__(self):
        self.w_g = np.asarray(self.w_g, dtype=float)
        self.w_t = np.asarray(self.w_t, dtype=float)
        self.w_out = np.asarray(self.w_out, dtype=float)
        p, n = self.w_g.shape
        if self.w_t.shape != (p, n):
            raise ShapeError(f"w_t shape {self.w_t.shape} != w_g shape {(p, n)}")
        if self.w_out.ndim != 2 or self.w_out.shape[0] != n + 1:
            raise ShapeError(f"w_out must have {n + 1} rows, got shape {self.w_out.shape}")
        if p < n + 2:
            raise ShapeError(f"w_g has {p} rows, need at least n + 2 = {n + 2}")
        for name in ("w_g", "w_t", "w_out"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DivergenceError(f"{name} contains NaN or Inf")

    @property
    def n(self):
        return self.w_g.shape[1]

    @property
    def p(self):
        return self.w_g.shape[0]

    @property
    def n_in(self):
        return self.p - self.n - 1

    @property
    def v(self):
        return self.w_out.shape[1]

    @property
    def recurrent(self):
        """[w_g | w_t] as one p x 2n matrix"""
        return np.hstack([self.w_g, self.w_t])

    @classmethod
    def zeros(cls, n, n_in, v):
        p = n + n_in + 1
        return cls(np.zeros((p, n)), np.zeros((p, n)), np.zeros((n + 1, v)))

    @classmethod
    def init(cls, n, n_in, v, seed):
        """Gaussian weights scaled by 1/sqrt(fan-in), transform gate biased towards carry"""
        if min(n, n_in, v) < 1:
            raise ShapeError(f"n, n_in and v must be positive, got {n}, {n_in}, {v}")
        rng = SignStream(seed, salt=INIT_SALT)
        p = n + n_in + 1
        w_g = rng.normal(1.0 / np.sqrt(p), (p, n))
        w_t = rng.normal(1.0 / np.sqrt(p), (p, n))
        w_t[-1, :] = CARRY_BIAS
        w_out = rng.normal(1.0 / np.sqrt(n + 1), (n + 1, v))
        w_out[-1, :] = 0.0
        return cls(w_g, w_t, w_out)

    def copy(self):
        return RhnParams(self.w_g.copy(), self.w_t.copy(), self.w_out.copy())


@dataclass(frozen=True)
class RhnStep:
    h_prev: np.ndarray
    h_next: np.ndarray
    h_hat: np.ndarray
    g: np.ndarray
    t_gate: np.ndarray
    pre_g: np.ndarray
    pre_t: np.ndarray


@dataclass(frozen=True)
class ImmediateFactor:
    """dh_t/dW = h_hat (x) [diag(d1) | diag(d2)]"""
    h_hat: np.ndarray   # (1, p)
    d1: np.ndarray      # (n,)
    d2: np.ndarray      # (n,)

    @property
    def d_block(self):
        return np.hstack([np.diag(self.d1), np.diag(self.d2)])

    def dense(self):
        return np.kron(self.h_hat, self.d_block)


@dataclass
class RtrlState:
    g_mat: np.ndarray

    @classmethod
    def zeros(cls, n, p):
        return cls(np.zeros((n, p * 2 * n)))


class ParamGrad(NamedTuple):
    recurrent: np.ndarray   # (p, 2n), same layout as RhnParams.recurrent
    w_out: np.ndarray       # (n + 1, v)

    @property
    def w_g(self):
        return self.recurrent[:, :self.recurrent.shape[1] // 2]

    @property
    def w_t(self):
        return self.recurrent[:, self.recurrent.shape[1] // 2:]


class HeadResult(NamedTuple):
    loss: float             # nats
    dl_dh: np.ndarray       # (n,)
    w_out_grad: np.ndarray  # (n + 1, v)
    probs: np.ndarray       # (v,)


def one_hot(x, size):
    if np.ndim(x) == 0:
        idx = int(x)
        if not 0 <= idx < size:
            raise ShapeError(f"input id {idx} out of range [0, {size})")
        out = np.zeros(size)
        out[idx] = 1.0
        return out
    vec = np.asarray(x, dtype=float).ravel()
    if vec.shape != (size,):
        raise ShapeError(f"input vector has shape {vec.shape}, expected ({size},)")
    return vec


def forward(params, h_prev, x):
    h_prev = np.asarray(h_prev, dtype=float).ravel()
    if h_prev.shape != (params.n,):
        raise ShapeError(f"h_prev has shape {h_prev.shape}, expected ({params.n},)")
    h_hat = np.concatenate([h_prev, one_hot(x, params.n_in), [1.0]])
    pre_g = h_hat @ params.w_g
    pre_t = h_hat @ params.w_t
    g = 2.0 * sigmoid(pre_g) - 1.0
    t_gate = sigmoid(pre_t)
    h_next = t_gate * g + (1.0 - t_gate) * h_prev
    if not np.all(np.isfinite(h_next)):
        raise DivergenceError("hidden state became non-finite")
    return RhnStep(h_prev, h_next, h_hat[None, :], g, t_gate, pre_g, pre_t)


def _gate_derivatives(step):
    sg = sigmoid(step.pre_g)
    d1 = step.t_gate * 2.0 * sg * (1.0 - sg)
    d2 = (step.g - step.h_prev) * step.t_gate * (1.0 - step.t_gate)
    return d1, d2


def jacobian_h(step, params):
    """H[j, i] = d h_next_j / d h_prev_i"""
    n = params.n
    d1, d2 = _gate_derivatives(step)
    h = (params.w_g[:n] * d1).T + (params.w_t[:n] * d2).T
    h[np.diag_indices(n)] += 1.0 - step.t_gate
    return h


def immediate_factor(step, params):
    d1, d2 = _gate_derivatives(step)
    return ImmediateFactor(step.h_hat, d1, d2)


def rtrl_step(state, h_jac, f):
    g_mat = h_jac @ state.g_mat
    n = h_jac.shape[0]
    p = f.h_hat.shape[1]
    if g_mat.shape != (n, p * 2 * n):
        raise ShapeError(f"RTRL state shape {state.g_mat.shape} does not match n={n}, p={p}")
    view = g_mat.reshape(n, p, 2 * n)
    idx = np.arange(n)
    view[idx, :, idx] += f.h_hat[0][None, :] * f.d1[:, None]
    view[idx, :, n + idx] += f.h_hat[0][None, :] * f.d2[:, None]
    return RtrlState(g_mat)


def contract_dense(dl_dh, g_mat, p):
    """dl_dh @ G reshaped to the (p, 2n) recurrent layout"""
    return (np.asarray(dl_dh) @ g_mat).reshape(p, -1)


def directional_derivative(params, h_prev, x, b):
    """H_t b by central differences along b / |b|, without forming H_t"""
    b = np.asarray(b, dtype=float).ravel()
    norm_b = np.linalg.norm(b)
    if norm_b == 0.0:
        return np.zeros_like(b)
    h_prev = np.asarray(h_prev, dtype=float).ravel()
    direction = b / norm_b
    eps = FD_EPS * max(np.linalg.norm(h_prev), 1.0)
    plus = forward(params, h_prev + eps * direction, x).h_next
    minus = forward(params, h_prev - eps * direction, x).h_next
    return (plus - minus) / (2.0 * eps) * norm_b


def head_loss(params, h, target):
    """Softmax cross-entropy of the output head at hidden state h"""
    h1 = np.append(h, 1.0)
    logits = h1 @ params.w_out
    shifted = logits - logits.max()
    log_z = np.log(np.exp(shifted).sum())
    log_probs = shifted - log_z
    probs = np.exp(log_probs)
    loss = -float(log_probs[target])
    if not np.isfinite(loss):
        raise DivergenceError("loss became non-finite")
    dlogits = probs.copy()
    dlogits[target] -= 1.0
    dl_dh = params.w_out[:-1] @ dlogits
    return HeadResult(loss, dl_dh, np.outer(h1, dlogits), probs)


def backprop_window(steps, dl_dhs, params, cuts=()):
    """Reverse-mode recurrent gradient over stored steps

    ``cuts`` holds the indices k whose h_prev was reset, so nothing flows from step k
    back into step k - 1.
    """
    if len(steps) != len(dl_dhs):
        raise ShapeError(f"{len(steps)} steps but {len(dl_dhs)} loss gradients")
    n, p = params.n, params.p
    grad = np.zeros((p, 2 * n))
    delta = np.zeros(n)
    for k in range(len(steps) - 1, -1, -1):
        step = steps[k]
        delta = delta + dl_dhs[k]
        d1, d2 = _gate_derivatives(step)
        grad += np.outer(step.h_hat[0], np.concatenate([delta * d1, delta * d2]))
        if k in cuts:
            delta = np.zeros(n)
        else:
            delta = delta @ jacobian_h(step, params)
    return grad


def tbptt_gradient(params, inputs, h_init, targets, mask=None):
    """Exact gradient of the summed window loss, truncated at the window start

    Returns (loss_nats, ParamGrad, h_last).
    """
    if len(inputs) == 0:
        raise ShapeError("TBPTT window must be non-empty")
    if len(inputs) != len(targets):
        raise ShapeError(f"{len(inputs)} inputs but {len(targets)} targets")
    mask = np.ones(len(inputs), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    h = np.asarray(h_init, dtype=float)
    steps, dl_dhs = [], []
    w_out_grad = np.zeros_like(params.w_out)
    total = 0.0
    for x, y, active in zip(inputs, targets, mask):
        step = forward(params, h, x)
        steps.append(step)
        if active:
            head = head_loss(params, step.h_next, y)
            total += head.loss
            w_out_grad += head.w_out_grad
            dl_dhs.append(head.dl_dh)
        else:
            dl_dhs.append(np.zeros(params.n))
        h = step.h_next
    recurrent = backprop_window(steps, dl_dhs, params)
    return total, ParamGrad(recurrent, w_out_grad), h


def save_checkpoint(path, params, seed):
    """Header of key=value lines, a blank line, then little-endian float32 weights"""
    header = {
        "version": CHECKPOINT_VERSION,
        "n": params.n,
        "n_in": params.n_in,
        "v": params.v,
        "seed": int(seed),
    }
    text = "".join(f"{k}={v}\n" for k, v in header.items()) + "\n"
    body = b"".join(
        np.ascontiguousarray(arr, dtype="<f4").tobytes()
        for arr in (params.w_g, params.w_t, params.w_out)
    )
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(text.encode("utf-8"))
        fh.write(body)
    os.replace(tmp, path)
    logger.info("checkpoint written to %s (n=%d, n_in=%d, v=%d)", path, params.n, params.n_in, params.v)


def load_checkpoint(path):
    """Returns (RhnParams, header dict)"""
    with open(path, "rb") as fh:
        raw = fh.read()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise ShapeError(f"{path}: checkpoint header not terminated by a blank line")
    header = {}
    for line in raw[:sep].decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        header[key.strip()] = int(value)
    for key in ("version", "n", "n_in", "v", "seed"):
        if key not in header:
            raise ShapeError(f"{path}: checkpoint header missing '{key}'")
    if header["version"] != CHECKPOINT_VERSION:
        raise ShapeError(f"{path}: unsupported checkpoint version {header['version']}")

    n, n_in, v = header["n"], header["n_in"], header["v"]
    p = n + n_in + 1
    weights = np.frombuffer(raw[sep + 2:], dtype="<f4").astype(float)
    expected = 2 * p * n + (n + 1) * v
    if weights.size != expected:
        raise ShapeError(f"{path}: expected {expected} weights, found {weights.size}")
    w_g = weights[:p * n].reshape(p, n)
    w_t = weights[p * n:2 * p * n].reshape(p, n)
    w_out = weights[2 * p * n:].reshape(n + 1, v)
    return RhnParams(w_g, w_t, w_out), header
