"""
Training loop for the RHN under any gradient algorithm

- Copy task with a length curriculum, or next-character prediction on a text corpus
- One hidden state and one GradAlgo per batch lane; lanes run on a thread pool
- Lane gradients are summed in lane order, then a single Adam update is applied
- Online algorithms update every step, TBPTT once per completed window
- RunRecords are flushed to CSV every eval interval
"""

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, NamedTuple, Optional

import numpy as np
import pandas as pd

from okgrad import data_loader, rnn
from okgrad.approximators import make_algo
from okgrad.errors import DivergenceError, ShapeError
from okgrad.models import RunRecord
from okgrad.signs import SignStream

logger = logging.getLogger(__name__)

THREADS = max(1, int(os.getenv("OKGRAD_THREADS", str(os.cpu_count() or 1))))
ALGO_SALT = 11
DATA_SALT = 13
LN2 = np.log(2.0)


@dataclass
class AdamState:
    lr: float
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr):
        names = ("w_g", "w_t", "w_out")
        return cls(
            lr=lr,
            m={k: np.zeros_like(getattr(params, k)) for k in names},
            v={k: np.zeros_like(getattr(params, k)) for k in names},
        )


def adam_update(state, params, grad):
    """One bias-corrected Adam step; mutates ``state`` and returns new params"""
    parts = {"w_g": grad.w_g, "w_t": grad.w_t, "w_out": grad.w_out}
    for name, g in parts.items():
        if g.shape != getattr(params, name).shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {getattr(params, name).shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"gradient for {name} contains NaN or Inf")

    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    new = {}
    for name, g in parts.items():
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        new[name] = getattr(params, name) - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return rnn.RhnParams(**new)


@dataclass(frozen=True)
class CopyCurriculum:
    t_max: int = 1
    error_ema: float = 1.0
    threshold: float = 0.15
    decay: float = 0.99


def curriculum_step(cur, step_bpc):
    """Fold one finished sequence's bits/char into the EMA; grow t_max on crossing"""
    if step_bpc < 0:
        raise ShapeError(f"bits per char must be non-negative, got {step_bpc}")
    ema = cur.decay * cur.error_ema + (1.0 - cur.decay) * step_bpc
    if ema < cur.threshold:
        logger.info(f"Curriculum: error EMA {ema:.4f} < {cur.threshold}, t_max {cur.t_max} -> {cur.t_max + 1}")
        return replace(cur, t_max=cur.t_max + 1, error_ema=1.0)
    return replace(cur, error_ema=ema)


class LaneOutput(NamedTuple):
    loss: Optional[float]          # nats, None when the position is not scored
    recurrent: Optional[np.ndarray]
    w_out_grad: np.ndarray


class Lane:
    """Hidden state, gradient algorithm and task cursor of one batch element"""

    def __init__(self, index, algo, n, data_rng):
        self.index = index
        self.algo = algo
        self.h = np.zeros(n)
        self.data_rng = data_rng
        self.sample = None
        self.pos = 0
        self.seq_nats = 0.0
        self.seq_count = 0

    def compute(self, params, x, y, active, reset):
        if reset:
            self.h = np.zeros_like(self.h)
            self.algo.reset()
        step = rnn.forward(params, self.h, x)
        self.algo.advance(step, params)
        if active:
            head = rnn.head_loss(params, step.h_next, y)
            loss, dl_dh, w_out_grad = head.loss, head.dl_dh, head.w_out_grad
        else:
            loss, dl_dh, w_out_grad = None, np.zeros_like(self.h), np.zeros_like(params.w_out)
        recurrent = self.algo.estimate(dl_dh)
        self.h = step.h_next
        return LaneOutput(loss, recurrent, w_out_grad)


class RecordWriter:
    """Appends RunRecords to a CSV file; the first flush writes the header"""

    def __init__(self, path):
        self.path = Path(path)
        self.started = False

    def flush(self, records):
        if not records:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        df = pd.DataFrame([r.model_dump() for r in records])
        df.to_csv(self.path, mode="a" if self.started else "w", header=not self.started,
                  index=False, float_format="%.17g")
        self.started = True
        logger.debug(f"Wrote {len(df)} records to {self.path}")

    def close(self):
        """Write the header alone when no interval completed"""
        if self.started:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(columns=list(RunRecord.model_fields)).to_csv(self.path, index=False)
        self.started = True


@dataclass
class TrainSummary:
    params: rnn.RhnParams
    records: List[RunRecord]
    steps_done: int = 0
    updates_done: int = 0
    t_max: Optional[int] = None
    baseline_bpc: Optional[float] = None
    diverged: bool = False
    checkpoint: Optional[str] = None


class Trainer:
    def __init__(self, config, corpus=None, valid_corpus=None):
        self.config = config
        self.curriculum = None
        self.baseline_bpc = None
        self.valid_ids = None

        if config.task == "copy":
            n_in = len(data_loader.COPY_ALPHABET)
            self.curriculum = CopyCurriculum(t_max=config.t_max_start)
            self.stream = None
        else:
            if corpus is None:
                corpus = data_loader.load_corpus(config.data)
            self.vocab = data_loader.CharVocab.from_text(corpus)
            ids = self.vocab.encode(corpus)
            n_in = len(self.vocab)
            self.baseline_bpc = data_loader.unigram_entropy_bpc(ids)
            logger.info(f"Vocabulary of {n_in} characters, unigram baseline {self.baseline_bpc:.4f} bpc")
            self.stream = data_loader.lm_stream(ids, config.batch, config.reset_prob, config.seed)
            if config.valid and valid_corpus is None:
                valid_corpus = data_loader.load_corpus(config.valid)
            if valid_corpus is not None:
                self.valid_ids = self.vocab.encode(valid_corpus)
                if len(self.valid_ids) < 2:
                    raise ShapeError("validation corpus needs at least two characters")
                self.valid_pos = 0
                self.valid_h = np.zeros(config.units)

        self.params = rnn.RhnParams.init(config.units, n_in, n_in, config.seed)
        self.adam = AdamState.for_params(self.params, config.lr)
        self.lanes = [
            Lane(
                b,
                make_algo(config.algo, self.params.n, self.params.p, SignStream(config.seed, b, ALGO_SALT)),
                config.units,
                SignStream(config.seed, b, DATA_SALT),
            )
            for b in range(config.batch)
        ]
        self.online = self.lanes[0].algo.online
        self.updates_done = 0
        self.w_out_window = np.zeros_like(self.params.w_out)
        self.recurrent_window = None

    def _copy_inputs(self):
        batch = []
        for lane in self.lanes:
            reset = False
            if lane.sample is None or lane.pos >= len(lane.sample.inputs):
                reset = lane.sample is not None
                lane.sample = data_loader.copy_sample(self.curriculum.t_max, lane.data_rng)
                lane.pos = 0
                lane.seq_nats, lane.seq_count = 0.0, 0
            s = lane.sample
            batch.append((s.inputs[lane.pos], s.targets[lane.pos], s.mask[lane.pos], reset))
        return batch

    def _lm_inputs(self):
        nxt = next(self.stream)
        return [(int(x), int(y), True, bool(r)) for x, y, r in zip(nxt.inputs, nxt.targets, nxt.resets)]

    def _after_copy_step(self, outputs):
        for lane, out in zip(self.lanes, outputs):
            if out.loss is not None:
                lane.seq_nats += out.loss
                lane.seq_count += 1
            lane.pos += 1
            if lane.pos >= len(lane.sample.inputs):
                bpc = lane.seq_nats / lane.seq_count / LN2
                self.curriculum = curriculum_step(self.curriculum, bpc)

    def _apply(self, outputs):
        batch = len(outputs)
        w_out_grad = sum(o.w_out_grad for o in outputs)
        pending = [o.recurrent is None for o in outputs]
        if any(pending) and not all(pending):
            raise ShapeError("lanes disagree on whether a recurrent gradient is ready")
        if self.online:
            recurrent = sum(o.recurrent for o in outputs)
            grad = rnn.ParamGrad(recurrent / batch, w_out_grad / batch)
        else:
            self.w_out_window += w_out_grad
            if all(pending):
                return
            recurrent = sum(o.recurrent for o in outputs)
            grad = rnn.ParamGrad(recurrent / batch, self.w_out_window / batch)
            self.w_out_window = np.zeros_like(self.w_out_window)
        self.params = adam_update(self.adam, self.params, grad)
        self.updates_done += 1

    def _validate(self, count):
        """Score ``count`` validation characters, carrying the hidden state between calls"""
        nats = 0.0
        pairs = len(self.valid_ids) - 1
        for _ in range(count):
            x = self.valid_ids[self.valid_pos]
            y = self.valid_ids[self.valid_pos + 1]
            step = rnn.forward(self.params, self.valid_h, x)
            nats += rnn.head_loss(self.params, step.h_next, y).loss
            self.valid_h = step.h_next
            self.valid_pos = (self.valid_pos + 1) % pairs
            if self.valid_pos == 0:
                # a new pass carries no context from the end of the text
                self.valid_h = np.zeros_like(self.valid_h)
        return nats / count / LN2

    def run(self):
        cfg = self.config
        writer = RecordWriter(cfg.out)
        records, pending = [], []
        interval_nats, interval_count = 0.0, 0
        start = time.perf_counter()
        summary = TrainSummary(params=self.params, records=records, baseline_bpc=self.baseline_bpc)
        logger.info(f"Training {cfg.task} with {cfg.algo}: n={cfg.units}, batch={cfg.batch}, "
                    f"lr={cfg.lr}, steps={cfg.steps}, threads={min(THREADS, cfg.batch)}")

        with ThreadPoolExecutor(max_workers=min(THREADS, cfg.batch)) as pool:
            try:
                for step in range(1, cfg.steps + 1):
                    inputs = self._copy_inputs() if cfg.task == "copy" else self._lm_inputs()
                    params = self.params
                    outputs = list(pool.map(
                        lambda lane, item: lane.compute(params, *item), self.lanes, inputs
                    ))
                    for out in outputs:
                        if out.loss is not None:
                            interval_nats += out.loss
                            interval_count += 1
                    if cfg.task == "copy":
                        self._after_copy_step(outputs)
                    self._apply(outputs)
                    summary.steps_done = step

                    if step % cfg.eval_every == 0:
                        wall = 0.0 if cfg.no_wallclock else time.perf_counter() - start
                        bpc = interval_nats / interval_count / LN2 if interval_count else float("nan")
                        t_max = self.curriculum.t_max if self.curriculum else None
                        rec = RunRecord(step=step, loss_bpc=bpc, t_max=t_max,
                                        wallclock_s=wall, updates_done=self.updates_done)
                        pending.append(rec)
                        if self.valid_ids is not None:
                            pending.append(RunRecord(step=step, split="valid",
                                                     loss_bpc=self._validate(cfg.eval_every),
                                                     wallclock_s=wall, updates_done=self.updates_done))
                        logger.info(f"step {step}: {bpc:.4f} bpc, t_max={t_max}, "
                                    f"updates={self.updates_done}, wall={wall:.1f}s")
                        records.extend(pending)
                        writer.flush(pending)
                        pending = []
                        interval_nats, interval_count = 0.0, 0
            except DivergenceError as e:
                logger.error(f"Diverged at step {summary.steps_done + 1}: {e}")
                records.extend(pending)
                writer.flush(pending)
                summary.diverged = True

        writer.close()
        summary.params = self.params
        summary.updates_done = self.updates_done
        summary.t_max = self.curriculum.t_max if self.curriculum else None
        if not summary.diverged:
            path = cfg.checkpoint or str(Path(cfg.out).with_suffix(".ckpt"))
            rnn.save_checkpoint(path, self.params, cfg.seed)
            summary.checkpoint = path
        return summary


def train_loop(config, corpus=None, valid_corpus=None):
    return Trainer(config, corpus=corpus, valid_corpus=valid_corpus).run()
