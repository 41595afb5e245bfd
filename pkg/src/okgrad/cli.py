"""
Command-line entry point

    okgrad train {copy,lm} ...   train an RHN, write RunRecord CSV and a checkpoint
    okgrad noise ...             cosine of approximate vs exact gradients on a frozen net
    okgrad oracle <case> ...     exhaustive enumeration checks of the samplers
    okgrad bench ...             per-lane state size and step time per algorithm

Exit codes: 0 success, 1 data/IO/divergence/oracle failure, 2 usage error.

CSV schemas:
    train      step,split,loss_bpc,t_max,wallclock_s,updates_done
    noise      rep_<i>.csv: step,cosine,true_norm,approx_norm,filtered
               aggregate.csv: step,mean_cosine,std_cosine,count
    bench      algo,rank,n,state_bytes,step_seconds
"""

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import ValidationError

from okgrad import analysis, data_loader, kronsum, lowrank, rnn, smalllin
from okgrad.approximators import make_algo, parse_algo
from okgrad.errors import (DenseCapError, DivergenceError, EnumerationError,
                           OkGradError, ShapeError, VocabError)
from okgrad.kronsum import KronFormat, KroneckerSum, TripleSum
from okgrad.models import LR_GRID, BenchRecord, NoiseConfig, RunConfig
from okgrad.signs import SignStream
from okgrad.train import Trainer

LOG_LEVEL = os.getenv("OKGRAD_LOG_LEVEL", "INFO").upper()
ORACLE_TOL = 1e-9

logger = logging.getLogger("okgrad")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")


def _ints(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def _banner(title):
    logger.info("=" * 60)
    logger.info(title)
    logger.info("=" * 60)


# ---------- train ----------

def train_config(args):
    return RunConfig(
        task=args.task, algo=args.algo, units=args.units, batch=args.batch, lr=args.lr,
        lr_index=args.lr_index, steps=args.steps, seed=args.seed, data=args.data,
        valid=args.valid, out=args.out, checkpoint=args.checkpoint, eval_every=args.eval_every,
        reset_prob=args.reset_prob, t_max_start=args.t_max_start, no_wallclock=args.no_wallclock,
    )


def cmd_train(args):
    try:
        config = train_config(args)
    except ValidationError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE

    _banner(f"train {config.task} / {config.algo}")
    try:
        trainer = Trainer(config)
    except (OSError, UnicodeDecodeError, VocabError, ShapeError) as e:
        logger.error(f"Cannot load training data: {e}")
        return EXIT_FAIL
    try:
        summary = trainer.run()
    except (OSError, OkGradError) as e:
        logger.error(f"Training failed: {e}")
        return EXIT_FAIL

    if summary.diverged:
        logger.error(f"Run diverged after {summary.steps_done} steps; partial records kept in {config.out}")
        return EXIT_FAIL
    if summary.baseline_bpc is not None:
        logger.info(f"Unigram baseline: {summary.baseline_bpc:.4f} bpc")
    logger.info(f"Done: {summary.steps_done} steps, {summary.updates_done} updates, "
                f"t_max={summary.t_max}, checkpoint {summary.checkpoint}")
    return EXIT_OK


# ---------- noise ----------

def cmd_noise(args):
    try:
        config = NoiseConfig(
            checkpoint=args.checkpoint, algo=args.algo, steps=args.steps,
            repetitions=args.repetitions, seed=args.seed, out=args.out, data=args.data,
            filter_threshold=args.filter_threshold,
        )
    except ValidationError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE

    _banner(f"noise {config.algo}: {config.repetitions} x {config.steps} steps")
    try:
        params, header = rnn.load_checkpoint(config.checkpoint)
        corpus_ids = None
        if config.data:
            text = data_loader.load_corpus(config.data)
            vocab = data_loader.CharVocab.from_text(text)
            if len(vocab) != params.n_in:
                raise ShapeError(f"corpus has {len(vocab)} characters, checkpoint expects {params.n_in}")
            corpus_ids = vocab.encode(text)
    except (OSError, UnicodeDecodeError, OkGradError) as e:
        logger.error(f"Cannot load inputs: {e}")
        return EXIT_FAIL

    out_dir = Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = []
    try:
        for rep in range(config.repetitions):
            if corpus_ids is None:
                ids = data_loader.random_text_ids(config.steps + 1, params.n_in, config.seed, salt=rep)
            else:
                start = int(SignStream(config.seed, rep).integers(0, len(corpus_ids)))
                ids = np.roll(corpus_ids, -start)
            records = analysis.noise_protocol(
                params, config.algo, config.steps, ids, seed=config.seed, repetition=rep,
                filter_threshold=config.filter_threshold,
            )
            frame = analysis.records_frame(records)
            frame.to_csv(out_dir / f"rep_{rep}.csv", index=False, float_format="%.17g")
            frames.append(frame)
    except DenseCapError as e:
        logger.error(f"Exact RTRL oracle needs {e.requested} bytes, cap is {e.cap} (OKGRAD_ORACLE_MEM_MB)")
        return EXIT_FAIL
    except (DivergenceError, ShapeError) as e:
        logger.error(f"Noise measurement failed: {e}")
        return EXIT_FAIL

    agg = analysis.aggregate_cosines(frames)
    agg.to_csv(out_dir / "aggregate.csv", index=False, float_format="%.17g")
    if not agg.empty:
        logger.info(f"Mean cosine over all steps: {agg['mean_cosine'].mean():.4f}")
    return EXIT_OK


# ---------- oracle ----------

def _report(lines, checks):
    for line in lines:
        print(line)
    failed = [name for name, ok in checks if not ok]
    print("PASS" if not failed else f"FAIL {failed[0]}")
    return EXIT_OK if not failed else EXIT_FAIL


def _fmt(x):
    return np.array2string(np.asarray(x), precision=6, suppress_small=True, max_line_width=120)


def _close(a, b, tol=ORACLE_TOL):
    return abs(a - b) <= tol * max(1.0, abs(b))


def _moments(target, sampler):
    return analysis.estimator_moments(target, sampler, allow_fallback=False)


def _oracle_opt_diag(args):
    d = np.asarray(args.d, dtype=float)
    target = np.diag(d)
    m = _moments(target, lambda rng: lowrank.sample_opt_diag(d, args.rank, rng).product())
    bound = lowrank.split_index(d, args.rank).variance_bound
    return _report(
        [f"target: {_fmt(d)}", f"mean: {_fmt(np.diag(m.mean))}",
         f"variance: {m.variance:.12g}", f"bound: {bound:.12g}"],
        [("mean_error", m.mean_error <= ORACLE_TOL), ("variance", _close(m.variance, bound))],
    )


def _random_matrix(rng, dims):
    return rng.normal(1.0, tuple(dims))


def _oracle_opt(args):
    rng = SignStream(args.seed)
    c = _random_matrix(rng, args.dims)
    m = _moments(c, lambda s: lowrank.opt(c, args.rank, s).product())
    bound = lowrank.split_index(smalllin.svd(c).d, args.rank).variance_bound
    return _report(
        [f"target: {_fmt(c)}", f"mean: {_fmt(m.mean)}",
         f"variance: {m.variance:.12g}", f"bound: {bound:.12g}"],
        [("mean_error", m.mean_error <= ORACLE_TOL), ("variance", _close(m.variance, bound))],
    )


def _unit(v):
    return v / np.linalg.norm(v)


def _kron_moments(g, compress, r):
    target = kronsum.dense(g)
    return _moments(target, lambda rng: kronsum.dense(compress(g, r, rng)))


def _ok(g, r, rng):
    return kronsum.ok_compress(g, r, rng)


def _case_instances(seed):
    rng = SignStream(seed)
    u = _unit(rng.normal(1.0, (1, 3)))
    a_mat = _unit(rng.normal(1.0, (2, 2)))
    d_mat = _unit(rng.normal(1.0, (2, 2)))
    return rng, u, a_mat, d_mat


def _oracle_ok_case1(args):
    _, u, a_mat, d_mat = _case_instances(args.seed)
    g = KroneckerSum(KronFormat(1, 3, 2, 2), [(u, a_mat), (u, d_mat)])
    ok = _kron_moments(g, _ok, 1)
    kf = _kron_moments(g, kronsum.kfavg_compress, 1)
    expected = float(np.sum((a_mat + d_mat) ** 2))
    return _report(
        [f"ok variance: {ok.variance:.12g}", f"sign trick variance: {kf.variance:.12g}",
         f"|A+D|^2: {expected:.12g}"],
        [("ok_mean", ok.mean_error <= ORACLE_TOL), ("kf_mean", kf.mean_error <= ORACLE_TOL),
         ("ok_variance", abs(ok.variance) <= ORACLE_TOL), ("kf_variance", _close(kf.variance, expected))],
    )


def _orthogonal_pair(rng, shape):
    a = rng.normal(1.0, shape).ravel()
    b = rng.normal(1.0, shape).ravel()
    b = b - (a @ b) / (a @ a) * a
    return _unit(a).reshape(shape), _unit(b).reshape(shape)


def _oracle_ok_case2(args):
    rng = SignStream(args.seed)
    u, h = _orthogonal_pair(rng, (1, 3))
    a_mat, d_mat = _orthogonal_pair(rng, (2, 2))
    g = KroneckerSum(KronFormat(1, 3, 2, 2), [(u, a_mat), (h, d_mat)])
    ok = _kron_moments(g, _ok, 1)
    kf = _kron_moments(g, kronsum.kfavg_compress, 1)
    return _report(
        [f"ok variance: {ok.variance:.12g}", f"sign trick variance: {kf.variance:.12g}"],
        [("ok_mean", ok.mean_error <= ORACLE_TOL), ("kf_mean", kf.mean_error <= ORACLE_TOL),
         ("equal_variance", _close(ok.variance, kf.variance))],
    )


def _oracle_ok_dominance(args):
    rng = SignStream(args.seed)
    r = args.rank
    worst = -np.inf
    lines = []
    for i in range(args.instances):
        g = KroneckerSum(KronFormat(1, 3, 2, 2),
                         [(rng.normal(1.0, (1, 3)), rng.normal(1.0, (2, 2))) for _ in range(r + 1)])
        ok = _kron_moments(g, _ok, r)
        kf = _kron_moments(g, kronsum.kfavg_compress, r)
        if ok.mean_error > ORACLE_TOL or kf.mean_error > ORACLE_TOL:
            return _report(lines, [(f"mean_instance_{i}", False)])
        worst = max(worst, ok.variance - kf.variance)
    lines.append(f"instances: {args.instances}, rank: {r}")
    lines.append(f"max(ok variance - averaged sign trick variance): {worst:.12g}")
    return _report(lines, [("dominance", worst <= ORACLE_TOL)])


def _oracle_sign_trick(args):
    rng = SignStream(args.seed)
    t1 = (rng.normal(1.0, (1, 3)), rng.normal(1.0, (2, 2)))
    t2 = (rng.normal(1.0, (1, 3)), rng.normal(1.0, (2, 2)))
    target = np.kron(*t1) + np.kron(*t2)
    m = _moments(target, lambda s: np.kron(*kronsum.sign_trick_mix(t1, t2, s)))
    return _report(
        [f"target: {_fmt(target)}", f"mean: {_fmt(m.mean)}", f"variance: {m.variance:.12g}"],
        [("mean_error", m.mean_error <= ORACLE_TOL)],
    )


def _oracle_ktp(args):
    rng = SignStream(args.seed)
    n = 3
    t1 = (rng.normal(1.0, (1, n)), rng.normal(1.0, (n, 1)), rng.normal(1.0, (1, n)))
    d = rng.normal(1.0, (n, 1))
    t2 = (rng.normal(1.0, (1, n)), d, d.T.copy())

    def dense(t):
        return kronsum.dense(TripleSum(n, n, n, [t]))

    target = dense(t1) + dense(t2)
    m = _moments(target, lambda s: dense(kronsum.ktp_mix(t1, t2, s)))
    return _report(
        [f"target: {_fmt(target)}", f"mean: {_fmt(m.mean)}", f"variance: {m.variance:.12g}"],
        [("mean_error", m.mean_error <= ORACLE_TOL)],
    )


def _oracle_rank_sweep(args):
    rng = SignStream(args.seed)
    c = _random_matrix(rng, args.dims)
    ranks = args.ranks or list(range(1, min(c.shape) + 1))
    sweep = analysis.rank_sweep(c, ranks)
    lines = [f"rank {s.rank}: variance {s.variance:.12g}, bound {s.bound:.12g}" for s in sweep]
    variances = [s.variance for s in sweep]
    monotone = all(b <= a + ORACLE_TOL for a, b in zip(variances, variances[1:]))
    identity = all(_close(s.variance, s.bound) for s in sweep)
    return _report(lines, [("monotone", monotone), ("variance", identity)])


ORACLES = {
    "opt-diag": _oracle_opt_diag,
    "opt": _oracle_opt,
    "ok-case1": _oracle_ok_case1,
    "ok-case2": _oracle_ok_case2,
    "ok-dominance": _oracle_ok_dominance,
    "sign-trick": _oracle_sign_trick,
    "ktp": _oracle_ktp,
    "rank-sweep": _oracle_rank_sweep,
}


def cmd_oracle(args):
    _banner(f"oracle {args.case}")
    try:
        return ORACLES[args.case](args)
    except EnumerationError as e:
        print(f"FAIL enumeration_size ({e})")
        return EXIT_FAIL
    except ShapeError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


# ---------- bench ----------

def cmd_bench(args):
    _banner(f"bench {','.join(args.algos)} at n={args.units}")
    try:
        specs = [parse_algo(a) for a in args.algos]
    except ShapeError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE

    params = rnn.RhnParams.init(args.units, args.vocab, args.vocab, args.seed)
    ids = data_loader.random_text_ids(args.steps + 1, args.vocab, args.seed)
    rows = []
    for spec in specs:
        algo = make_algo(spec, params.n, params.p, SignStream(args.seed, 0))
        h = np.zeros(params.n)
        start = time.perf_counter()
        for t in range(args.steps):
            step = rnn.forward(params, h, ids[t])
            algo.advance(step, params)
            algo.estimate(rnn.head_loss(params, step.h_next, ids[t + 1]).dl_dh)
            h = step.h_next
        elapsed = (time.perf_counter() - start) / max(args.steps, 1)
        rec = BenchRecord(algo=str(spec), rank=spec.rank or 0, n=params.n,
                          state_bytes=algo.state_bytes, step_seconds=elapsed)
        logger.info(f"{rec.algo}: {rec.state_bytes} bytes, {rec.step_seconds * 1e3:.3f} ms/step")
        rows.append(rec.model_dump())

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=list(BenchRecord.model_fields)).to_csv(out, index=False, float_format="%.17g")
    return EXIT_OK


# ---------- parser ----------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="okgrad",
        description="Online gradient estimation for recurrent highway networks",
        epilog=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on the copy task or a text corpus")
    p.add_argument("task", choices=["copy", "lm"])
    p.add_argument("--algo", default="ok:4",
                   help="exact | tbptt:<T> | uoro | kf | kfavg:<r> | ok:<r> | bok:<r> | kfapprox:<r> | ktp:<r>")
    p.add_argument("--units", type=int, default=64)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-index", type=int, default=None,
                   help="pick --lr from the grid " + ", ".join(f"{i}={lr:.3g}" for i, lr in enumerate(LR_GRID)))
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", help="training corpus (lm)")
    p.add_argument("--valid", help="validation corpus (lm)")
    p.add_argument("--out", default="run.csv")
    p.add_argument("--checkpoint", help="checkpoint path (default: <out>.ckpt)")
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--reset-prob", type=float, default=0.01)
    p.add_argument("--t-max-start", type=int, default=1)
    p.add_argument("--no-wallclock", action="store_true", help="write 0 in wallclock_s")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("noise", help="gradient cosine against exact RTRL on a frozen checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--algo", default="ok:2")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--repetitions", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="noise")
    p.add_argument("--data", help="corpus to draw inputs from (default: random characters)")
    p.add_argument("--filter-threshold", type=float, default=analysis.FILTER_THRESHOLD)
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("oracle", help="exhaustive unbiasedness and variance checks")
    p.add_argument("case", choices=sorted(ORACLES))
    p.add_argument("--d", type=_floats, default=[1.0, 1.0, 1.0], help="diagonal for opt-diag")
    p.add_argument("--rank", type=int, default=1)
    p.add_argument("--ranks", type=_ints, default=None, help="ranks for rank-sweep")
    p.add_argument("--dims", type=_ints, default=[3, 3])
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("bench", help="state size and step time per algorithm")
    p.add_argument("--algos", type=lambda s: [a for a in s.split(",") if a],
                   default=["ok:1", "ok:2", "ok:4", "ktp:2", "ktp:4"])
    p.add_argument("--units", type=int, default=32)
    p.add_argument("--vocab", type=int, default=16)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="bench.csv")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    logging.basicConfig(level=LOG_LEVEL, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    return args.func(args)
