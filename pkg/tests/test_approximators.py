#!/usr/bin/env python3
"""
Unit tests for the online gradient algorithms
Tests parsing, exactness, state sizes and unbiasedness by exhaustive sign enumeration
"""

import os
import sys
import unittest

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from okgrad import approximators, kronsum, rnn
from okgrad.approximators import AlgoSpec, make_algo, parse_algo
from okgrad.errors import ShapeError
from okgrad.signs import CountingSigns, ScriptedSigns, SignStream, count_signs, sign_patterns

N, N_IN, V = 4, 3, 3
P = N + N_IN + 1
SLOW = bool(os.getenv("OKGRAD_SLOW"))


def make_params(seed=0):
    return rnn.RhnParams.init(N, N_IN, V, seed=seed)


def trajectory(params, length, seed=1):
    xs = np.random.default_rng(seed).integers(0, N_IN, size=length)
    h = np.full(N, 0.1)
    steps = []
    for x in xs:
        step = rnn.forward(params, h, x)
        steps.append(step)
        h = step.h_next
    return steps


def state_dense(algo):
    if isinstance(algo, approximators.Uoro):
        return np.outer(algo.u, algo.v.ravel())
    if isinstance(algo, approximators.ExactRtrl):
        return algo.state.g_mat
    return kronsum.dense(algo.state)


def exact_dense(params, steps):
    algo = make_algo('exact', N, P, SignStream(0))
    for step in steps:
        algo.advance(step, params)
    return algo.state.g_mat


def run(spec, params, steps, rng):
    algo = make_algo(spec, N, P, SignStream(0))
    algo.rng = rng
    for step in steps:
        algo.advance(step, params)
    return algo


def enumerate_states(spec, params, steps):
    count = count_signs(lambda rng: run(spec, params, steps, rng))
    return [state_dense(run(spec, params, steps, ScriptedSigns(p))) for p in sign_patterns(count)]


class TestParseAlgo(unittest.TestCase):
    def test_valid_strings(self):
        """Test every algorithm family parses"""
        self.assertEqual(parse_algo('exact'), AlgoSpec('exact'))
        self.assertEqual(parse_algo('uoro'), AlgoSpec('uoro'))
        self.assertEqual(parse_algo('kf'), AlgoSpec('kf'))
        self.assertEqual(parse_algo('ok:4'), AlgoSpec('ok', 4))
        self.assertEqual(parse_algo('tbptt:25'), AlgoSpec('tbptt', 25))
        self.assertEqual(parse_algo(' KTP:2 '), AlgoSpec('ktp', 2))
        self.assertEqual(str(AlgoSpec('bok', 8)), 'bok:8')

    def test_invalid_strings(self):
        """Test malformed algorithm strings raise ShapeError"""
        for text in ['ok', 'ok:0', 'exact:2', 'rtrl', 'ok:-1', 'ok:two', '']:
            with self.assertRaises(ShapeError, msg=text):
                parse_algo(text)

    def test_make_algo_types(self):
        """Test make_algo builds the right class with its rank"""
        algo = make_algo('kfavg:3', N, P, SignStream(0))

        self.assertIsInstance(algo, approximators.KfAvg)
        self.assertEqual(algo.rank, 3)
        self.assertEqual(len(algo.state), 3)


class TestExactAndTbptt(unittest.TestCase):
    def test_exact_matches_tbptt(self):
        """Test summed RTRL estimates equal one full-window TBPTT gradient"""
        params = make_params()
        steps = trajectory(params, 8)
        targets = np.random.default_rng(2).integers(0, V, size=8)
        exact = make_algo('exact', N, P, SignStream(0))
        tbptt = make_algo('tbptt:8', N, P, SignStream(0))
        total = np.zeros((P, 2 * N))
        outputs = []
        for step, y in zip(steps, targets):
            dl_dh = rnn.head_loss(params, step.h_next, y).dl_dh
            exact.advance(step, params)
            total += exact.estimate(dl_dh)
            tbptt.advance(step, params)
            outputs.append(tbptt.estimate(dl_dh))

        self.assertTrue(all(o is None for o in outputs[:-1]))
        self.assertTrue(np.allclose(outputs[-1], total, atol=1e-10))
        xs = [int(np.argmax(s.h_hat[0, N:P - 1])) for s in steps]
        _, grad, _ = rnn.tbptt_gradient(params, xs, steps[0].h_prev, targets)
        self.assertTrue(np.allclose(grad.recurrent, total, atol=1e-10))

    def test_tbptt_reset_is_cut(self):
        """Test reset inside a window stops backpropagation at that step"""
        params = make_params(1)
        steps = trajectory(params, 4)
        dl_dhs = [np.ones(N) * (k + 1) for k in range(4)]
        algo = make_algo('tbptt:4', N, P, SignStream(0))
        out = None
        for k, (step, dl_dh) in enumerate(zip(steps, dl_dhs)):
            if k == 2:
                algo.reset()
            algo.advance(step, params)
            out = algo.estimate(dl_dh)

        expected = rnn.backprop_window(steps, dl_dhs, params, cuts={2})
        self.assertTrue(np.allclose(out, expected))
        self.assertFalse(np.allclose(out, rnn.backprop_window(steps, dl_dhs, params)))

    def test_tbptt_starts_new_window(self):
        """Test the window empties after each gradient"""
        params = make_params()
        algo = make_algo('tbptt:2', N, P, SignStream(0))
        results = []
        for step in trajectory(params, 4):
            algo.advance(step, params)
            results.append(algo.estimate(np.ones(N)))

        self.assertEqual([r is None for r in results], [True, False, True, False])
        self.assertEqual(algo.steps, [])

    def test_exact_reset(self):
        """Test reset zeroes the exact state"""
        params = make_params()
        algo = make_algo('exact', N, P, SignStream(0))
        algo.advance(trajectory(params, 1)[0], params)
        algo.reset()

        self.assertFalse(algo.state.g_mat.any())

    def test_wrong_network(self):
        """Test advancing with mismatched params raises ShapeError"""
        algo = make_algo('ok:2', N, P, SignStream(0))
        other = rnn.RhnParams.init(N + 1, N_IN, V, seed=0)
        with self.assertRaises(ShapeError):
            algo.advance(trajectory(make_params(), 1)[0], other)


class TestCommonBehaviour(unittest.TestCase):
    ONLINE = ['exact', 'uoro', 'kf', 'kfavg:2', 'ok:2', 'bok:2', 'kfapprox:2', 'ktp:2']

    def test_zero_loss_gradient(self):
        """Test dl_dh = 0 gives a zero estimate for every online algorithm"""
        params = make_params()
        steps = trajectory(params, 5)
        for spec in self.ONLINE:
            algo = make_algo(spec, N, P, SignStream(3, lane=1))
            for step in steps:
                algo.advance(step, params)
            est = algo.estimate(np.zeros(N))
            self.assertEqual(est.shape, (P, 2 * N), msg=spec)
            self.assertFalse(est.any(), msg=spec)

    def test_reset_zeroes_state(self):
        """Test reset gives a zero estimate for any dl_dh"""
        params = make_params()
        steps = trajectory(params, 3)
        for spec in self.ONLINE:
            algo = make_algo(spec, N, P, SignStream(4))
            for step in steps:
                algo.advance(step, params)
            algo.reset()
            self.assertFalse(algo.estimate(np.ones(N)).any(), msg=spec)

    def test_seeded_runs_repeat(self):
        """Test two runs from the same stream key produce identical states"""
        params = make_params()
        steps = trajectory(params, 6)
        for spec in ['uoro', 'kf', 'ok:2', 'ktp:2']:
            a = run(spec, params, steps, SignStream(5, lane=2, salt=11))
            b = run(spec, params, steps, SignStream(5, lane=2, salt=11))
            self.assertTrue(np.array_equal(state_dense(a), state_dense(b)), msg=spec)


class TestStateBytes(unittest.TestCase):
    def test_kronecker_state(self):
        """Test r-OK stores r (p + 2n^2) floats"""
        for r in [1, 2, 4]:
            algo = make_algo(f'ok:{r}', N, P, SignStream(0))
            self.assertEqual(algo.state_bytes, r * (P + 2 * N * N) * 8)

    def test_ktp_state(self):
        """Test r-KTP stores r (p + 3n) floats"""
        algo = make_algo('ktp:3', N, P, SignStream(0))
        self.assertEqual(algo.state_bytes, 3 * (P + 3 * N) * 8)

    def test_doubling_rank_doubles_memory(self):
        """Test state size is linear in r"""
        for name in ['ok', 'kfavg', 'ktp']:
            small = make_algo(f'{name}:2', N, P, SignStream(0)).state_bytes
            large = make_algo(f'{name}:4', N, P, SignStream(0)).state_bytes
            self.assertEqual(large, 2 * small, msg=name)

    def test_exact_and_uoro(self):
        """Test exact stores n * p * 2n floats and UORO n + 2pn"""
        self.assertEqual(make_algo('exact', N, P, SignStream(0)).state_bytes, N * P * 2 * N * 8)
        self.assertEqual(make_algo('uoro', N, P, SignStream(0)).state_bytes, (N + 2 * P * N) * 8)


class TestOkExactness(unittest.TestCase):
    def test_first_steps_exact(self):
        """Test r-OK reproduces exact RTRL for the first r steps without drawing signs"""
        params = make_params(2)
        steps = trajectory(params, 3)
        counter = CountingSigns()
        algo = run('ok:3', params, steps, counter)

        self.assertEqual(counter.count, 0)
        self.assertTrue(np.allclose(state_dense(algo), exact_dense(params, steps), atol=1e-10))

    def test_rank_one_first_step(self):
        """Test 1-OK equals F exactly after one step"""
        params = make_params(3)
        steps = trajectory(params, 1)
        counter = CountingSigns()
        algo = run('ok:1', params, steps, counter)
        f = rnn.immediate_factor(steps[0], params)

        self.assertEqual(counter.count, 0)
        self.assertTrue(np.allclose(state_dense(algo), f.dense(), atol=1e-12))

    def test_shared_left_factor_is_noiseless(self):
        """Test 1-OK draws no signs when the stored u equals the next h_hat"""
        params = make_params(4)
        step = trajectory(params, 1)[0]
        big = np.random.default_rng(5).normal(size=(N, 2 * N))
        counter = CountingSigns()
        algo = make_algo('ok:1', N, P, counter)
        algo.state = kronsum.KroneckerSum(algo.fmt, [(step.h_hat.copy(), big)])
        algo.advance(step, params)

        f = rnn.immediate_factor(step, params)
        h_jac = rnn.jacobian_h(step, params)
        expected = np.kron(step.h_hat, h_jac @ big + f.d_block)
        self.assertEqual(counter.count, 0)
        self.assertEqual(len(algo.state), 1)
        self.assertTrue(np.allclose(state_dense(algo), expected, atol=1e-10))

    def test_biased_is_deterministic(self):
        """Test B-OK never draws signs"""
        params = make_params()
        counter = CountingSigns()
        run('bok:2', params, trajectory(params, 6), counter)

        self.assertEqual(counter.count, 0)


class TestUnbiasedness(unittest.TestCase):
    def assert_unbiased(self, spec, length, seed=0):
        params = make_params(seed)
        steps = trajectory(params, length, seed=seed + 1)
        outcomes = enumerate_states(spec, params, steps)
        mean = np.mean(outcomes, axis=0)
        exact = exact_dense(params, steps)

        self.assertGreater(len(outcomes), 1, msg=spec)
        self.assertTrue(np.allclose(mean, exact, atol=1e-10), msg=spec)
        return outcomes

    def test_ok_stochastic_step(self):
        """Test 2-OK is unbiased at the first step that needs compression"""
        outcomes = self.assert_unbiased('ok:2', 3)
        self.assertGreater(np.std([np.sum(o) for o in outcomes]), 0.0)

    def test_uoro(self):
        """Test UORO is unbiased after two steps"""
        self.assert_unbiased('uoro', 2)

    def test_kf(self):
        """Test KF-RTRL is unbiased after two steps"""
        self.assert_unbiased('kf', 2)

    def test_kfavg(self):
        """Test 2-KF-AVG is unbiased after two steps"""
        self.assert_unbiased('kfavg:2', 2)

    def test_ktp(self):
        """Test 2-KTP is unbiased after one step"""
        self.assert_unbiased('ktp:2', 1)

    def test_kfapprox(self):
        """Test 1-KF-approx is unbiased after one step"""
        self.assert_unbiased('kfapprox:1', 1)


def estimate_errors(spec, params, steps, dl_dh, exact, reps):
    """Squared errors of the recurrent-gradient estimate against ``exact`` over seeded runs"""
    n, p = params.n, params.p
    errors = []
    for seed in range(reps):
        algo = make_algo(spec, n, p, SignStream(seed, salt=23))
        for step in steps:
            algo.advance(step, params)
        errors.append(float(np.sum((algo.estimate(dl_dh) - exact) ** 2)))
    return np.array(errors)


def frozen_rollout(n, n_in, length, seed):
    params = rnn.RhnParams.init(n, n_in, n_in, seed=seed)
    xs = np.random.default_rng(seed + 1).integers(0, n_in, size=length)
    h = np.zeros(n)
    steps = []
    for x in xs:
        step = rnn.forward(params, h, x)
        steps.append(step)
        h = step.h_next
    exact = make_algo('exact', n, params.p, SignStream(0))
    for step in steps:
        exact.advance(step, params)
    dl_dh = np.random.default_rng(seed + 2).normal(size=n)
    return params, steps, dl_dh, exact.estimate(dl_dh)


class TestStability(unittest.TestCase):
    def test_long_rollout_stays_finite(self):
        """Test every online algorithm keeps a finite state and estimate over 300 steps"""
        params = make_params(6)
        steps = trajectory(params, 300, seed=7)
        dl_dh = np.ones(N)
        for spec in ['exact', 'uoro', 'kf', 'kfavg:2', 'ok:1', 'ok:2', 'bok:2', 'kfapprox:2', 'ktp:2']:
            algo = make_algo(spec, N, P, SignStream(8))
            for step in steps:
                algo.advance(step, params)
                self.assertTrue(np.all(np.isfinite(state_dense(algo))), msg=spec)
            self.assertTrue(np.all(np.isfinite(algo.estimate(dl_dh))), msg=spec)


class TestNoiseOrdering(unittest.TestCase):
    def assert_ok_quieter(self, n, n_in, length, reps, ranks):
        params, steps, dl_dh, exact = frozen_rollout(n, n_in, length, seed=0)
        for r in ranks:
            ok = estimate_errors(f'ok:{r}', params, steps, dl_dh, exact, reps).mean()
            avg = estimate_errors(f'kfavg:{r}', params, steps, dl_dh, exact, reps).mean()
            self.assertLessEqual(ok, avg, msg=f"rank {r}: ok {ok:.3g} vs kfavg {avg:.3g}")

    def test_ok_below_kfavg(self):
        """Test r-OK has lower gradient error than r-KF-AVG on a frozen network"""
        self.assert_ok_quieter(N, N_IN, 10, 200, [1, 2, 4])

    @unittest.skipUnless(SLOW, "set OKGRAD_SLOW to run the full-size noise comparison")
    def test_ok_below_kfavg_full_size(self):
        """Test the ordering holds at n=8 over 20 steps and 400 seeds"""
        self.assert_ok_quieter(8, 5, 20, 400, [1, 2, 4])


class TestBlockDiagLowrank(unittest.TestCase):
    def test_unbiased_and_low_rank(self):
        """Test E[b c] = (diag(d1) | diag(d2)) with rank at most r"""
        rng = np.random.default_rng(6)
        d1, d2 = rng.normal(size=4), rng.normal(size=4)
        d2[1] = 0.0
        block = np.hstack([np.diag(d1), np.diag(d2)])
        sampler = lambda s: approximators.block_diag_lowrank(d1, d2, 2, s)
        outs = []
        for pattern in sign_patterns(count_signs(sampler)):
            b, c = sampler(ScriptedSigns(pattern))
            self.assertEqual(b.shape, (4, 2))
            self.assertEqual(c.shape, (2, 8))
            self.assertLessEqual(np.linalg.matrix_rank(b @ c, tol=1e-9), 2)
            outs.append(b @ c)

        self.assertTrue(np.allclose(np.mean(outs, axis=0), block, atol=1e-10))

    def test_zero_rows(self):
        """Test all-zero diagonals give zero factors"""
        b, c = approximators.block_diag_lowrank(np.zeros(3), np.zeros(3), 1, SignStream(0))

        self.assertFalse((b @ c).any())

    def test_mismatched(self):
        """Test diagonals of different length raise ShapeError"""
        with self.assertRaises(ShapeError):
            approximators.block_diag_lowrank(np.ones(3), np.ones(2), 1, SignStream(0))


if __name__ == '__main__':
    unittest.main()
