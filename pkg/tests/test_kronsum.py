#!/usr/bin/env python3
"""
Unit tests for kronsum
Tests dense expansion, OK compression and the sign-trick mixes
"""

import os
import sys
import unittest

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from okgrad import kronsum, lowrank
from okgrad.errors import DenseCapError, ShapeError
from okgrad.kronsum import KronFormat, KroneckerSum, TripleSum
from okgrad.signs import ScriptedSigns, SignStream, count_signs, sign_patterns
from okgrad.smalllin import gram_schmidt

FMT = KronFormat(1, 3, 2, 2)


def enumerate_dense(g, compress, r):
    sampler = lambda rng: kronsum.dense(compress(g, r, rng))
    return [sampler(ScriptedSigns(p)) for p in sign_patterns(count_signs(sampler))]


def variance(target, outcomes):
    return float(np.mean([np.sum((o - target) ** 2) for o in outcomes]))


def random_sum(rng, terms):
    return KroneckerSum(FMT, [(rng.normal(size=(1, 3)), rng.normal(size=(2, 2))) for _ in range(terms)])


def unit(x):
    return x / np.linalg.norm(x)


class TestDense(unittest.TestCase):
    def test_single_term_block(self):
        """Test e1 (x) I2 puts I2 in the first block"""
        g = KroneckerSum(KronFormat(1, 2, 2, 2), [(np.array([[1.0, 0.0]]), np.eye(2))])
        expected = np.hstack([np.eye(2), np.zeros((2, 2))])

        self.assertTrue(np.array_equal(kronsum.dense(g), expected))

    def test_empty_sum(self):
        """Test an empty sum densifies to zeros of the format's shape"""
        out = kronsum.dense(KroneckerSum(FMT, []))

        self.assertEqual(out.shape, (2, 6))
        self.assertFalse(out.any())

    def test_two_terms(self):
        """Test dense equals the explicit sum of Kronecker products"""
        g = random_sum(np.random.default_rng(0), 2)
        expected = np.kron(*g.terms[0]) + np.kron(*g.terms[1])

        self.assertTrue(np.allclose(kronsum.dense(g), expected))

    def test_triple_sum(self):
        """Test a triple product expands as a (x) (b c)"""
        a, b, c = np.array([[1.0, 2.0]]), np.array([[1.0], [-1.0]]), np.array([[0.5, 0.0, 1.0]])
        out = kronsum.dense(TripleSum(2, 2, 3, [(a, b, c)]))

        self.assertEqual(out.shape, (2, 6))
        self.assertTrue(np.allclose(out, np.kron(a, b @ c)))

    def test_cap(self):
        """Test exceeding the entry cap raises DenseCapError"""
        with self.assertRaises(DenseCapError):
            kronsum.dense(KroneckerSum.zeros(FMT, 1), cap=5)

    def test_shape_mismatch(self):
        """Test terms that disagree with the format raise ShapeError"""
        with self.assertRaises(ShapeError):
            KroneckerSum(FMT, [(np.zeros((1, 2)), np.zeros((2, 2)))])


class TestSignTrick(unittest.TestCase):
    def test_enumerated_mean(self):
        """Test averaging both signs recovers u (x) A + h (x) D"""
        rng = np.random.default_rng(1)
        t1 = (rng.normal(size=(1, 3)), rng.normal(size=(2, 2)))
        t2 = (rng.normal(size=(1, 3)), rng.normal(size=(2, 2)))
        outs = [np.kron(*kronsum.sign_trick_mix(t1, t2, ScriptedSigns([c]))) for c in (1.0, -1.0)]

        self.assertTrue(np.allclose(np.mean(outs, axis=0), np.kron(*t1) + np.kron(*t2), atol=1e-12))

    def test_zero_addend(self):
        """Test mixing with a zero term returns u (x) A for both signs"""
        rng = np.random.default_rng(2)
        t1 = (rng.normal(size=(1, 3)), rng.normal(size=(2, 2)))
        t2 = (np.zeros((1, 3)), np.zeros((2, 2)))
        for c in (1.0, -1.0):
            out = kronsum.sign_trick_mix(t1, t2, ScriptedSigns([c]))
            self.assertTrue(np.allclose(np.kron(*out), np.kron(*t1), atol=1e-12))

    def test_same_factor_variance(self):
        """Test u = h with unit factors gives variance |A + D|^2"""
        u = unit(np.array([[1.0, 2.0, 2.0]]))
        a_mat = unit(np.array([[1.0, 0.0], [0.0, 1.0]]))
        d_mat = unit(np.array([[0.0, 1.0], [1.0, 0.0]]))
        target = np.kron(u, a_mat + d_mat)
        outs = [np.kron(*kronsum.sign_trick_mix((u, a_mat), (u, d_mat), ScriptedSigns([c]))) for c in (1.0, -1.0)]

        self.assertAlmostEqual(variance(target, outs), float(np.sum((a_mat + d_mat) ** 2)), places=12)

    def test_shape_mismatch(self):
        """Test incompatible pairs raise ShapeError"""
        with self.assertRaises(ShapeError):
            kronsum.sign_trick_mix((np.ones((1, 3)), np.ones((2, 2))), (np.ones((1, 2)), np.ones((2, 2))), SignStream(0))


class TestKtpMix(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(3)
        self.t1 = (rng.normal(size=(1, 3)), rng.normal(size=(3, 1)), rng.normal(size=(1, 3)))
        d = rng.normal(size=(3, 1))
        self.t2 = (rng.normal(size=(1, 3)), d, d.T.copy())

    def dense(self, *triples):
        return kronsum.dense(TripleSum(3, 3, 3, list(triples)))

    def outcomes(self, t1, t2):
        return [self.dense(kronsum.ktp_mix(t1, t2, ScriptedSigns(p))) for p in sign_patterns(2)]

    def test_four_point_mean(self):
        """Test the four sign pairs average to t1 + t2"""
        mean = np.mean(self.outcomes(self.t1, self.t2), axis=0)

        self.assertTrue(np.allclose(mean, self.dense(self.t1, self.t2), atol=1e-12))

    def test_zero_second_term(self):
        """Test a zero t2 leaves t1 unchanged for every sign pair"""
        zero = tuple(np.zeros_like(x) for x in self.t1)
        for out in self.outcomes(self.t1, zero):
            self.assertTrue(np.allclose(out, self.dense(self.t1), atol=1e-12))

    def test_doubling(self):
        """Test mixing t1 with itself averages to 2 t1"""
        mean = np.mean(self.outcomes(self.t1, self.t1), axis=0)

        self.assertTrue(np.allclose(mean, 2 * self.dense(self.t1), atol=1e-12))

    def test_shape_mismatch(self):
        """Test mismatched triples raise ShapeError"""
        with self.assertRaises(ShapeError):
            kronsum.ktp_mix(self.t1, (np.ones((1, 2)),) + self.t2[1:], SignStream(0))


class TestOkCompress(unittest.TestCase):
    def test_case_same_left_factor(self):
        """Test (u (x) A, u (x) D) compresses deterministically to u (x) (A + D)"""
        rng = np.random.default_rng(4)
        u = unit(rng.normal(size=(1, 3)))
        a_mat, d_mat = unit(rng.normal(size=(2, 2))), unit(rng.normal(size=(2, 2)))
        g = KroneckerSum(FMT, [(u, a_mat), (u, d_mat)])
        outs = enumerate_dense(g, kronsum.ok_compress, 1)

        self.assertEqual(len(outs), 1)
        self.assertTrue(np.allclose(outs[0], np.kron(u, a_mat + d_mat), atol=1e-12))

    def test_case_orthogonal_terms(self):
        """Test orthogonal unit terms: OK variance equals the sign-trick variance"""
        u = np.array([[1.0, 0.0, 0.0]])
        h = np.array([[0.0, 1.0, 0.0]])
        a_mat = np.array([[1.0, 0.0], [0.0, 0.0]])
        d_mat = np.array([[0.0, 0.0], [0.0, 1.0]])
        g = KroneckerSum(FMT, [(u, a_mat), (h, d_mat)])
        target = kronsum.dense(g)
        ok = variance(target, enumerate_dense(g, kronsum.ok_compress, 1))
        kf = variance(target, enumerate_dense(g, kronsum.kfavg_compress, 1))

        self.assertAlmostEqual(ok, 2.0, places=10)
        self.assertAlmostEqual(kf, 2.0, places=10)

    def test_dominant_term_kept(self):
        """Test a norm-10 term survives in every sample and the variance stays O(1)"""
        e = np.eye(3)
        g = KroneckerSum(FMT, [
            (10.0 * e[0:1], np.array([[1.0, 0.0], [0.0, 0.0]])),
            (e[1:2], np.array([[0.0, 1.0], [0.0, 0.0]])),
            (e[2:3], np.array([[0.0, 0.0], [1.0, 0.0]])),
        ])
        big = np.kron(*g.terms[0])
        target = kronsum.dense(g)
        outs = enumerate_dense(g, kronsum.ok_compress, 2)

        for out in outs:
            self.assertAlmostEqual(float(np.sum(out * big)), 100.0, places=9)
        self.assertTrue(np.allclose(np.mean(outs, axis=0), target, atol=1e-10))
        self.assertAlmostEqual(variance(target, outs), 2.0, places=9)

    def test_unbiased_random(self):
        """Test enumerated mean equals the input for r = 1, 2"""
        rng = np.random.default_rng(5)
        for r in (1, 2):
            for _ in range(20):
                g = random_sum(rng, r + 1)
                target = kronsum.dense(g)
                mean = np.mean(enumerate_dense(g, kronsum.ok_compress, r), axis=0)
                self.assertLess(np.linalg.norm(mean - target), 1e-10 * np.linalg.norm(target))

    def test_variance_matches_coefficient_opt(self):
        """Test the compression variance equals the opt() variance bound of C"""
        rng = np.random.default_rng(6)
        g = random_sum(rng, 3)
        gs_u = gram_schmidt([u for u, _ in g.terms])
        gs_a = gram_schmidt([a for _, a in g.terms])
        c = gs_u.coeffs @ gs_a.coeffs.T
        bound = lowrank.split_index(np.linalg.svd(c, compute_uv=False), 2).variance_bound

        var = variance(kronsum.dense(g), enumerate_dense(g, kronsum.ok_compress, 2))
        self.assertAlmostEqual(var, bound, delta=1e-9 * max(1.0, bound))

    def test_coefficient_orientation(self):
        """Test sum C_ij v_i (x) B_j reproduces the input sum"""
        g = random_sum(np.random.default_rng(7), 3)
        gs_u = gram_schmidt([u for u, _ in g.terms])
        gs_a = gram_schmidt([a for _, a in g.terms])
        c = gs_u.coeffs @ gs_a.coeffs.T
        rebuilt = sum(
            c[i, j] * np.kron(gs_u.onb[i].reshape(1, 3), gs_a.onb[j].reshape(2, 2))
            for i in range(c.shape[0]) for j in range(c.shape[1])
        )

        self.assertTrue(np.allclose(rebuilt, kronsum.dense(g), atol=1e-12))

    def test_output_in_input_spans(self):
        """Test output factors lie in the spans of the input factors"""
        g = random_sum(np.random.default_rng(8), 3)
        out = kronsum.ok_compress(g, 2, SignStream(1))
        basis_u = gram_schmidt([u for u, _ in g.terms]).onb
        basis_a = gram_schmidt([a for _, a in g.terms]).onb

        self.assertEqual(len(out), 2)
        for u, a_mat in out.terms:
            u_res = u.ravel() - basis_u.T @ (basis_u @ u.ravel())
            a_res = a_mat.ravel() - basis_a.T @ (basis_a @ a_mat.ravel())
            self.assertLess(np.linalg.norm(u_res), 1e-9)
            self.assertLess(np.linalg.norm(a_res), 1e-9)

    def test_dominates_sign_trick_averaging(self):
        """Test OK variance never exceeds the averaged sign-trick variance"""
        rng = np.random.default_rng(9)
        for r in (1, 2):
            for _ in range(100):
                g = random_sum(rng, r + 1)
                target = kronsum.dense(g)
                ok = variance(target, enumerate_dense(g, kronsum.ok_compress, r))
                kf = variance(target, enumerate_dense(g, kronsum.kfavg_compress, r))
                self.assertLessEqual(ok, kf + 1e-9 * max(1.0, kf))

    def test_rank_deficient_spans_padded(self):
        """Test a rank-deficient input yields r terms, the extra ones zero"""
        u = np.array([[1.0, 0.0, 0.0]])
        g = KroneckerSum(FMT, [(u, np.eye(2)), (2 * u, np.ones((2, 2))), (u, -np.eye(2))])
        out = kronsum.ok_compress(g, 2, SignStream(0))

        self.assertEqual(len(out), 2)
        self.assertTrue(np.allclose(kronsum.dense(out), kronsum.dense(g), atol=1e-12))

    def test_biased_variant_is_truncation(self):
        """Test biased compression is deterministic"""
        g = random_sum(np.random.default_rng(10), 3)
        compress = lambda g, r, rng: kronsum.ok_compress(g, r, rng, biased=True)

        self.assertEqual(len(enumerate_dense(g, compress, 2)), 1)

    def test_fewer_terms_unchanged(self):
        """Test an input with at most r terms is returned as is"""
        g = random_sum(np.random.default_rng(11), 2)
        self.assertIs(kronsum.ok_compress(g, 2, SignStream(0)), g)

    def test_too_many_terms(self):
        """Test more than r+1 terms raise ShapeError"""
        with self.assertRaises(ShapeError):
            kronsum.ok_compress(random_sum(np.random.default_rng(12), 4), 2, SignStream(0))


class TestKfAvgCompress(unittest.TestCase):
    def test_unbiased(self):
        """Test the averaged sign trick is unbiased"""
        g = random_sum(np.random.default_rng(13), 3)
        mean = np.mean(enumerate_dense(g, kronsum.kfavg_compress, 2), axis=0)

        self.assertTrue(np.allclose(mean, kronsum.dense(g), atol=1e-10))

    def test_term_count(self):
        """Test the output keeps r terms"""
        g = random_sum(np.random.default_rng(14), 4)
        self.assertEqual(len(kronsum.kfavg_compress(g, 3, SignStream(0))), 3)


if __name__ == '__main__':
    unittest.main()
