"""
Copyright (C) Microsoft Corporation
SPDX-License-Identifier: MIT
"""
import unittest

import numpy as np

from src import autodiff as ad
from src.autodiff import Tensor, Tape, grad_check
from src.interfaces import LossWeights, NeighborhoodSpec, BinDistribution
from src.losses import loss_sp, loss_ae, loss_stc, loss_pred, kl_gaussian, loss_ac, loss_total, \
    LossParts
from src.network import SparseLayer
from src.util import ShapeError, EmptyLabelSet, DomainError


def _bin(mu, sigma, valid=True, count=10, bin_id=0):
    return BinDistribution(bin_id, 0.05, mu, sigma, count, valid)


class SimpleLossesTest(unittest.TestCase):

    def test_sparsity(self):
        layer = SparseLayer(2)
        layer.weights.data = np.zeros(2)
        self.assertEqual(loss_sp(layer).item(), 0.0)
        layer.weights.data = np.array([0.5, -0.3])
        self.assertAlmostEqual(loss_sp(layer).item(), 0.8)
        layer.weights.data = np.array([1.0, -0.6])
        self.assertAlmostEqual(loss_sp(layer).item(), 1.6)

    def test_reconstruction(self):
        x = Tensor([0.0, 2.0])
        self.assertEqual(loss_ae(x, x).item(), 0.0)
        self.assertEqual(loss_ae(x, Tensor([1.0, 1.0])).item(), 1.0)

        rng = np.random.default_rng(0)
        a, b = rng.normal(size=10), rng.normal(size=10)
        order = rng.permutation(10)
        self.assertAlmostEqual(loss_ae(Tensor(a), Tensor(b)).item(),
                               loss_ae(Tensor(a[order]), Tensor(b[order])).item())
        with self.assertRaises(ShapeError):
            loss_ae(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_prediction(self):
        y = np.array([0.0, 2.0])
        self.assertEqual(loss_pred(Tensor(y), y, np.ones(2, dtype=bool)).item(), 0.0)
        self.assertEqual(loss_pred(Tensor([1.0, 1.0]), y, np.ones(2, dtype=bool)).item(), 1.0)

        y_hat = np.array([1.0, 3.0, 5.0])
        labels = np.array([0.0, 3.0, 4.0])
        partial = loss_pred(Tensor(y_hat), labels, np.array([True, False, True])).item()
        full = loss_pred(Tensor(y_hat), labels, np.ones(3, dtype=bool)).item()
        self.assertLessEqual(full, partial)

        with self.assertRaises(EmptyLabelSet):
            loss_pred(Tensor(y), y, np.zeros(2, dtype=bool))
        with self.assertRaises(ShapeError):
            loss_pred(Tensor(y), np.zeros(3), np.ones(3, dtype=bool))


class RepresentationConstraintTest(unittest.TestCase):

    def test_two_cells(self):
        r = np.zeros((1, 1, 2, 2))
        r[0, 0, 1] = [2.0, 2.0]
        value = loss_stc(Tensor(r), NeighborhoodSpec(1, 1), 1.0, 1.0).item()
        self.assertAlmostEqual(value, 8.0)

    def test_identical_embeddings(self):
        r = np.ones((3, 4, 4, 5))
        self.assertEqual(loss_stc(Tensor(r), NeighborhoodSpec(2, 2)).item(), 0.0)

    def test_homogeneity(self):
        r = np.random.default_rng(0).normal(size=(3, 4, 5, 2))
        single = loss_stc(Tensor(r), NeighborhoodSpec(2, 1), 1.0, 1.0).item()
        double = loss_stc(Tensor(r), NeighborhoodSpec(2, 1), 2.0, 2.0).item()
        self.assertAlmostEqual(double, 2.0 * single)

    def test_brute_force(self):
        rng = np.random.default_rng(1)
        r = rng.normal(size=(3, 3, 4, 2))
        steps, height, width, _ = r.shape
        expected = 0.0
        for t in range(steps):
            for i in range(height):
                for j in range(width):
                    for k in (1, 2):
                        for di in range(-k, k + 1):
                            for dj in range(-k, k + 1):
                                if max(abs(di), abs(dj)) != k:
                                    continue
                                a, b = i + di, j + dj
                                if 0 <= a < height and 0 <= b < width:
                                    expected += 0.7 * np.mean((r[t, i, j] - r[t, a, b]) ** 2) / k
                    for dt in (-1, 1):
                        if 0 <= t + dt < steps:
                            expected += 0.3 * np.mean((r[t, i, j] - r[t + dt, i, j]) ** 2)
        value = loss_stc(Tensor(r), NeighborhoodSpec(2, 1), 0.7, 0.3).item()
        self.assertAlmostEqual(value, expected, places=10)

    def test_gradient(self):
        r = np.random.default_rng(2).normal(size=(2, 3, 3, 2))
        error = grad_check(lambda t: loss_stc(t, NeighborhoodSpec(1, 1)), r)
        self.assertLess(error, 1e-4)


class AutocorrelationLossTest(unittest.TestCase):

    def test_kl_values(self):
        self.assertAlmostEqual(kl_gaussian(1.5, 0.7, 1.5, 0.7).item(), 0.0, places=12)
        self.assertAlmostEqual(kl_gaussian(0.0, 1.0, 1.0, 1.0).item(), 0.5, places=10)
        expected = 0.5 * (np.log(4.0) - 1.0 + 0.25)
        self.assertAlmostEqual(kl_gaussian(0.0, 1.0, 0.0, 2.0).item(), expected, places=10)
        self.assertAlmostEqual(expected, 0.3181, places=4)

    def test_kl_against_closed_form(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            mu_y, mu_p = rng.normal(size=2)
            s_y, s_p = rng.uniform(0.5, 2.0, size=2)
            closed = np.log(s_p / s_y) + (s_y ** 2 + (mu_y - mu_p) ** 2) / (2 * s_p ** 2) - 0.5
            value = kl_gaussian(mu_y, s_y, mu_p, s_p, floor=0.0).item()
            self.assertAlmostEqual(value, closed, places=12)

    def test_kl_zero_sigma_stays_finite(self):
        value = kl_gaussian(0.0, 0.0, 0.0, 0.0).item()
        self.assertTrue(np.isfinite(value))
        with self.assertRaises(DomainError):
            kl_gaussian(float("nan"), 1.0, 0.0, 1.0)

    def test_bins(self):
        same = loss_ac([(_bin(2.0, 1.0), _bin(2.0, 1.0)), (_bin(4.0, 0.5), _bin(4.0, 0.5))])
        self.assertAlmostEqual(same.value.item(), 0.0, places=12)
        self.assertEqual(same.valid_bins, 2)

        one = loss_ac([(_bin(0.0, 1.0), _bin(1.0, 1.0))])
        self.assertAlmostEqual(one.value.item(), 0.5, places=10)
        with_invalid = loss_ac([(_bin(0.0, 1.0), _bin(1.0, 1.0)),
                                (_bin(0.0, 1.0, valid=False, count=2), _bin(5.0, 1.0))])
        self.assertEqual(with_invalid.value.item(), one.value.item())
        self.assertEqual(with_invalid.valid_bins, 1)

        empty = loss_ac([(_bin(0.0, 1.0, valid=False), _bin(3.0, 1.0))])
        self.assertEqual(empty.value.item(), 0.0)
        self.assertEqual(empty.valid_bins, 0)

    def test_gradient_reaches_predictions(self):
        rng = np.random.default_rng(4)
        pred0 = rng.normal(size=6)

        def composite(pred):
            squared = ad.square(pred[0:3] - pred[3:6])
            mu = ad.mean(squared)
            sigma = ad.sqrt(ad.mean(ad.square(squared - mu)) + 1e-12)
            return loss_ac([(_bin(1.0, 0.5), _bin(mu, sigma))]).value

        self.assertLess(grad_check(composite, pred0), 1e-4)


class TotalLossTest(unittest.TestCase):

    def test_default_weights(self):
        parts = LossParts(1.0, 1.0, 1.0, 1.0, 1.0)
        self.assertAlmostEqual(loss_total(parts, LossWeights()).item(), 12.1)

    def test_degenerate_weights(self):
        parts = LossParts(0.75, 3.0, 2.0, 1.0, 4.0)
        weights = LossWeights(0.0, 0.0, 0.0, 0.0)
        self.assertEqual(loss_total(parts, weights).item(), 0.75)

    def test_linearity_in_eta(self):
        parts = LossParts(0.5, 0.2, 0.3, 0.4, 0.8)
        base = loss_total(parts, LossWeights(eta=0.1)).item()
        doubled = loss_total(parts, LossWeights(eta=0.2)).item()
        self.assertAlmostEqual(doubled - base, 0.1 * 0.8)

    def test_skipped_terms(self):
        total = loss_total(LossParts(1.0, None, None, None, None), LossWeights()).item()
        self.assertEqual(total, 1.0)
        with self.assertRaises(DomainError):
            loss_total(LossParts(1.0, float("inf")), LossWeights())

    def test_zero_weight_cuts_gradient(self):
        layer = SparseLayer(3)
        pred = Tensor(np.array([1.0, 2.0]), trainable=True)
        with Tape() as tape:
            parts = LossParts(ad.sum_(ad.square(pred)), loss_sp(layer))
            total = loss_total(parts, LossWeights(alpha=0.0))
        grads = tape.backward(total)
        self.assertIn(pred, grads)
        self.assertNotIn(layer.weights, grads)


if __name__ == '__main__':
    unittest.main()
