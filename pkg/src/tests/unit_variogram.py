"""
Copyright (C) Microsoft Corporation
SPDX-License-Identifier: MIT
"""
import unittest

import numpy as np

from src.autodiff import Tensor
from src.interfaces import VariogramBins, VariogramModel
from src.losses import loss_ac
from src.variogram import pairwise_lags, sample_pairs, empirical_semivariogram, \
    gaussian_model, fit_gaussian_model, bin_distributions, bin_centers, fit_autocorrelation, \
    prediction_distributions, variogram_report, variogram_curve_rows, RANGE_BOUNDS
from src.util import InsufficientSamples, DegenerateEmbeddings, InsufficientBins


def _curve(sill, range_, noise=0.0, seed=0, counts=100):
    centers = bin_centers(0.1)
    gamma = gaussian_model(centers, 0.0, sill, range_)
    if noise:
        gamma = gamma * (1 + np.random.default_rng(seed).normal(0.0, noise, size=len(gamma)))
    return VariogramBins(0.1, centers, np.full(len(centers), counts), gamma,
                         np.ones(len(centers), dtype=bool))


class LagTest(unittest.TestCase):

    def test_rescaled_distances(self):
        lags = pairwise_lags(np.array([[0.0, 0.0], [3.0, 4.0]]))
        self.assertEqual(lags[0, 1], 1.0)
        self.assertEqual(lags[0, 0], 0.0)

        lags = pairwise_lags(np.array([[0.0], [1.0], [2.0]]))
        self.assertEqual(sorted(lags[np.triu_indices(3, k=1)]), [0.5, 0.5, 1.0])

        points = np.random.default_rng(0).normal(size=(6, 4))
        np.testing.assert_allclose(pairwise_lags(points * 10.0), pairwise_lags(points))

    def test_errors(self):
        with self.assertRaises(InsufficientSamples):
            pairwise_lags(np.zeros((1, 3)))
        with self.assertRaises(DegenerateEmbeddings):
            pairwise_lags(np.ones((4, 3)))

    def test_sample_pairs(self):
        rng = np.random.default_rng(0)
        i, j = sample_pairs(5, rng)
        self.assertEqual(len(i), 20)
        self.assertEqual(len(set(zip(i, j))), 20)
        self.assertFalse(np.any(i == j))

        i, j = sample_pairs(50, rng, max_points=10, max_pairs=1000)
        self.assertEqual(len(i), 1000)
        self.assertFalse(np.any(i == j))
        self.assertTrue(np.all((i >= 0) & (i < 50) & (j >= 0) & (j < 50)))


class SemivariogramTest(unittest.TestCase):

    def test_constant_values(self):
        points = np.random.default_rng(1).normal(size=(8, 2))
        bins = empirical_semivariogram(pairwise_lags(points), np.full(8, 3.0))
        self.assertTrue(bins.populated.any())
        np.testing.assert_array_equal(bins.gamma[bins.populated], 0.0)

    def test_two_points(self):
        lags = pairwise_lags(np.array([[0.0, 0.0], [1.0, 0.0]]))
        bins = empirical_semivariogram(lags, np.array([1.0, 3.0]), 0.1)
        self.assertEqual(bins.n_bins, 10)
        self.assertEqual(bins.counts[-1], 2)
        self.assertEqual(bins.gamma[-1], 4.0)
        self.assertEqual(int(bins.counts.sum()), 2)

    def test_translation_invariance(self):
        rng = np.random.default_rng(2)
        lags = pairwise_lags(rng.normal(size=(12, 3)))
        values = rng.normal(size=12)
        first = empirical_semivariogram(lags, values)
        second = empirical_semivariogram(lags, values + 100.0)
        np.testing.assert_allclose(first.gamma, second.gamma, atol=1e-9)
        np.testing.assert_array_equal(first.counts, second.counts)

    def test_against_brute_force(self):
        rng = np.random.default_rng(3)
        points = rng.uniform(size=(20, 2))
        values = rng.normal(size=20)
        lags = pairwise_lags(points)
        bins = empirical_semivariogram(lags, values, 0.1)

        sums, counts = np.zeros(10), np.zeros(10)
        for a in range(20):
            for b in range(20):
                if a == b:
                    continue
                k = min(int(lags[a, b] / 0.1), 9)
                sums[k] += (values[a] - values[b]) ** 2
                counts[k] += 1
        np.testing.assert_array_equal(bins.counts, counts)
        expected = np.divide(sums, counts, out=np.zeros(10), where=counts > 0)
        np.testing.assert_allclose(bins.gamma, expected, rtol=1e-12, atol=1e-12)


class GaussianFitTest(unittest.TestCase):

    def test_exact_recovery(self):
        model = fit_gaussian_model(_curve(2.0, 0.6))
        self.assertAlmostEqual(model.sill, 2.0, delta=1e-6)
        self.assertAlmostEqual(model.range, 0.6, delta=1e-6)
        self.assertEqual(model.nugget, 0.0)
        self.assertFalse(model.pinned)

    def test_noisy_recovery(self):
        for range_ in (0.3, 0.6):
            for seed in range(20):
                with self.subTest(range=range_, seed=seed):
                    model = fit_gaussian_model(_curve(2.0, range_, noise=0.05, seed=seed))
                    self.assertLess(abs(model.sill - 2.0) / 2.0, 0.1)
                    self.assertLess(abs(model.range - range_) / range_, 0.1)

    def test_fitted_range_ignores_value_scale(self):
        small = _curve(2.0, 0.3, noise=0.05, seed=13)
        large = small._replace(gamma=small.gamma * 1000.0)
        first, second = fit_gaussian_model(small), fit_gaussian_model(large)
        self.assertAlmostEqual(first.range, second.range, delta=1e-6)
        self.assertAlmostEqual(second.sill / first.sill, 1000.0, delta=1e-3)

    def test_flat_curve_pins_range(self):
        centers = bin_centers(0.1)
        bins = VariogramBins(0.1, centers, np.full(10, 50), np.full(10, 1.5),
                             np.ones(10, dtype=bool))
        model = fit_gaussian_model(bins)
        self.assertTrue(model.pinned)
        self.assertEqual(model.range, RANGE_BOUNDS[0])
        self.assertAlmostEqual(model.sill, 1.5, places=9)

    def test_free_nugget(self):
        centers = bin_centers(0.1)
        gamma = gaussian_model(centers, 0.5, 1.0, 0.5)
        bins = VariogramBins(0.1, centers, np.full(10, 30), gamma, np.ones(10, dtype=bool))
        model = fit_gaussian_model(bins, fix_nugget_zero=False)
        self.assertAlmostEqual(model.nugget, 0.5, delta=1e-4)
        self.assertAlmostEqual(model.range, 0.5, delta=1e-4)

    def test_too_few_bins(self):
        centers = bin_centers(0.1)
        populated = np.zeros(10, dtype=bool)
        populated[3] = True
        bins = VariogramBins(0.1, centers, populated.astype(int) * 5, populated * 1.0, populated)
        with self.assertRaises(InsufficientBins):
            fit_gaussian_model(bins)

    def test_model_curve(self):
        model = VariogramModel(0.0, 2.0, 0.6)
        self.assertEqual(model(0.0), 0.0)
        self.assertAlmostEqual(float(model(0.3)), 2.0 * (1 - np.exp(-1.0)))


class DistributionTest(unittest.TestCase):

    def test_constant_values(self):
        points = np.random.default_rng(4).normal(size=(10, 2))
        dists = bin_distributions(pairwise_lags(points), np.full(10, 7.0),
                                  VariogramModel(0.0, 1.0, 1.0), 0.1, 2)
        valid = [d for d in dists if d.valid]
        self.assertTrue(valid)
        for d in valid:
            self.assertEqual(d.mu, 0.0)
            self.assertEqual(d.sigma, 0.0)

    def test_direct_moments(self):
        lags = pairwise_lags(np.array([[0.0], [1.0]]))
        dists = bin_distributions(lags, np.array([1.0, 3.0]), VariogramModel(0.0, 1.0, 1.0),
                                  0.1, 2)
        self.assertEqual(dists[-1].count, 2)
        self.assertEqual(dists[-1].mu, 4.0)
        self.assertEqual(dists[-1].sigma, 0.0)
        self.assertTrue(dists[-1].valid)

    def test_range_cut(self):
        points = np.random.default_rng(5).uniform(size=(40, 2))
        values = np.random.default_rng(6).normal(size=40)
        dists = bin_distributions(pairwise_lags(points), values, VariogramModel(0.0, 1.0, 0.3),
                                  0.1, 1)
        for d in dists:
            if d.center > 0.3:
                self.assertFalse(d.valid)


class AutocorrelationStateTest(unittest.TestCase):

    def _smooth_problem(self, n=60):
        rng = np.random.default_rng(7)
        embeddings = rng.uniform(size=(n, 3))
        values = np.sin(3 * embeddings[:, 0]) + embeddings[:, 1] + 0.05 * rng.normal(size=n)
        return embeddings, values

    def test_fit(self):
        embeddings, values = self._smooth_problem()
        state = fit_autocorrelation(embeddings, values, 0.1, 5, np.random.default_rng(0))
        self.assertGreater(state.valid_bins, 0)
        distances = np.linalg.norm(embeddings[:, None] - embeddings[None], axis=-1)
        self.assertAlmostEqual(state.lag_scale, distances.max())
        self.assertEqual(len(state.label_bins), 10)

        with self.assertRaises(DegenerateEmbeddings):
            fit_autocorrelation(np.ones((5, 2)), np.arange(5.0), 0.1, 1,
                                np.random.default_rng(0))

    def test_perfect_predictions(self):
        embeddings, values = self._smooth_problem()
        state = fit_autocorrelation(embeddings, values, 0.1, 5, np.random.default_rng(0))
        predicted = prediction_distributions(embeddings, Tensor(values), state,
                                             np.random.default_rng(1))
        for label_bin, pred_bin in zip(state.label_bins, predicted):
            self.assertEqual(label_bin.valid, pred_bin.valid)
            if pred_bin.valid:
                self.assertAlmostEqual(pred_bin.mu.item(), label_bin.mu, places=10)
                self.assertAlmostEqual(pred_bin.sigma.item(), label_bin.sigma, places=6)
        self.assertLess(loss_ac(list(zip(state.label_bins, predicted))).value.item(), 1e-8)

    def test_constant_predictions_have_zero_spread(self):
        embeddings, values = self._smooth_problem()
        state = fit_autocorrelation(embeddings, values, 0.1, 5, np.random.default_rng(0))
        flat = Tensor(np.full(len(values), 2.0), trainable=True)
        predicted = prediction_distributions(embeddings, flat, state, np.random.default_rng(1))
        valid = [d for d in predicted if d.valid]
        self.assertGreater(len(valid), 0)
        for d in valid:
            self.assertEqual(d.mu.item(), 0.0)
            self.assertEqual(d.sigma.item(), 0.0)
        self.assertTrue(np.isfinite(loss_ac(list(zip(state.label_bins, predicted))).value.item()))

    def test_prediction_pair_budget(self):
        embeddings, values = self._smooth_problem()
        state = fit_autocorrelation(embeddings, values, 0.1, 5, np.random.default_rng(0))
        prediction = Tensor(values)

        every = prediction_distributions(embeddings, prediction, state, np.random.default_rng(1))
        self.assertEqual(sum(d.count for d in every), 60 * 59)

        capped = prediction_distributions(embeddings, prediction, state,
                                          np.random.default_rng(1), max_pairs=500)
        self.assertEqual(sum(d.count for d in capped), 500)

    def test_report(self):
        embeddings, values = self._smooth_problem()
        state = fit_autocorrelation(embeddings, values, 0.1, 5, np.random.default_rng(0))
        report = variogram_report(state.bins, state.model, state.label_bins)
        self.assertEqual(len(report["bins"]), 10)
        self.assertEqual(report["fitted"]["range"], state.model.range)
        self.assertEqual(len(report["distributions"]), 10)

        rows = variogram_curve_rows(state.bins, state.model)
        self.assertEqual(len(rows), 10)
        self.assertAlmostEqual(rows[0]["fitted"], float(state.model(rows[0]["lag_center"])))


if __name__ == '__main__':
    unittest.main()
