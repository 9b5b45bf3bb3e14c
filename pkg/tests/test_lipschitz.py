import logging

import numpy as np
import pytest

import isfl.lipschitz as lipschitz_mod
from isfl.data import Dataset
from isfl.lipschitz import (
    GradientStats,
    LipschitzMatrix,
    ZeroDeviationError,
    estimate_lipschitz,
    estimate_sgd_stats,
    lipschitz_row_from_grads,
)
from isfl.model import ModelSpec, ParamVector, backward_grad, init_params


def probe_dataset(n_classes=3, per_class=6, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    features = rng.standard_normal((n_classes * per_class, dim))
    labels = np.repeat(np.arange(n_classes), per_class)
    return Dataset(features, labels, n_classes)


class TestKernel:
    def test_quadratic_loss_gives_unit_row(self):
        # loss (theta - xi)^2 / 2 has gradient theta - xi: the per-sample
        # gradient difference equals the parameter difference for every sample.
        rng = np.random.default_rng(1)
        xi = rng.standard_normal(12)
        labels = np.repeat(np.arange(3), 4)
        theta_a, theta_b = 0.7, -0.4
        grads_a = (theta_a - xi)[:, None]
        grads_b = (theta_b - xi)[:, None]
        row = lipschitz_row_from_grads(grads_a, grads_b, labels, 3, abs(theta_a - theta_b))
        assert np.allclose(row, 1.0)

    def test_per_class_curvature_recovered(self):
        # loss c_i (theta - xi)^2 / 2 has gradient c_i (theta - xi).
        curvatures = np.array([0.5, 2.0, 3.5])
        labels = np.repeat(np.arange(3), 5)
        rng = np.random.default_rng(2)
        xi = rng.standard_normal(15)
        theta_a, theta_b = 1.2, 0.3
        grads_a = (curvatures[labels] * (theta_a - xi))[:, None]
        grads_b = (curvatures[labels] * (theta_b - xi))[:, None]
        row = lipschitz_row_from_grads(grads_a, grads_b, labels, 3, theta_a - theta_b)
        assert np.allclose(row, curvatures)

    def test_loss_scaling_scales_row(self):
        labels = np.array([0, 0, 1, 1])
        grads_a = np.arange(8.0).reshape(4, 2)
        grads_b = grads_a + np.array([1.0, -0.5])
        row = lipschitz_row_from_grads(grads_a, grads_b, labels, 2, 2.0)
        scaled = lipschitz_row_from_grads(3.0 * grads_a, 3.0 * grads_b, labels, 2, 2.0)
        assert np.allclose(scaled, 3.0 * row)

    def test_missing_category_filled_with_mean(self, caplog):
        labels = np.array([0, 0, 2])
        grads_a = np.ones((3, 2))
        grads_b = np.zeros((3, 2))
        with caplog.at_level(logging.WARNING):
            row = lipschitz_row_from_grads(grads_a, grads_b, labels, 4, 1.0)
        assert row[1] == pytest.approx(row[[0, 2]].mean())
        assert row[3] == pytest.approx(row[[0, 2]].mean())
        assert "absent" in caplog.text

    def test_zero_deviation_raises(self):
        with pytest.raises(ZeroDeviationError):
            lipschitz_row_from_grads(np.ones((2, 2)), np.ones((2, 2)), np.array([0, 1]), 2, 0.0)


class TestEstimateLipschitz:
    def test_matches_brute_force_per_sample_loop(self):
        spec = ModelSpec(4, (6,), 3)
        probe = probe_dataset()
        local = init_params(spec, seed=1)
        shift = init_params(spec, seed=2)
        global_params = local + 0.1 * shift
        row = estimate_lipschitz(spec, local, global_params, probe)

        deviation = (local - global_params).norm()
        expected = np.zeros(3)
        for c in range(3):
            best = 0.0
            for n in np.flatnonzero(probe.labels == c):
                single = probe.subset(np.array([n]))
                diff = backward_grad(spec, local, single) - backward_grad(
                    spec, global_params, single
                )
                best = max(best, diff.norm())
            expected[c] = best / deviation
        assert np.allclose(row, expected, rtol=1e-12)

    def test_symmetry(self):
        spec = ModelSpec(4, (), 3)
        probe = probe_dataset(seed=5)
        a = init_params(spec, seed=3)
        b = init_params(spec, seed=4)
        assert np.allclose(
            estimate_lipschitz(spec, a, b, probe),
            estimate_lipschitz(spec, b, a, probe),
            rtol=1e-15,
        )

    def test_identical_params_raise(self):
        spec = ModelSpec(4, (), 3)
        params = init_params(spec, seed=0)
        with pytest.raises(ZeroDeviationError):
            estimate_lipschitz(spec, params, params.copy(), probe_dataset())

    def test_cost_is_two_passes_over_probe(self, monkeypatch):
        spec = ModelSpec(4, (), 3)
        probe = probe_dataset()
        calls = []
        real = lipschitz_mod.per_sample_grads

        def counting(spec_, params_, batch_):
            calls.append(len(batch_))
            return real(spec_, params_, batch_)

        monkeypatch.setattr(lipschitz_mod, "per_sample_grads", counting)
        estimate_lipschitz(spec, init_params(spec, 1), init_params(spec, 2), probe)
        assert calls == [len(probe), len(probe)]


class TestEstimateSgdStats:
    def test_full_batch_zero_variance(self):
        spec = ModelSpec(4, (), 3)
        probe = probe_dataset()
        stats = estimate_sgd_stats(spec, init_params(spec, 0), probe, len(probe), 5, seed=1)
        assert stats.sigma2 == 0.0

    def test_g2_dominates_mean_norm(self):
        spec = ModelSpec(4, (5,), 3)
        probe = probe_dataset(per_class=10)
        params = init_params(spec, seed=7)
        stats = estimate_sgd_stats(spec, params, probe, 6, 16, seed=2)
        mean_grad = backward_grad(spec, params, probe)
        assert stats.g2 >= mean_grad.norm() ** 2 - 1e-12

    def test_duplication_invariance_in_expectation(self):
        spec = ModelSpec(3, (), 3)
        probe = probe_dataset(per_class=8, dim=3, seed=9)
        doubled = Dataset(
            np.vstack([probe.features, probe.features]),
            np.concatenate([probe.labels, probe.labels]),
            probe.n_classes,
        )
        params = init_params(spec, seed=4)
        base, dup = [], []
        for seed in range(50):
            base.append(estimate_sgd_stats(spec, params, probe, 8, 6, seed=seed).sigma2)
            dup.append(estimate_sgd_stats(spec, params, doubled, 8, 6, seed=1000 + seed).sigma2)
        rel = abs(np.mean(dup) - np.mean(base)) / np.mean(base)
        assert rel <= 0.2

    def test_needs_two_draws(self):
        spec = ModelSpec(4, (), 3)
        with pytest.raises(ValueError):
            estimate_sgd_stats(spec, init_params(spec, 0), probe_dataset(), 4, 1)


class TestContainers:
    def test_matrix_validation(self):
        LipschitzMatrix(np.ones((2, 3)), epoch_tag=5)
        with pytest.raises(ValueError):
            LipschitzMatrix(np.array([[1.0, -0.1]]), epoch_tag=0)
        with pytest.raises(ValueError):
            LipschitzMatrix(np.array([[np.inf, 1.0]]), epoch_tag=0)

    def test_stats_validation(self):
        GradientStats(0.0, 1.0)
        with pytest.raises(ValueError):
            GradientStats(-1.0, 1.0)
        with pytest.raises(ValueError):
            GradientStats(0.0, np.nan)
