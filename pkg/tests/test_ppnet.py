"""Pose predictor: loss closed forms, gradients, optimizer, training, model IO."""

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from odokit import ppnet, synth
from odokit import trajectory as trj

GAMMA, K = 0.1, 0.5


def small_config(**kw):
    defaults = dict(epochs=3, batch_size=16, seed=0, scale_min=0.1, scale_max=1.5)
    defaults.update(kw)
    return ppnet.TrainConfig(**defaults)


def randomized_params(seed, scale=0.3):
    rng = np.random.default_rng(seed)
    params = ppnet.init_params(small_config(seed=seed))
    for arr in params.arrays().values():
        arr += rng.normal(0.0, scale, arr.shape)
    return params


class TestForward:
    def test_zero_params_emit_head_biases(self):
        params = ppnet.init_params(small_config())
        for name, arr in params.arrays().items():
            arr[:] = 0.0
        params.b_pose[:] = np.arange(6) * 0.1
        params.b_sigma[:] = -1.0
        window = trj.PoseWindow(np.random.default_rng(0).uniform(-1, 1, (20, 6)), np.zeros(6))
        pred = ppnet.forward(params, window)
        assert np.allclose(pred.pose, params.b_pose)
        assert np.allclose(pred.sigma, np.exp(-1.0))

    def test_deterministic(self):
        params = randomized_params(1)
        window = trj.PoseWindow(np.random.default_rng(2).uniform(-1, 1, (20, 6)), np.zeros(6))
        a = ppnet.forward(params, window)
        b = ppnet.forward(params, window)
        assert np.array_equal(a.pose, b.pose)
        assert np.array_equal(a.sigma, b.sigma)

    def test_sigma_strictly_positive(self):
        params = randomized_params(3, scale=1.5)
        rng = np.random.default_rng(4)
        for _ in range(20):
            pred = ppnet.forward(params, trj.PoseWindow(rng.uniform(-5, 5, (20, 6)), np.zeros(6)))
            assert np.all(pred.sigma > 0)

    def test_non_finite_params_rejected(self):
        params = randomized_params(5)
        params.w_x[0, 0] = np.nan
        with pytest.raises(ppnet.NumericError):
            ppnet.forward(params, trj.PoseWindow(np.zeros((20, 6)), np.zeros(6)))


class TestNllLoss:
    def test_perfect_prediction_unit_sigma_is_exactly_zero(self):
        pred = ppnet.Prediction(pose=np.ones(6), sigma=np.ones(6))
        assert ppnet.nll_loss(pred, np.ones(6), GAMMA, K) == 0.0

    def test_unit_single_coordinate_residual(self):
        pred = ppnet.Prediction(pose=np.zeros(6), sigma=np.ones(6))
        target = np.zeros(6)
        target[0] = 1.0
        assert abs(ppnet.nll_loss(pred, target, GAMMA, K) - 1.0) < 1e-12

    def test_doubling_sigma_shifts_loss_by_six_gamma_log_two(self):
        pred1 = ppnet.Prediction(pose=np.zeros(6), sigma=np.ones(6))
        pred2 = ppnet.Prediction(pose=np.zeros(6), sigma=2.0 * np.ones(6))
        l1 = ppnet.nll_loss(pred1, np.zeros(6), GAMMA, K)
        l2 = ppnet.nll_loss(pred2, np.zeros(6), GAMMA, K)
        assert abs((l2 - l1) - 6.0 * GAMMA * np.log(2.0)) < 1e-12

    def test_rejects_non_positive_sigma(self):
        pred = ppnet.Prediction(pose=np.zeros(6), sigma=np.array([1, 1, 1, 1, 1, -1.0]))
        with pytest.raises(ValueError):
            ppnet.nll_loss(pred, np.zeros(6), GAMMA, K)

    @given(residual=st.floats(0.01, 10), sigma=st.floats(0.01, 10))
    @settings(max_examples=50, deadline=None)
    def test_closed_form_decomposition(self, residual, sigma):
        # with sigma = 1: loss = (sum residual^2)^k; with zero residual: gamma*sum(log sigma)
        pred = ppnet.Prediction(pose=np.zeros(6), sigma=np.ones(6))
        target = np.full(6, residual)
        expected = (6.0 * residual**2) ** K
        assert abs(ppnet.nll_loss(pred, target, GAMMA, K) - expected) < 1e-12
        pred2 = ppnet.Prediction(pose=np.zeros(6), sigma=np.full(6, sigma))
        expected2 = GAMMA * 6.0 * np.log(sigma)
        assert abs(ppnet.nll_loss(pred2, np.zeros(6), GAMMA, K) - expected2) < 1e-12


def finite_difference_check(params, x, y, n_coords, rng, h=1e-5):
    _, grads = ppnet.loss_and_gradient(params, x, y, GAMMA, K)
    worst = 0.0
    arrays = params.arrays()
    names = sorted(arrays)
    sizes = np.array([arrays[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = rng.choice(offsets[-1], size=min(n_coords, offsets[-1]), replace=False)
    for flat_idx in picks:
        gi = np.searchsorted(offsets, flat_idx, side="right") - 1
        name = names[gi]
        local = flat_idx - offsets[gi]
        flat = arrays[name].reshape(-1)
        orig = flat[local]
        flat[local] = orig + h
        lp, _ = ppnet.loss_and_gradient(params, x, y, GAMMA, K)
        flat[local] = orig - h
        lm, _ = ppnet.loss_and_gradient(params, x, y, GAMMA, K)
        flat[local] = orig
        fd = (lp - lm) / (2.0 * h)
        an = grads[name].reshape(-1)[local]
        denom = max(abs(fd), abs(an))
        if denom > 1e-10:
            worst = max(worst, abs(fd - an) / denom)
    return worst


class TestLossGradient:
    def test_zero_residual_unit_sigma_pose_head_gradient_vanishes(self):
        params = ppnet.init_params(small_config())
        rng = np.random.default_rng(6)
        x = rng.uniform(-1, 1, (4, 20, 6))
        pose, logvar = ppnet.forward_batch(params, x)
        assert np.allclose(logvar, 0.0)  # zeroed sigma head -> sigma = 1
        _, grads = ppnet.loss_and_gradient(params, x, pose, GAMMA, K)
        assert np.allclose(grads["w_pose"], 0.0)
        assert np.allclose(grads["b_pose"], 0.0)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        params = randomized_params(8)
        x = rng.normal(0.0, 0.5, (4, 20, 6))
        y = rng.normal(0.0, 0.5, (4, 6))
        assert finite_difference_check(params, x, y, 50, rng) < 1e-4

    def test_batch_mean_is_mean_of_per_window_gradients(self):
        rng = np.random.default_rng(9)
        params = randomized_params(10)
        x = rng.normal(0.0, 0.5, (3, 20, 6))
        y = rng.normal(0.0, 0.5, (3, 6))
        _, batch_grads = ppnet.loss_and_gradient(params, x, y, GAMMA, K)
        singles = [ppnet.loss_and_gradient(params, x[i : i + 1], y[i : i + 1], GAMMA, K)[1]
                   for i in range(3)]
        for name in batch_grads:
            mean_single = sum(s[name] for s in singles) / 3.0
            assert np.allclose(batch_grads[name], mean_single, atol=1e-12)

    def test_empty_batch_rejected(self):
        params = randomized_params(11)
        with pytest.raises(ValueError):
            ppnet.loss_gradient(params, [], GAMMA, K)

    def test_pose_window_batch_api(self):
        rng = np.random.default_rng(12)
        params = randomized_params(13)
        windows = [trj.PoseWindow(rng.normal(0, 0.5, (20, 6)), rng.normal(0, 0.5, 6))
                   for _ in range(4)]
        grads = ppnet.loss_gradient(params, windows, GAMMA, K)
        assert set(grads) == set(params.arrays())


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        params = randomized_params(14)
        state = ppnet.AdamState.for_params(params)
        grads = {k: np.zeros_like(v) for k, v in params.arrays().items()}
        new_params, _ = ppnet.adam_step(params, grads, state, small_config())
        for name in grads:
            assert np.array_equal(new_params.arrays()[name], params.arrays()[name])

    def test_single_step_moves_toward_quadratic_minimum(self):
        params = randomized_params(15)
        state = ppnet.AdamState.for_params(params)
        grads = {k: np.zeros_like(v) for k, v in params.arrays().items()}
        grads["b_pose"][0] = 2.0  # positive gradient -> parameter must decrease
        before = params.b_pose[0]
        new_params, _ = ppnet.adam_step(params, grads, state, small_config())
        assert new_params.b_pose[0] < before

    def test_converges_on_least_squares_toy(self):
        # minimize ||b_pose - target||^2 through the adam_step interface
        config = small_config(learning_rate=0.05)
        params = ppnet.init_params(config)
        state = ppnet.AdamState.for_params(params)
        target = np.array([0.3, -0.7, 1.2, 0.0, 0.5, -0.1])
        for _ in range(1000):
            grads = {k: np.zeros_like(v) for k, v in params.arrays().items()}
            grads["b_pose"] = 2.0 * (params.b_pose - target)
            params, state = ppnet.adam_step(params, grads, state, config)
        assert np.max(np.abs(params.b_pose - target)) < 1e-6


class TestTotalUncertainty:
    def test_unit_sigma_sums_to_six(self):
        pred = ppnet.Prediction(pose=np.zeros(6), sigma=np.ones(6))
        assert ppnet.total_uncertainty(pred) == 6.0

    def test_monotone_in_each_dimension(self):
        sigma = np.ones(6)
        base = ppnet.total_uncertainty(ppnet.Prediction(np.zeros(6), sigma))
        for j in range(6):
            bumped = sigma.copy()
            bumped[j] += 0.5
            assert ppnet.total_uncertainty(ppnet.Prediction(np.zeros(6), bumped)) > base


class TestTrain:
    def test_seed_determinism_bit_identical(self):
        data = synth.constant_velocity_trajectories(count=4, n_frames=120, seed=0)
        cfg = small_config(epochs=2)
        a = ppnet.train(data, cfg)
        b = ppnet.train(data, cfg)
        for name in a.params.arrays():
            assert np.array_equal(a.params.arrays()[name], b.params.arrays()[name])
        assert [row["val_nll"] for row in a.history] == [row["val_nll"] for row in b.history]

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            ppnet.train([], small_config())

    def test_too_few_windows_rejected(self):
        data = [trj.Trajectory(np.zeros((22, 6)))]
        with pytest.raises(ValueError):
            ppnet.train(data, small_config(batch_size=64))

    def test_validation_nll_decreases_on_constant_velocity(self):
        data = synth.constant_velocity_trajectories(count=6, n_frames=200, seed=1)
        cfg = small_config(epochs=25, batch_size=32)
        res = ppnet.train(data, cfg)
        assert res.best_val_nll < res.history[0]["val_nll"]


class TestModelIO:
    def test_round_trip_bit_identical(self):
        params = randomized_params(16)
        loaded = ppnet.load_model(ppnet.save_model(params))
        for name in params.arrays():
            assert np.array_equal(loaded.arrays()[name], params.arrays()[name])

    def test_truncated_stream_rejected(self):
        data = ppnet.save_model(randomized_params(17))
        with pytest.raises(ppnet.ModelFormatError):
            ppnet.load_model(data[: len(data) // 2])

    def test_wrong_version_rejected(self):
        params = randomized_params(18)
        real = ppnet.MODEL_FORMAT_VERSION
        try:
            ppnet.MODEL_FORMAT_VERSION = 99
            data = ppnet.save_model(params)
        finally:
            ppnet.MODEL_FORMAT_VERSION = real
        with pytest.raises(ppnet.ModelFormatError):
            ppnet.load_model(data)

    def test_garbage_rejected(self):
        with pytest.raises(ppnet.ModelFormatError):
            ppnet.load_model(b"not a model")


class TestZeroBaseline:
    def test_fitted_sigma_never_exceeds_unit_sigma_baseline(self):
        rng = np.random.default_rng(19)
        targets = rng.normal(0.0, 0.5, (200, 6))
        fitted = ppnet.zero_baseline_nll(targets, GAMMA, K)
        fixed = ppnet.zero_baseline_nll(targets, GAMMA, K, fit_sigma=False)
        assert fitted <= fixed + 1e-9
