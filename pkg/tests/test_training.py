"""Optimizer steps, lockstep paired runs, evaluation."""

import numpy as np
import pytest

from relulab import (
    Dataset,
    GradientExplosionError,
    NetworkSpec,
    Precision,
    RoundedTensor,
    SubgradientPolicy,
    SyntheticSpec,
    TrainConfig,
    WeightVector,
    adam_step,
    backprop,
    evaluate,
    forward,
    init_kaiming_uniform,
    make_synthetic,
    run_paired,
    sgd_step,
)
from relulab.network import gradient_vector, unflatten, flatten
from relulab.training import AdamState, draw_gamma

B16, B32, B64 = Precision.B16, Precision.B32, Precision.B64


def finite_difference_gradient(spec, theta, x, y, reduction="mean"):
    """Central differences with per-coordinate step 1e-6 * (1 + |theta_i|)."""
    base = theta.as_float64()
    grad = np.empty_like(base)
    for i in range(base.size):
        h = 1e-6 * (1.0 + abs(base[i]))
        up, down = base.copy(), base.copy()
        up[i] += h
        down[i] -= h
        lu, _ = forward(spec, WeightVector(up, B64), x, y, reduction=reduction)
        ld, _ = forward(spec, WeightVector(down, B64), x, y, reduction=reduction)
        grad[i] = (lu.loss - ld.loss) / (2 * h)
    return grad


class TestSgdStep:
    def test_basic_update(self):
        theta = WeightVector(np.array([1.0]), B64)
        new = sgd_step(theta, np.array([0.5]), step_scale=0.01)
        assert float(new.values[0]) == 0.995

    def test_zero_gradient_is_identity(self):
        theta = WeightVector(np.array([1.0, -2.0]), B64)
        new = sgd_step(theta, np.zeros(2), step_scale=0.01)
        np.testing.assert_array_equal(new.values, theta.values)

    def test_b16_update_below_one_ulp_is_absorbed(self):
        theta = WeightVector(np.array([2048.0], dtype=np.float16), B16)
        new = sgd_step(theta, np.array([0.5], dtype=np.float16), step_scale=1.0)
        assert float(new.values[0]) == 2048.0


class TestAdamStep:
    def test_first_step_magnitude_is_about_gamma(self):
        # bias correction makes mhat/sqrt(vhat) ~ sign(g) on step one
        theta = WeightVector(np.zeros(4), B64)
        g = np.array([0.3, -0.02, 5.0, -7.0])
        state = AdamState.fresh(theta)
        new = adam_step(theta, g, state, gamma=0.001)
        np.testing.assert_allclose(np.abs(new.values), 0.001, rtol=1e-4)
        assert np.all(np.sign(new.values) == -np.sign(g))

    def test_zero_gradient_keeps_theta(self):
        theta = WeightVector(np.ones(3), B64)
        state = AdamState.fresh(theta)
        for _ in range(5):
            theta = adam_step(theta, np.zeros(3), state, gamma=0.1)
        np.testing.assert_array_equal(theta.values, np.ones(3))

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        g = rng.standard_normal(6)
        out = []
        for _ in range(2):
            theta = WeightVector(np.ones(6), B64)
            state = AdamState.fresh(theta)
            for _ in range(10):
                theta = adam_step(theta, g, state, gamma=0.01)
            out.append(theta.values)
        np.testing.assert_array_equal(out[0], out[1])


@pytest.fixture(scope="module")
def tiny_data():
    return make_synthetic(SyntheticSpec(n=96, d0=6, k=3, seed=1), B64)


@pytest.fixture(scope="module")
def tiny_data_b32():
    return make_synthetic(SyntheticSpec(n=96, d0=6, k=3, seed=1), B32)


class TestGradientAgainstFiniteDifferences:
    def test_matches_on_smooth_points(self, tiny_data):
        spec = NetworkSpec((6, 8, 5, 3))
        x = tiny_data.inputs.data[:12]
        y = tiny_data.labels[:12]
        for seed in range(3):
            theta = init_kaiming_uniform(spec, seed)
            trace, tape = forward(spec, theta, x, y)
            assert trace.total_zero_count == 0
            g = gradient_vector(spec, tape,
                                backprop(tape, SubgradientPolicy(0.0)).grads)
            fd = finite_difference_gradient(spec, theta, x, y)
            err = np.abs(fd - g.as_float64()) / (1.0 + np.abs(g.as_float64()))
            assert err.max() <= 1e-5


class TestRunPaired:
    def test_zero_vs_zero_never_diverges(self, tiny_data):
        config = TrainConfig(s_values=(0.0, 0.0), precision=B64,
                             batch_size=16, epochs=2)
        spec = NetworkSpec((6, 8, 3))
        record = run_paired(config, spec, tiny_data)
        assert record.n_iterations == 12
        gaps = record.gap_column(0.0)
        assert np.all(gaps == 0.0)
        assert record.first_divergence_iteration == {}

    def test_sanity_duplicate_gap_is_identically_zero(self, tiny_data):
        config = TrainConfig(s_values=(0.0, 1.0), precision=B64,
                             batch_size=16, epochs=1)
        spec = NetworkSpec((6, 8, 3))
        record = run_paired(config, spec, tiny_data)
        sanity = np.array([row["gaps"]["sanity"] for row in record.iterations])
        assert np.all(sanity == 0.0)

    def test_b64_run_is_smooth_and_lockstep(self, tiny_data):
        config = TrainConfig(s_values=(0.0, 1.0), precision=B64,
                             batch_size=16, epochs=2)
        spec = NetworkSpec((6, 16, 3))
        record = run_paired(config, spec, tiny_data)
        assert record.first_zero_iteration is None
        assert np.all(record.gap_column(1.0) == 0.0)

    def test_replay_is_bitwise_identical(self, tiny_data_b32):
        config = TrainConfig(s_values=(0.0, 1.0), precision=B32,
                             batch_size=16, epochs=1,
                             init_seed=3, shuffle_seed=4, gamma_seed=5)
        spec = NetworkSpec((6, 8, 3), precision=B32)
        a = run_paired(config, spec, tiny_data_b32)
        b = run_paired(config, spec, tiny_data_b32)
        assert a.gamma == b.gamma
        for ra, rb in zip(a.iterations, b.iterations):
            assert ra == rb
        np.testing.assert_array_equal(a.final_weights["ref"].values,
                                      b.final_weights["ref"].values)

    def test_planted_kink_splits_immediately(self, tiny_data):
        # zero FIRST-layer weights put every pre-activation on the kink
        # while the random second layer keeps the upstream nonzero, so
        # s=0 and s=1 must part at iteration 0
        spec = NetworkSpec((6, 8, 3))
        parts = unflatten(spec, init_kaiming_uniform(spec, 0))
        parts["W1"][:] = 0.0
        parts["b1"][:] = 0.0
        theta0 = flatten(spec, parts)
        config = TrainConfig(s_values=(0.0, 1.0), precision=B64,
                             batch_size=16, epochs=1)
        record = run_paired(config, spec, tiny_data, theta0=theta0)
        assert record.first_zero_iteration == 0
        assert record.first_divergence_iteration[repr(1.0)] == 0
        gaps = record.gap_column(1.0)
        assert gaps[0] > 0

    def test_zero_upstream_kinks_do_not_split(self, tiny_data):
        # an all-zero network sits on the kink everywhere, but the zero
        # second layer kills the upstream, so no divergence can occur
        spec = NetworkSpec((6, 8, 3))
        theta0 = WeightVector(np.zeros(spec.param_count), B64)
        config = TrainConfig(s_values=(0.0, 1.0), precision=B64,
                             batch_size=16, epochs=1)
        record = run_paired(config, spec, tiny_data, theta0=theta0)
        assert record.first_zero_iteration == 0
        assert record.first_divergence_iteration == {}

    def test_gradient_explosion_carries_iteration(self, tiny_data):
        spec = NetworkSpec((6, 4, 3), precision=B16)
        data16 = make_synthetic(SyntheticSpec(n=96, d0=6, k=3, seed=1), B16)
        # saturated weights overflow the first forward pass
        theta0 = WeightVector(np.full(spec.param_count, 65504.0,
                                      dtype=np.float16), B16)
        config = TrainConfig(s_values=(0.0,), precision=B16,
                             batch_size=16, epochs=1)
        with pytest.raises(GradientExplosionError) as err:
            run_paired(config, spec, data16, include_sanity=False,
                       theta0=theta0)
        assert err.value.iteration == 0

    def test_dropout_masks_are_shared_across_trajectories(self, tiny_data):
        spec = NetworkSpec((6, 12, 3), dropout_prob=0.3)
        config = TrainConfig(s_values=(0.0, 1.0), precision=B64,
                             batch_size=16, epochs=2, dropout_seed=7)
        record = run_paired(config, spec, tiny_data)
        # no kinks at B64, so shared masks keep the runs bitwise equal
        assert record.first_zero_iteration is None
        assert np.all(record.gap_column(1.0) == 0.0)


class TestEvaluate:
    def test_oracle_weights_reach_full_accuracy(self):
        # one-hot features, identity-ish network: class = argmax feature
        spec = NetworkSpec((3, 3, 3))
        parts = unflatten(spec, init_kaiming_uniform(spec, 0))
        parts["W1"][:] = np.eye(3) * 5
        parts["b1"][:] = 0.1  # keep every relu strictly active
        parts["W2"][:] = np.eye(3) * 5
        parts["b2"][:] = 0
        theta = flatten(spec, parts)
        x = np.eye(3)[np.array([0, 1, 2, 1, 0])]
        data = Dataset(RoundedTensor.from_float64(x, B64),
                       np.array([0, 1, 2, 1, 0]), n_classes=3, split="test")
        acc, loss = evaluate(spec, theta, data)
        assert acc == 1.0
        assert loss >= 0

    def test_uniform_logits_score_chance_level(self):
        spec = NetworkSpec((4, 5, 10))
        theta = WeightVector(np.zeros(spec.param_count), B64)
        n = 1000
        rng = np.random.default_rng(0)
        labels = np.arange(n) % 10
        data = Dataset(RoundedTensor.from_float64(rng.random((n, 4)), B64),
                       labels, n_classes=10, split="test")
        acc, loss = evaluate(spec, theta, data)
        # argmax of constant logits picks class 0 -> exactly the class share
        assert acc == pytest.approx(0.1, abs=1e-12)
        assert loss == pytest.approx(np.log(10), rel=1e-10)

    def test_empty_dataset_rejected(self, tiny_data):
        spec = NetworkSpec((6, 4, 3))
        theta = init_kaiming_uniform(spec, 0)
        with pytest.raises(ValueError):
            evaluate(spec, theta, tiny_data.subset(0))


class TestGammaDraw:
    def test_gamma_lands_in_interval_and_replays(self):
        config = TrainConfig(gamma_interval=(0.01, 0.012), gamma_seed=11)
        g1 = draw_gamma(config)
        g2 = draw_gamma(config)
        assert g1 == g2
        assert 0.01 <= g1 < 0.012
