"""Fully connected network construction, instrumentation and persistence."""

import math

import numpy as np
import pytest

from relulab import (
    NetworkSpec,
    Precision,
    SubgradientPolicy,
    WeightVector,
    backprop,
    forward,
    init_kaiming_uniform,
    load_checkpoint,
    save_checkpoint,
)
from relulab.network import (
    BatchNormState,
    draw_dropout_masks,
    flatten,
    gradient_vector,
    layout_string,
    unflatten,
)
from relulab.streams import stream

B16, B32, B64 = Precision.B16, Precision.B32, Precision.B64


class TestSpec:
    def test_param_count(self):
        spec = NetworkSpec((784, 256, 128, 10))
        want = 256 * 785 + 128 * 257 + 10 * 129
        assert spec.param_count == want

    def test_param_count_with_batchnorm(self):
        spec = NetworkSpec((20, 8, 4), use_batchnorm=True)
        assert spec.param_count == 8 * 21 + 4 * 9 + 2 * 8

    def test_rejects_bad_sizes(self):
        with pytest.raises(ValueError):
            NetworkSpec((10,))
        with pytest.raises(ValueError):
            NetworkSpec((10, 0, 2))
        with pytest.raises(ValueError):
            NetworkSpec((10, 5, 2), dropout_prob=1.0)


class TestInit:
    def test_bound_for_mnist_fan_in(self):
        # fan-in 784: bound is sqrt(6)/28
        spec = NetworkSpec((784, 4, 2))
        theta = init_kaiming_uniform(spec, seed=0)
        w1 = unflatten(spec, theta)["W1"]
        alpha = math.sqrt(6) / math.sqrt(784)
        assert alpha == pytest.approx(0.0874817, abs=1e-7)
        assert np.abs(w1).max() <= alpha
        # values actually fill the interval
        assert np.abs(w1).max() > 0.9 * alpha

    def test_fan_in_six_gives_unit_bound(self):
        spec = NetworkSpec((6, 3, 2))
        theta = init_kaiming_uniform(spec, seed=1)
        w1 = unflatten(spec, theta)["W1"]
        assert np.abs(w1).max() <= 1.0

    def test_same_seed_is_bitwise_identical(self):
        spec = NetworkSpec((12, 7, 3), precision=B32)
        a = init_kaiming_uniform(spec, seed=5)
        b = init_kaiming_uniform(spec, seed=5)
        np.testing.assert_array_equal(a.values, b.values)
        c = init_kaiming_uniform(spec, seed=6)
        assert not np.array_equal(a.values, c.values)

    def test_batchnorm_params_start_at_identity(self):
        spec = NetworkSpec((5, 4, 3), use_batchnorm=True)
        parts = unflatten(spec, init_kaiming_uniform(spec, 0))
        np.testing.assert_array_equal(parts["bn1_scale"], np.ones(4))
        np.testing.assert_array_equal(parts["bn1_shift"], np.zeros(4))


class TestLayout:
    def test_flatten_unflatten_roundtrip_bitwise(self):
        spec = NetworkSpec((9, 6, 5, 3), use_batchnorm=(True, False), precision=B32)
        theta = init_kaiming_uniform(spec, seed=3)
        again = flatten(spec, unflatten(spec, theta))
        np.testing.assert_array_equal(theta.values, again.values)

    def test_layout_string_names_every_block(self):
        spec = NetworkSpec((9, 6, 3), use_batchnorm=True)
        assert layout_string(spec) == "W1,b1,W2,b2,bn1_scale,bn1_shift"


class TestForward:
    def test_zero_weight_network_sits_on_the_kink(self):
        # single sample, H = 1 hidden layer, all weights zero: loss ln 2,
        # every hidden pre-activation exactly zero
        spec = NetworkSpec((4, 8, 2))
        theta = WeightVector(np.zeros(spec.param_count), B64)
        x = np.full((1, 4), 0.3)
        trace, tape = forward(spec, theta, x, np.array([0]))
        assert trace.loss == pytest.approx(math.log(2), rel=1e-12)
        assert trace.exact_zero_count == (8,)
        assert trace.min_abs_preactivation == (0.0,)

    def test_random_b64_draws_never_hit_the_kink(self):
        rng = np.random.default_rng(0)
        spec = NetworkSpec((6, 5, 4, 3))
        x = rng.random((16, 6))
        y = rng.integers(0, 3, 16)
        for seed in range(1000):
            theta = init_kaiming_uniform(spec, seed=seed)
            trace, _ = forward(spec, theta, x, y)
            assert trace.total_zero_count == 0

    def test_forward_never_depends_on_s(self):
        spec = NetworkSpec((4, 8, 2))
        theta = WeightVector(np.zeros(spec.param_count), B64)  # all kinks
        x = np.full((2, 4), 0.5)
        y = np.array([0, 1])
        t0, _ = forward(spec, theta, x, y)
        t1, _ = forward(spec, theta, x, y)
        assert t0.loss == t1.loss
        np.testing.assert_array_equal(t0.logits, t1.logits)

    def test_softmax_rows_sum_to_one_at_b64(self):
        rng = np.random.default_rng(4)
        spec = NetworkSpec((5, 6, 4))
        theta = init_kaiming_uniform(spec, 2)
        trace, _ = forward(spec, theta, rng.random((32, 5)), rng.integers(0, 4, 32))
        z = trace.logits.astype(np.float64)
        probs = np.exp(z - z.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_zero_count_matches_kink_multiplications(self):
        spec = NetworkSpec((3, 5, 2))
        parts = unflatten(spec, init_kaiming_uniform(spec, 7))
        parts["W1"][:, 2] = 0  # plant one dead column -> zero pre-activation
        parts["b1"][2] = 0
        theta = flatten(spec, parts)
        x = np.random.default_rng(1).random((4, 3))
        trace, tape = forward(spec, theta, x, np.array([0, 1, 0, 1]))
        assert trace.exact_zero_count == (4,)
        res = backprop(tape, SubgradientPolicy(1.0))
        assert res.exact_zero_count == 4

    def test_shape_mismatch(self):
        spec = NetworkSpec((4, 3, 2))
        theta = init_kaiming_uniform(spec, 0)
        with pytest.raises(ValueError):
            forward(spec, theta, np.ones((2, 5)), np.array([0, 1]))

    def test_gradient_vector_layout(self):
        spec = NetworkSpec((4, 3, 2), precision=B32)
        theta = init_kaiming_uniform(spec, 0)
        x = np.random.default_rng(2).random((8, 4)).astype(np.float32)
        trace, tape = forward(spec, theta, x, np.zeros(8, dtype=np.int64))
        res = backprop(tape, SubgradientPolicy(0.0))
        g = gradient_vector(spec, tape, res.grads)
        assert g.values.shape == theta.values.shape
        assert g.values.dtype == np.float32


class TestBatchNorm:
    def test_two_point_column_standardizes(self):
        spec = NetworkSpec((1, 1, 2), use_batchnorm=True)
        parts = unflatten(spec, init_kaiming_uniform(spec, 0))
        parts["W1"][:] = 1.0
        parts["b1"][:] = 0.0
        theta = flatten(spec, parts)
        x = np.array([[1.0], [3.0]])
        trace, tape = forward(spec, theta, x, np.array([0, 1]),
                              bn_state=BatchNormState.fresh(spec))
        pre = trace.preactivations[0].reshape(-1)
        np.testing.assert_allclose(pre, [-1.0, 1.0], atol=1e-4)

    def test_zero_scale_outputs_shift(self):
        spec = NetworkSpec((2, 3, 2), use_batchnorm=True)
        parts = unflatten(spec, init_kaiming_uniform(spec, 1))
        parts["bn1_scale"][:] = 0.0
        parts["bn1_shift"][:] = 0.25
        theta = flatten(spec, parts)
        x = np.random.default_rng(0).random((5, 2))
        trace, _ = forward(spec, theta, x, np.zeros(5, dtype=np.int64))
        np.testing.assert_array_equal(trace.preactivations[0],
                                      np.full((5, 3), 0.25))

    def test_eval_mode_with_unit_running_stats_is_affine_only(self):
        spec = NetworkSpec((2, 2, 2), use_batchnorm=True)
        parts = unflatten(spec, init_kaiming_uniform(spec, 2))
        parts["bn1_scale"][:] = 1.0
        parts["bn1_shift"][:] = 0.0
        theta = flatten(spec, parts)
        st = BatchNormState.fresh(spec)  # mean 0, var 1
        x = np.random.default_rng(3).random((4, 2))
        trace, _ = forward(spec, theta, x, np.zeros(4, dtype=np.int64),
                           mode="eval", bn_state=st)
        # (x - 0) / sqrt(1 + eps): just a tiny uniform shrink of the affine map
        raw = x @ parts["W1"].astype(np.float64) + parts["b1"].astype(np.float64)
        np.testing.assert_allclose(trace.preactivations[0], raw, rtol=1e-4)

    def test_batch_of_one_rejected_in_train_mode(self):
        spec = NetworkSpec((2, 2, 2), use_batchnorm=True)
        theta = init_kaiming_uniform(spec, 0)
        with pytest.raises(ValueError):
            forward(spec, theta, np.ones((1, 2)), np.array([0]))

    def test_running_stats_move_toward_batch_stats(self):
        spec = NetworkSpec((2, 2, 2), use_batchnorm=True)
        theta = init_kaiming_uniform(spec, 4)
        st = BatchNormState.fresh(spec)
        x = np.random.default_rng(5).random((16, 2))
        forward(spec, theta, x, np.zeros(16, dtype=np.int64),
                bn_state=st, update_bn_stats=True)
        assert not np.array_equal(st.running_mean[0], np.zeros(2))
        assert not np.array_equal(st.running_var[0], np.ones(2))


class TestDropout:
    def test_prob_zero_is_identity(self):
        spec = NetworkSpec((3, 4, 2), dropout_prob=0.0)
        theta = init_kaiming_uniform(spec, 0)
        x = np.random.default_rng(0).random((4, 3))
        y = np.zeros(4, dtype=np.int64)
        a, _ = forward(spec, theta, x, y, mode="train")
        b, _ = forward(spec, theta, x, y, mode="eval")
        assert a.loss == b.loss

    def test_eval_mode_ignores_dropout(self):
        spec = NetworkSpec((3, 4, 2), dropout_prob=0.5)
        theta = init_kaiming_uniform(spec, 0)
        x = np.random.default_rng(0).random((4, 3))
        y = np.zeros(4, dtype=np.int64)
        nodrop = NetworkSpec((3, 4, 2))
        a, _ = forward(spec, theta, x, y, mode="eval")
        b, _ = forward(nodrop, theta, x, y, mode="eval")
        assert a.loss == b.loss

    def test_survivor_fraction_concentrates(self):
        spec = NetworkSpec((2, 10**6, 2), dropout_prob=0.5)
        masks = draw_dropout_masks(spec, 1, stream(0, "dropout"))
        frac = np.count_nonzero(masks[0]) / masks[0].size
        assert abs(frac - 0.5) < 0.002
        # survivors carry the inverted scale
        assert masks[0].max() == 2.0

    def test_train_mode_requires_masks(self):
        spec = NetworkSpec((3, 4, 2), dropout_prob=0.5)
        theta = init_kaiming_uniform(spec, 0)
        with pytest.raises(ValueError):
            forward(spec, theta, np.ones((2, 3)), np.array([0, 1]), mode="train")


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        spec = NetworkSpec((7, 5, 3), precision=B16)
        theta = init_kaiming_uniform(spec, 9)
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, spec, theta, metadata={"note": "fixture"})
        spec2, theta2, meta = load_checkpoint(path)
        assert spec2 == spec
        np.testing.assert_array_equal(theta.values, theta2.values)
        assert meta == {"note": "fixture"}
        assert (tmp_path / "net.ckpt.json").exists()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(IOError):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        spec = NetworkSpec((4, 3, 2))
        theta = init_kaiming_uniform(spec, 0)
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, spec, theta)
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(IOError):
            load_checkpoint(path)
