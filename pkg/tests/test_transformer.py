import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grokwl import tensor_core as tc
from grokwl import transformer as tf
from grokwl.modular_tasks import TaskKind, TaskSpec, make_split

from conftest import central_difference, rel_err

# 68*128 + 3*128 + 4*128*128 + 2*128*512 + 128*67, summed by hand
DEFAULT_PARAM_COUNT = 214_272


def test_default_parameter_count():
    cfg = tf.ModelConfig()
    assert sum(g.size for g in tf.build_layout(cfg)) == DEFAULT_PARAM_COUNT
    assert len(tf.init_params(cfg, 0)) == DEFAULT_PARAM_COUNT


def test_config_validation():
    with pytest.raises(ValueError):
        tf.ModelConfig(d_model=100, n_heads=4, d_head=32)
    cfg = tf.ModelConfig.with_width(67, 64, 256)
    assert (cfg.d_head, cfg.n_heads) == (16, 4)


def test_layout_tiles_flat_vector():
    layout = tf.build_layout(tf.ModelConfig())
    off = 0
    for g in layout:
        assert g.offset == off
        off += g.size
    with pytest.raises(ValueError):
        tf.ParamVector(tf.ModelConfig(), np.zeros(off + 1), layout)


def test_init_deterministic_and_inside_bounds(tiny_model):
    a = tf.init_params(tiny_model, 3)
    b = tf.init_params(tiny_model, 3)
    c = tf.init_params(tiny_model, 4)
    assert a.flat.tobytes() == b.flat.tobytes()
    assert not np.array_equal(a.flat, c.flat)
    bounds = a.bounds()
    assert np.all(np.abs(a.flat) <= bounds / 3.0)
    for g in a.layout:
        np.testing.assert_allclose(bounds[g.offset:g.offset + g.size], 3 / np.sqrt(g.fan_in))


def test_zero_parameters_give_zero_logits(tiny_model, tiny_batches):
    pv = tf.ParamVector(tiny_model, np.zeros(len(tf.init_params(tiny_model, 0))))
    logits = tf.forward_logits(pv, tiny_batches[0])
    assert logits.shape == (len(tiny_batches[0]), 7)
    assert np.all(logits == 0)


def test_row_permutation_equivariance(tiny_model, tiny_batches, rng):
    pv = tf.init_params(tiny_model, 1)
    train = tiny_batches[0]
    perm = rng.permutation(len(train))
    shuffled = tf.Batch(train.prompts[perm], train.targets[perm])
    np.testing.assert_allclose(tf.forward_logits(pv, shuffled), tf.forward_logits(pv, train)[perm],
                               rtol=0, atol=1e-13)


def test_batch_validation(tiny_model):
    with pytest.raises(tc.ShapeError):
        tf.Batch(np.zeros((3, 2)), np.zeros(3))
    pv = tf.init_params(tiny_model, 0)
    with pytest.raises(ValueError):
        tf.forward_logits(pv, tf.Batch(np.full((1, 3), 9), np.zeros(1)))


def test_cross_entropy_uniform_is_log_p():
    assert tf.cross_entropy(np.zeros((10, 67)), np.arange(10)) == pytest.approx(np.log(67), abs=1e-12)
    assert np.log(67) == pytest.approx(4.2047, abs=1e-4)


def test_cross_entropy_margin_and_sign(rng):
    logits = np.zeros((5, 67))
    targets = rng.integers(0, 67, 5)
    logits[np.arange(5), targets] = 3.0
    assert tf.cross_entropy(logits, targets) < np.log(67)
    assert tf.cross_entropy(rng.normal(size=(20, 67)) * 5, rng.integers(0, 67, 20)) >= 0


def test_cross_entropy_tensor_matches_array(rng):
    logits = rng.normal(size=(6, 5))
    targets = rng.integers(0, 5, 6)
    t = tf.cross_entropy(tc.constant(logits), targets)
    assert float(t.values) == pytest.approx(tf.cross_entropy(logits, targets), rel=1e-14)


def test_accuracy_cases(rng):
    logits = rng.normal(size=(30, 10))
    assert tf.accuracy(logits, logits.argmax(axis=1)) == 1.0
    # ties go to the lowest index
    assert tf.accuracy(np.zeros((4, 3)), np.zeros(4, dtype=int)) == 1.0
    with pytest.raises(ValueError):
        tf.accuracy(np.zeros((0, 3)), np.zeros(0, dtype=int))


def test_random_logits_accuracy_is_chance(rng):
    n = 200_000
    acc = tf.accuracy(rng.normal(size=(n, 67)), rng.integers(0, 67, n))
    assert acc == pytest.approx(1 / 67, abs=4 * np.sqrt((1 / 67) * (66 / 67) / n))
    assert round(acc, 3) == pytest.approx(0.015, abs=0.001)


def test_soft_accuracy_limits(rng):
    assert tf.soft_accuracy(np.zeros((5, 4)), np.arange(4).tolist() + [0]) == pytest.approx(0.5)
    logits = rng.normal(size=(50, 8))
    targets = logits.argmax(axis=1)
    assert tf.soft_accuracy(logits, targets, 1e6) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        tf.soft_accuracy(logits, targets, 0.0)


def test_soft_accuracy_tensor_matches_array(rng):
    logits = rng.normal(size=(9, 6))
    targets = rng.integers(0, 6, 9)
    t = tf.soft_accuracy(tc.constant(logits), targets, 7.0)
    assert float(t.values) == pytest.approx(tf.soft_accuracy(logits, targets, 7.0), rel=1e-14)


def test_soft_accuracy_approaches_accuracy_as_sharpness_grows(rng):
    logits = rng.normal(size=(400, 11))
    targets = rng.integers(0, 11, 400)
    exact = tf.accuracy(logits, targets)
    gaps = [abs(tf.soft_accuracy(logits, targets, k) - exact) for k in (1, 5, 50, 500, 5000)]
    assert all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 0.01


def test_weight_norm_and_rescale():
    assert tf.weight_norm(np.zeros(4)) == 0.0
    assert tf.weight_norm(np.array([3.0, 4.0])) == 5.0
    np.testing.assert_allclose(tf.rescale_to_norm(np.array([3.0, 4.0]), 30.0), [18.0, 24.0])
    x = np.array([3.0, 4.0])
    np.testing.assert_allclose(tf.rescale_to_norm(x, 5.0), x, rtol=1e-15)
    with pytest.raises(ValueError):
        tf.rescale_to_norm(np.zeros(3), 1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=40).filter(lambda v: np.linalg.norm(v) > 1e-3),
       st.floats(0.1, 500))
def test_rescale_properties(values, target):
    x = np.array(values)
    y = tf.rescale_to_norm(x, target)
    assert tf.weight_norm(y) == pytest.approx(target, abs=1e-9 * max(1.0, target))
    cos = x @ y / (np.linalg.norm(x) * np.linalg.norm(y))
    assert cos == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(tf.rescale_to_norm(y, target), y, rtol=1e-12)


def test_rescale_param_vector_keeps_layout(tiny_model):
    pv = tf.init_params(tiny_model, 0)
    out = tf.rescale_to_norm(pv, 30.0)
    assert out.layout == pv.layout
    assert tf.weight_norm(out) == pytest.approx(30.0, abs=1e-9)


def test_loss_gradient_matches_finite_differences(tiny_model, tiny_batches, rng):
    train = tiny_batches[0]
    pv = tf.init_params(tiny_model, 2)
    pv = tf.rescale_to_norm(pv, 6.0)          # larger weights -> less trivial attention
    _, grad, _ = tf.loss_and_grad(pv, train)

    def loss(flat):
        return tf.cross_entropy(tf.forward_logits(pv.with_flat(flat), train), train.targets)

    for idx in rng.choice(len(pv), size=40, replace=False):
        num = central_difference(loss, pv.flat, idx)
        assert rel_err(grad[idx], num) < 1e-6 or abs(grad[idx] - num) < 1e-11


def test_soft_accuracy_gradient_matches_finite_differences(tiny_model, tiny_batches, rng):
    test = tiny_batches[1]
    pv = tf.rescale_to_norm(tf.init_params(tiny_model, 5), 6.0)
    _, grad, _ = tf.soft_accuracy_and_grad(pv, test, 5.0)

    def sa(flat):
        return tf.soft_accuracy(tf.forward_logits(pv.with_flat(flat), test), test.targets, 5.0)

    for idx in rng.choice(len(pv), size=30, replace=False):
        num = central_difference(sa, pv.flat, idx)
        assert rel_err(grad[idx], num) < 1e-6 or abs(grad[idx] - num) < 1e-11


def test_group_views_write_through(tiny_model):
    pv = tf.init_params(tiny_model, 0)
    pv.group("W_U")[...] = 0.0
    g = next(g for g in pv.layout if g.name == "W_U")
    assert np.all(pv.flat[g.offset:g.offset + g.size] == 0.0)


def test_forward_reads_no_out_of_bound_parameters(tiny_model, tiny_batches, rng):
    pv = tf.init_params(tiny_model, 0)
    b = pv.bounds()
    inside = tf.ParamVector(tiny_model, rng.uniform(-1, 1, len(pv)) * b, pv.layout)
    _, grad, logits = tf.loss_and_grad(inside, tiny_batches[0])
    assert np.all(np.abs(inside.flat) <= b)
    assert np.all(np.isfinite(grad)) and np.all(np.isfinite(logits))


def test_log_softmax_keeps_tiny_probabilities():
    # margin 50: log p(top) = -log1p(exp(-50)) ~ -1.9e-22, far below eps
    x = np.array([[50.0, 0.0, -1.0]])
    ls = tc.log_softmax_array(x, 1)
    expected = -np.log1p(np.exp(-50.0) + np.exp(-51.0))
    assert ls[0, 0] == pytest.approx(expected, rel=1e-12)
    assert ls[0, 0] < 0.0
    assert tf.cross_entropy(x, np.array([0])) == pytest.approx(-expected, rel=1e-12)


def test_log_loss_underflow_is_not_an_error():
    lnL, g = tf.log_loss(0.0, np.zeros(3))
    assert lnL == pytest.approx(math.log(tf.LOSS_FLOOR))
    assert np.all(g == 0.0)
    with pytest.raises(ValueError):
        tf.log_loss(float("nan"), np.zeros(3))
    with pytest.raises(ValueError):
        tf.log_loss(-1.0, np.zeros(3))
