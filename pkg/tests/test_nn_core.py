import numpy as np
import pytest

from twindrop.errors import ShapeError
from twindrop.nn_core import (
    AdamState,
    DenseLayer,
    DropoutSpec,
    RngStream,
    adam_step,
    dense_forward,
    dropout_mask,
    init_dense,
    stack_backward,
    stack_forward,
)

from oracles import finite_difference_grads, manual_forward


def test_dense_forward_identity():
    layer = DenseLayer(np.eye(2), np.zeros(2), "identity")
    out = dense_forward(layer, np.array([[3.0, -1.0]]))
    assert np.array_equal(out, [[3.0, -1.0]])


def test_dense_forward_relu_clamps():
    layer = DenseLayer(np.eye(2), np.zeros(2), "relu")
    out = dense_forward(layer, np.array([[3.0, -1.0]]))
    assert np.array_equal(out, [[3.0, 0.0]])


def test_dense_forward_hand_matmul():
    layer = DenseLayer(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([1.0, 1.0]))
    out = dense_forward(layer, np.array([[1.0, 1.0]]))
    assert np.array_equal(out, [[5.0, 7.0]])


def test_dense_forward_shape_error_names_both_shapes():
    layer = DenseLayer(np.eye(3), np.zeros(3))
    with pytest.raises(ShapeError) as err:
        dense_forward(layer, np.zeros((2, 2)))
    assert "(2, 2)" in str(err.value) and "(3, 3)" in str(err.value)


def test_dropout_rate_zero_is_all_ones():
    mask = dropout_mask((4, 5), DropoutSpec(0.0), RngStream(1))
    assert np.array_equal(mask, np.ones((4, 5)))


def test_dropout_mask_mean_near_one():
    mask = dropout_mask((1000, 1000), DropoutSpec(0.2), RngStream(0))
    assert abs(mask.mean() - 1.0) < 0.005


def test_dropout_mask_values_and_rate():
    spec = DropoutSpec(0.25)
    mask = dropout_mask(10_000, spec, RngStream(3))
    assert set(np.unique(mask)) == {0.0, 1.0 / 0.75}
    assert abs((mask == 0).mean() - 0.25) < 0.02


def test_dropout_mask_deterministic_across_fresh_streams():
    a = dropout_mask((6, 7), DropoutSpec(0.4), RngStream(42))
    b = dropout_mask((6, 7), DropoutSpec(0.4), RngStream(42))
    assert np.array_equal(a, b)


def test_dropout_spec_rejects_bad_rate():
    with pytest.raises(ValueError):
        DropoutSpec(1.0)
    with pytest.raises(ValueError):
        DropoutSpec(-0.1)


def test_rng_child_streams_differ_and_reproduce():
    root = RngStream(7)
    a = root.child(0).random(5)
    b = root.child(1).random(5)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, RngStream(7).child(0).random(5))


def test_backward_zero_params_zero_targets():
    layers = [
        DenseLayer(np.zeros((3, 4)), np.zeros(4), "relu"),
        DenseLayer(np.zeros((4, 1)), np.zeros(1), "identity"),
    ]
    x = np.array([[1.0, -2.0, 0.5], [0.3, 0.1, -0.7]])
    out, cache = stack_forward(layers, x)
    d_out = 2.0 * (out - 0.0) / x.shape[0]
    grads, _ = stack_backward(layers, cache, d_out)
    for dw, db in grads:
        assert np.array_equal(dw, np.zeros_like(dw))
        assert np.array_equal(db, np.zeros_like(db))


def _random_stack(rng, depth, width, d_in, d_out):
    layers = []
    prev = d_in
    for i in range(depth - 1):
        layers.append(init_dense(prev, width, "relu", rng.child(i)))
        prev = width
    layers.append(init_dense(prev, d_out, "identity", rng.child(depth)))
    return layers


def _safe_case(seed, depth, width, rows):
    """Random net and batch whose pre-activations stay away from ReLU kinks."""
    for attempt in range(50):
        rng = RngStream(seed + 1000 * attempt)
        layers = _random_stack(rng.child(0), depth, width, 3, 2)
        x = rng.child(1).normal(0.0, 1.0, (rows, 3))
        _, cache = stack_forward(layers, x)
        min_pre = min(np.abs(pre).min() for _, pre, _ in cache[:-1]) if depth > 1 else 1.0
        if min_pre > 1e-3:
            y = rng.child(2).normal(0.0, 1.0, (rows, 2))
            return layers, x, y
    raise AssertionError("no kink-free case found")


@pytest.mark.parametrize("seed,depth,width,rows", [
    (1, 2, 5, 4), (2, 3, 16, 8), (3, 3, 7, 3), (4, 1, 4, 5), (5, 2, 16, 8),
])
def test_gradients_match_finite_differences(seed, depth, width, rows):
    layers, x, y = _safe_case(seed, depth, width, rows)
    params = []
    for layer in layers:
        params.append(layer.weights)
        params.append(layer.bias)

    def loss():
        out, _ = stack_forward(layers, x)
        return float(np.mean(np.sum((out - y) ** 2, axis=1)))

    out, cache = stack_forward(layers, x)
    d_out = 2.0 * (out - y) / x.shape[0]
    analytic, _ = stack_backward(layers, cache, d_out)
    flat = [g for pair in analytic for g in pair]
    numeric = finite_difference_grads(loss, params, h=1e-5)
    for a, f in zip(flat, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)
        assert (np.abs(a - f) / denom < 1e-4).all()


def test_backward_reuses_forward_masks():
    rng = RngStream(11)
    layers = _random_stack(rng.child(0), 2, 6, 3, 1)
    x = rng.child(1).normal(0.0, 1.0, (4, 3))
    y = rng.child(2).normal(0.0, 1.0, (4, 1))
    spec = DropoutSpec(0.5)
    out, cache = stack_forward(layers, x, spec, rng.child(3), stochastic=True)
    masks = {i: cache[i][2] for i in range(len(layers)) if cache[i][2] is not None}
    assert masks, "expected at least one dropout site"

    d_out = 2.0 * (out - y) / x.shape[0]
    analytic, _ = stack_backward(layers, cache, d_out)
    flat = [g for pair in analytic for g in pair]
    params = []
    for layer in layers:
        params.append(layer.weights)
        params.append(layer.bias)

    def masked_loss():
        h = x @ layers[0].weights + layers[0].bias
        h = np.maximum(h, 0.0) * masks[0]
        o = h @ layers[1].weights + layers[1].bias
        return float(np.mean(np.sum((o - y) ** 2, axis=1)))

    numeric = finite_difference_grads(masked_loss, params, h=1e-5)
    for a, f in zip(flat, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)
        assert (np.abs(a - f) / denom < 1e-4).all()


def test_gradient_of_unused_output_rows_is_zero():
    # a head that saw no samples gets a zero upstream gradient and must
    # produce exactly zero parameter gradients
    rng = RngStream(5)
    layers = _random_stack(rng.child(0), 2, 4, 3, 1)
    x = rng.child(1).normal(0.0, 1.0, (3, 3))
    _, cache = stack_forward(layers, x)
    grads, _ = stack_backward(layers, cache, np.zeros((3, 1)))
    for dw, db in grads:
        assert np.array_equal(dw, np.zeros_like(dw))
        assert np.array_equal(db, np.zeros_like(db))


def test_inverted_dropout_preserves_expectation():
    # one masked hidden layer feeding a linear output: the deterministic
    # pass equals the mean over masked passes (exact in expectation)
    rng = RngStream(9)
    layers = _random_stack(rng.child(0), 2, 8, 3, 1)
    x = rng.child(1).normal(0.0, 1.0, (1, 3))
    h = np.maximum(x @ layers[0].weights + layers[0].bias, 0.0)
    deterministic = (h @ layers[1].weights + layers[1].bias)[0, 0]

    n = 100_000
    masks = dropout_mask((n, 8), DropoutSpec(0.2), rng.child(2))
    samples = (masks * h) @ layers[1].weights + layers[1].bias
    se = samples.std() / np.sqrt(n)
    assert abs(samples.mean() - deterministic) < 3 * se


def test_adam_zero_gradient_keeps_params():
    params = [np.array([1.0, -2.0]), np.array([[0.5]])]
    grads = [np.zeros(2), np.zeros((1, 1))]
    state = AdamState.for_params(params, weight_decay=0.0)
    new_params, new_state = adam_step(params, grads, state)
    assert all(np.array_equal(p, q) for p, q in zip(params, new_params))
    assert new_state.t == 1


def test_adam_first_step_magnitude():
    params = [np.array([0.3])]
    state = AdamState.for_params(params, lr=1e-3)
    new_params, _ = adam_step(params, [np.array([1.0])], state)
    assert abs((new_params[0][0] - 0.3) + 1e-3) < 1e-10


def test_adam_identical_tensors_identical_updates():
    params = [np.array([1.0, 2.0]), np.array([1.0, 2.0])]
    grads = [np.array([0.3, -0.4]), np.array([0.3, -0.4])]
    state = AdamState.for_params(params, weight_decay=1e-4)
    new_params, _ = adam_step(params, grads, state)
    assert np.array_equal(new_params[0], new_params[1])


def test_adam_decoupled_weight_decay():
    # with g = 0 but wd > 0 the parameter still shrinks by lr*wd*theta
    params = [np.array([2.0])]
    state = AdamState.for_params(params, lr=1e-3, weight_decay=0.1)
    new_params, _ = adam_step(params, [np.zeros(1)], state)
    assert new_params[0][0] == pytest.approx(2.0 - 1e-3 * 0.1 * 2.0, abs=1e-15)


def test_adam_shape_mismatch():
    params = [np.zeros(3)]
    state = AdamState.for_params(params)
    with pytest.raises(ShapeError):
        adam_step(params, [np.zeros(4)], state)


def test_manual_forward_oracle_agrees_deterministically():
    # the test-side oracle and the library agree on a deterministic pass
    rng = RngStream(21)
    layers = _random_stack(rng.child(0), 3, 6, 4, 2)
    x = rng.child(1).normal(0.0, 1.0, (5, 4))
    lib, _ = stack_forward(layers, x)
    ours = manual_forward(layers, x, {})
    assert np.allclose(lib, ours, rtol=0, atol=0)
