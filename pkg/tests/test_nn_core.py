import numpy as np
import pytest

from loadsynth.exceptions import NonFiniteGradientError, ShapeMismatchError
from loadsynth.services.nn_core import (
    Activation,
    AdamState,
    DenseNet,
    OutputActivation,
    adam_step,
    backward,
    forward,
    gradient_check,
    relative_error,
)


def _squared_output_check(net: DenseNet, batch: np.ndarray, with_region: bool):
    def objective():
        return 0.5 * float(np.sum(net.forward(batch) ** 2))

    out, cache = net.forward_cached(batch)
    grads, _ = net.backward(cache, out)
    region = (lambda: net.activation_pattern(net.forward_cached(batch)[1])) if with_region else None
    return gradient_check(objective, net.parameters(), grads, region=region)


def test_initialize_is_deterministic_and_shaped():
    net = DenseNet.initialize([5, 7, 3], Activation.RELU, seed=1)
    again = DenseNet.initialize([5, 7, 3], Activation.RELU, seed=1)
    assert [p.shape for p in net.parameters()] == [(5, 7), (7,), (7, 3), (3,)]
    for a, b in zip(net.parameters(), again.parameters()):
        np.testing.assert_array_equal(a, b)
    assert np.all(net.biases[0] == 0)
    assert np.max(np.abs(net.weights[0])) <= np.sqrt(6.0 / 5)


def test_forward_rejects_wrong_width():
    net = DenseNet.initialize([4, 3, 2], seed=0)
    assert forward(net, np.ones((6, 4))).shape == (6, 2)
    with pytest.raises(ShapeMismatchError):
        forward(net, np.ones((6, 5)))
    with pytest.raises(ShapeMismatchError):
        backward(net, np.ones((6, 4)), np.ones((6, 3)))


@pytest.mark.parametrize("output", list(OutputActivation))
def test_tanh_backprop_matches_finite_differences(output):
    rng = np.random.default_rng(3)
    net = DenseNet.initialize([6, 5, 4, 3], Activation.TANH, output, seed=2)
    report = _squared_output_check(net, rng.normal(size=(8, 6)), with_region=False)
    assert report.checked == sum(p.size for p in net.parameters())
    assert report.max_relative_error < 1e-4


def test_relu_backprop_matches_away_from_kinks():
    rng = np.random.default_rng(4)
    net = DenseNet.initialize([6, 10, 8, 3], Activation.RELU, seed=5)
    report = _squared_output_check(net, rng.normal(size=(12, 6)), with_region=True)
    total = sum(p.size for p in net.parameters())
    assert report.checked + report.skipped == total
    assert report.checked > 0.9 * total
    assert report.max_relative_error < 1e-4


def test_input_gradient():
    rng = np.random.default_rng(6)
    net = DenseNet.initialize([4, 6, 2], Activation.TANH, seed=0)
    batch = rng.normal(size=(3, 4))
    out = net.forward(batch)
    _, d_input = backward(net, batch, out)

    def objective():
        return 0.5 * float(np.sum(net.forward(batch) ** 2))

    report = gradient_check(objective, [batch], [d_input])
    assert report.max_relative_error < 1e-4


def test_adam_first_step_moves_by_learning_rate():
    params = [np.array([1.0, -2.0, 0.5])]
    grads = [np.array([0.3, -4.0, 2.0])]
    state = AdamState.for_params(params, learning_rate=0.01)
    adam_step(params, grads, state)
    np.testing.assert_allclose(params[0], [0.99, -1.99, 0.49], atol=1e-7)
    assert state.step == 1


def test_adam_refuses_non_finite_gradients():
    params = [np.array([1.0, 2.0])]
    state = AdamState.for_params(params)
    with pytest.raises(NonFiniteGradientError):
        adam_step(params, [np.array([np.nan, 1.0])], state)
    np.testing.assert_array_equal(params[0], [1.0, 2.0])
    assert state.step == 0
    with pytest.raises(ShapeMismatchError):
        adam_step(params, [np.ones(3)], state)


def test_relative_error_floor():
    assert relative_error(0.0, 1e-9) == pytest.approx(1e-4)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)


SHAPES = [
    [1, 1, 1],
    [2, 3, 1],
    [4, 8, 2],
    [5, 3, 3, 5],
    [10, 6, 6, 6, 2],
    [20, 16, 4],
    [7, 12],
]


@pytest.mark.parametrize("activation", list(Activation))
@pytest.mark.parametrize("sizes", SHAPES, ids=lambda s: "x".join(map(str, s)))
def test_backprop_across_shapes(sizes, activation):
    rng = np.random.default_rng(len(sizes) * 100 + sizes[0])
    net = DenseNet.initialize(sizes, activation, seed=sizes[-1])
    for b in net.biases:
        b += rng.normal(scale=0.1, size=b.shape)
    report = _squared_output_check(net, rng.normal(size=(5, sizes[0])), with_region=True)
    total = sum(p.size for p in net.parameters())
    assert report.checked + report.skipped == total
    assert report.checked > 0
    assert report.max_relative_error < 1e-4


@pytest.mark.parametrize("activation", list(Activation))
def test_forward_commutes_with_batch_order(activation):
    rng = np.random.default_rng(8)
    net = DenseNet.initialize([6, 9, 4], activation, seed=3)
    batch = rng.normal(size=(11, 6))
    order = rng.permutation(11)
    np.testing.assert_allclose(forward(net, batch[order]), forward(net, batch)[order], rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(forward(net, batch[:1]), forward(net, batch)[:1], rtol=1e-12, atol=1e-15)


def test_adam_zero_gradient_only_counts_the_step():
    params = [np.array([1.0, -2.0]), np.array([[0.5]])]
    state = AdamState.for_params(params, learning_rate=0.1)
    for _ in range(3):
        adam_step(params, [np.zeros(2), np.zeros((1, 1))], state)
    np.testing.assert_array_equal(params[0], [1.0, -2.0])
    np.testing.assert_array_equal(params[1], [[0.5]])
    assert state.step == 3


def test_adam_constant_gradient_moves_against_its_sign():
    params = [np.zeros(3)]
    state = AdamState.for_params(params, learning_rate=0.01)
    previous = params[0].copy()
    for _ in range(20):
        adam_step(params, [np.array([2.0, -0.5, 0.0])], state)
        assert params[0][0] < previous[0]
        assert params[0][1] > previous[1]
        previous = params[0].copy()
    assert params[0][2] == 0.0
    # bias-corrected Adam moves by about the learning rate per step under a constant gradient
    np.testing.assert_allclose(params[0][:2], [-0.2, 0.2], rtol=1e-5)
