import numpy as np
import pytest
from scipy import signal

from app.models.training import AdamState
from app.services.autodiff import (
    BatchNormState,
    Parameter,
    Tape,
    Tensor,
    adam_step,
    batchnorm,
    compute_fans,
    conv2d,
    cross_entropy,
    glorot_uniform_init,
    gru_bidirectional,
    linear,
    maxpool,
    no_grad,
    relu,
    softmax,
    time_average,
    total,
    zeros_init,
)
from app.utils.errors import DataError, ShapeError
from tests.helpers import check_gradients

SEEDS = range(20)


def projected(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Scalar <out, w> with a fixed random w so every output entry contributes"""
    weights = Tensor(rng.standard_normal(out.shape))
    return total(out * weights)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 2, 3, 7))
    kernels = rng.standard_normal((3, 2, 3, 3))
    bias = rng.standard_normal(3)
    weights = rng.standard_normal((2, 3, 3, 7))

    check_gradients(lambda a, k, b: total(conv2d(a, k, b) * Tensor(weights)), [x, kernels, bias])


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_strided_valid_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 1, 4, 9))
    kernels = rng.standard_normal((2, 1, 4, 3))
    out_shape = conv2d(Tensor(x), Tensor(kernels), stride=(1, 2), padding="valid").shape
    weights = rng.standard_normal(out_shape)

    check_gradients(
        lambda a, k: total(conv2d(a, k, stride=(1, 2), padding="valid") * Tensor(weights)), [x, kernels]
    )


def test_conv2d_matches_cross_correlation():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 1, 4, 6))
    k = rng.standard_normal((1, 1, 3, 3))

    out = conv2d(Tensor(x), Tensor(k)).data

    np.testing.assert_allclose(out[0, 0], signal.correlate2d(x[0, 0], k[0, 0], mode="same"), atol=1e-12)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 2, 1, 5))), Tensor(np.zeros((1, 3, 1, 3))))


@pytest.mark.parametrize("seed", SEEDS)
def test_batchnorm_training_gradients(seed):
    rng = np.random.default_rng(seed)
    x = 2.0 + 3.0 * rng.standard_normal((4, 3, 1, 5))
    gamma = 1.0 + 0.1 * rng.standard_normal(3)
    beta = rng.standard_normal(3)
    weights = rng.standard_normal(x.shape)
    state = BatchNormState(3, dtype=np.float64)

    check_gradients(lambda a, g, b: total(batchnorm(a, g, b, state, True) * Tensor(weights)), [x, gamma, beta])


@pytest.mark.parametrize("seed", SEEDS[:5])
def test_batchnorm_eval_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 1, 4))
    state = BatchNormState(3, dtype=np.float64)
    state.running_mean = rng.standard_normal(3)
    state.running_var = rng.uniform(0.5, 2.0, 3)
    weights = rng.standard_normal(x.shape)

    check_gradients(
        lambda a, g, b: total(batchnorm(a, g, b, state, False) * Tensor(weights)),
        [x, rng.standard_normal(3), rng.standard_normal(3)],
    )


def test_batchnorm_fixed_point():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((8, 2, 1, 10))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    state = BatchNormState(2, dtype=np.float64)
    # Varians bias 1 - eps: normalisasi tepat identitas
    x = x * np.sqrt(1 - state.eps)

    out = batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, True)

    np.testing.assert_allclose(out.data, x, atol=1e-6)


def test_batchnorm_running_statistics():
    rng = np.random.default_rng(1)
    x = 5.0 + 2.0 * rng.standard_normal((6, 1, 1, 10))
    state = BatchNormState(1, dtype=np.float64)

    batchnorm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), state, True)

    np.testing.assert_allclose(state.running_mean, 0.1 * x.mean())
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(ddof=1))

    out = batchnorm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), state, False)
    expected = (x - state.running_mean[0]) / np.sqrt(state.running_var[0] + state.eps)
    np.testing.assert_allclose(out.data, expected)


def test_batchnorm_needs_two_values_in_training():
    with pytest.raises(ShapeError):
        batchnorm(Tensor(np.zeros((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                  BatchNormState(2, dtype=np.float64), True)


@pytest.mark.parametrize("seed", SEEDS)
def test_relu_gradients(seed):
    rng = np.random.default_rng(seed)
    # Jauh dari titik patah di 0
    x = rng.uniform(0.1, 1.0, (3, 8)) * rng.choice([-1.0, 1.0], (3, 8))

    check_gradients(lambda a: projected(relu(a), np.random.default_rng(seed)), [x])


@pytest.mark.parametrize("seed", SEEDS)
def test_maxpool_gradients(seed):
    rng = np.random.default_rng(seed)
    # Nilai berjarak 0.1: tidak ada seri dalam langkah beda hingga
    x = 0.1 * rng.permutation(2 * 3 * 7).reshape(2, 3, 1, 7).astype(np.float64)

    check_gradients(lambda a: projected(maxpool(a, (1, 2)), np.random.default_rng(seed)), [x])


def test_maxpool_odd_length_and_ties():
    x = Tensor(np.array([[[[1.0, 1.0, 3.0, 2.0, 5.0]]]]), requires_grad=True)

    out = maxpool(x, (1, 2))
    out.backward(np.ones(out.shape))

    np.testing.assert_array_equal(out.data, [[[[1.0, 3.0, 5.0]]]])
    np.testing.assert_array_equal(x.grad, [[[[1.0, 0.0, 1.0, 0.0, 1.0]]]])


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 5, 6))

    check_gradients(lambda a: projected(softmax(a, axis=1), np.random.default_rng(seed)), [x])


def test_softmax_on_simplex():
    x = np.random.default_rng(0).standard_normal((3, 5, 4)) * 50

    y = softmax(Tensor(x), axis=1).data

    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(y >= 0)


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_gradients(seed):
    rng = np.random.default_rng(seed)
    inputs = [rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5)), rng.standard_normal(5)]

    check_gradients(lambda a, w, b: projected(linear(a, w, b), np.random.default_rng(seed)), inputs)


def test_linear_shape_mismatch():
    with pytest.raises(ShapeError):
        linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


@pytest.mark.parametrize("seed", SEEDS)
def test_gru_gradients(seed):
    rng = np.random.default_rng(seed)
    features, hidden = 3, 4
    inputs = [0.5 * rng.standard_normal((2, 5, features))]
    for _ in range(2):
        inputs += [
            0.5 * rng.standard_normal((features, 3 * hidden)),
            0.5 * rng.standard_normal((hidden, 3 * hidden)),
            0.1 * rng.standard_normal(3 * hidden),
        ]

    def build(x, wxf, whf, bf, wxb, whb, bb):
        return projected(gru_bidirectional(x, (wxf, whf, bf), (wxb, whb, bb)), np.random.default_rng(seed))

    check_gradients(build, inputs)


def test_gru_directions_read_opposite_ends():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 6, 2))
    params = [Tensor(rng.standard_normal(s)) for s in ((2, 9), (3, 9), (9,))]
    changed = x.copy()
    changed[0, -1] += 1.0

    base = gru_bidirectional(Tensor(x), params, params).data
    moved = gru_bidirectional(Tensor(changed), params, params).data

    assert base.shape == (1, 6, 6)
    # Perubahan di langkah terakhir tidak mempengaruhi state maju sebelumnya
    np.testing.assert_array_equal(base[0, :-1, :3], moved[0, :-1, :3])
    assert not np.allclose(base[0, 0, 3:], moved[0, 0, 3:])


@pytest.mark.parametrize("seed", SEEDS)
def test_loss_through_window_average_gradients(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((2, 5, 12))
    stages = rng.integers(0, 5, size=(2, 4))
    targets = np.zeros((2, 5, 4))
    for b in range(2):
        targets[b, stages[b], np.arange(4)] = 1.0
    mask = np.ones((2, 4), dtype=bool)
    mask[1, 2] = False

    check_gradients(lambda a: cross_entropy(time_average(softmax(a, axis=1), 3), targets, mask), [logits])


def test_cross_entropy_value_and_mask():
    p = Tensor(np.array([[[0.5, 0.9], [0.5, 0.1]]]))
    targets = np.array([[[1.0, 0.0], [0.0, 1.0]]])

    value = cross_entropy(p, targets, np.array([[True, False]])).data

    assert value == pytest.approx(-np.log(0.5))
    with pytest.raises(DataError):
        cross_entropy(p, targets, np.array([[False, False]]))


def test_time_average_requires_divisible_window():
    with pytest.raises(ShapeError):
        time_average(Tensor(np.zeros((1, 5, 10))), 3)


def test_gradients_accumulate_over_reuse():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)

    total(x * x + x).backward()

    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_broadcast_gradients_are_reduced():
    a = Tensor(np.ones((3, 1)), requires_grad=True)
    b = Tensor(np.ones(4), requires_grad=True)

    total(a + b).backward()

    np.testing.assert_array_equal(a.grad, np.full((3, 1), 4.0))
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


def test_intermediate_gradients_are_released():
    x = Tensor(np.ones(3), requires_grad=True)
    h = x * 2.0
    loss = total(h)

    loss.backward()

    assert h.grad is None
    np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])


def test_tape_orders_inputs_before_consumers():
    x = Tensor(np.ones(2), requires_grad=True)
    h = x * 3.0
    y = total(h + x)

    nodes = Tape.from_graph(y).nodes

    assert nodes.index(x) < nodes.index(h) < nodes.index(y)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)

    with no_grad():
        y = total(x * 2.0)

    assert not y.requires_grad
    assert y.parents == ()
    with pytest.raises(ShapeError):
        y.backward()


def test_backward_needs_scalar_or_explicit_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_adam_first_step_moves_by_learning_rate():
    param = Parameter(np.array([1.0, -2.0, 3.0]), name="w")
    state = AdamState(lr=0.01)

    adam_step({"w": param}, {"w": np.array([0.5, -0.1, 0.0])}, state)

    np.testing.assert_allclose(param.data, [0.99, -1.99, 3.0], atol=1e-6)
    assert state.t == 1


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("lr", [1e-3, 3e-3, 1e-2])
def test_adam_shrinks_quadratic_every_step(seed, lr):
    rng = np.random.default_rng(seed)
    # |theta| >= 1.5 > 100 * lr: tidak pernah melewati nol
    theta = rng.uniform(1.5, 3.0, size=4) * rng.choice([-1.0, 1.0], size=4)
    param = Parameter(theta.copy(), name="theta")
    state = AdamState(lr=lr)

    previous = np.abs(param.data).copy()
    for _ in range(100):
        adam_step({"theta": param}, {"theta": 2.0 * param.data}, state)
        current = np.abs(param.data)
        assert np.all(current < previous)
        previous = current.copy()
    assert state.t == 100


def test_weight_decay_only_on_decayed_parameters():
    decayed = Parameter(np.ones(3), name="w", decay=True)
    plain = zeros_init((3,), dtype=np.float64, name="b")
    plain.data += 1.0
    state = AdamState(lr=0.01, weight_decay=0.1)

    adam_step({"w": decayed, "b": plain}, {"w": np.zeros(3), "b": np.zeros(3)}, state)

    np.testing.assert_allclose(decayed.data, 0.99, atol=1e-6)
    np.testing.assert_array_equal(plain.data, 1.0)


def test_adam_rejects_mismatched_gradient():
    param = Parameter(np.ones(3), name="w")
    with pytest.raises(ShapeError):
        adam_step({"w": param}, {"w": np.ones(4)}, AdamState())


def test_compute_fans():
    assert compute_fans((5, 3)) == (5, 3)
    assert compute_fans((16, 4, 1, 3)) == (12, 48)
    with pytest.raises(ShapeError):
        compute_fans(())


def test_glorot_uniform_bounds():
    shape = (16, 4, 1, 51)
    param = glorot_uniform_init(shape, np.random.default_rng(0), dtype=np.float64)
    bound = np.sqrt(6.0 / (4 * 51 + 16 * 51))

    assert param.decay
    assert np.abs(param.data).max() <= bound
    assert param.data.std() == pytest.approx(bound / np.sqrt(3), rel=0.1)
