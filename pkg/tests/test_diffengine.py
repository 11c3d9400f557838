"""Forward-value oracles and gradient checks for every registered op."""

import numpy as np
import pytest

from terralign import diffengine as de
from terralign.diffengine import Tape, Tensor
from terralign.errors import (
    ConfigError,
    DegenerateInputError,
    DimensionError,
    NumericalError,
)

# ---------------------------------------------------------------------------
# hand-computed forward values
# ---------------------------------------------------------------------------


def test_conv1d_identity_kernel():
    out = de.conv1d(np.array([[1.0, 2, 3, 4, 5]]), np.ones((1, 1, 1)), stride=1, padding=0)
    np.testing.assert_allclose(out.data, [[1, 2, 3, 4, 5]])


def test_conv1d_zero_kernel():
    out = de.conv1d(np.arange(8.0).reshape(2, 4), np.zeros((3, 2, 2)), stride=1, padding=0)
    assert np.all(out.data == 0)


def test_conv1d_sliding_dot_product():
    # (1, 2, 3) * kernel (1, 1): windows 1+2 and 2+3
    out = de.conv1d(np.array([[1.0, 2, 3]]), np.ones((1, 1, 2)), stride=1, padding=0)
    np.testing.assert_allclose(out.data, [[3.0, 5.0]])


def test_conv1d_output_length_and_errors():
    x = np.zeros((2, 10))
    out = de.conv1d(x, np.zeros((1, 2, 3)), stride=2, padding=1)
    assert out.shape == (1, 5)
    with pytest.raises(DimensionError):
        de.conv1d(x, np.zeros((1, 3, 3)))  # channel mismatch
    with pytest.raises(DimensionError):
        de.conv1d(np.zeros((2, 2)), np.zeros((1, 2, 5)))  # too short
    with pytest.raises(ConfigError):
        de.conv1d(x, np.zeros((1, 2, 3)), stride=0)


def test_group_norm_constant_input_maps_to_beta():
    x = np.full((2, 6), 3.7, dtype=np.float32)
    out = de.group_norm(x, np.ones(2), np.zeros(2), groups=1)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-4)
    out = de.group_norm(x, np.ones(2), np.full(2, 1.5), groups=2)
    np.testing.assert_allclose(out.data, 1.5, atol=1e-4)


def test_group_norm_hand_arithmetic():
    # mean 2, population std sqrt(2/3)
    out = de.group_norm(np.array([[1.0, 2.0, 3.0]]), np.ones(1), np.zeros(1), groups=1, eps=1e-10)
    np.testing.assert_allclose(out.data, [[-1.2247449, 0.0, 1.2247449]], atol=1e-4)


def test_group_norm_errors():
    with pytest.raises(ConfigError):
        de.group_norm(np.zeros((3, 4)), np.ones(3), np.zeros(3), groups=2)
    with pytest.raises(ConfigError):
        de.group_norm(np.zeros((2, 4)), np.ones(2), np.zeros(2), groups=1, eps=0.0)


def test_group_norm_moments_property(rng):
    x = rng.standard_normal((3, 8, 10)).astype(np.float32) * 3 + 1
    out = de.group_norm(x, np.ones(8), np.zeros(8), groups=4)
    grouped = out.data.reshape(3, 4, 20)
    np.testing.assert_allclose(grouped.mean(axis=-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(grouped.var(axis=-1), 1.0, atol=1e-4)


def test_instance_norm_hand_arithmetic():
    out = de.instance_norm(np.array([[2.0, 4.0, 6.0]]), eps=1e-10)
    np.testing.assert_allclose(out.data, [[-1.2247449, 0.0, 1.2247449]], atol=1e-4)


def test_instance_norm_idempotent_and_constant(rng):
    x = rng.standard_normal((4, 16)).astype(np.float32)
    once = de.instance_norm(x).data
    twice = de.instance_norm(once).data
    np.testing.assert_allclose(twice, once, atol=1e-5)
    const = de.instance_norm(np.full((2, 8), 5.0)).data
    np.testing.assert_allclose(const, 0.0, atol=1e-3)


def test_instance_norm_moments(rng):
    x = (rng.standard_normal((2, 5, 40)) * 2.5 - 1.0).astype(np.float32)
    out = de.instance_norm(x).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)


def test_l2_normalize_cases():
    np.testing.assert_allclose(
        de.l2_normalize(np.array([3.0, 4.0])).data, [0.6, 0.8], atol=1e-6
    )
    unit = np.array([0.0, 1.0])
    np.testing.assert_allclose(de.l2_normalize(unit).data, unit, atol=1e-6)
    np.testing.assert_allclose(
        de.l2_normalize(np.array([1.0, 1.0])).data, [0.70710678] * 2, atol=1e-6
    )
    with pytest.raises(DegenerateInputError):
        de.l2_normalize(np.zeros(3))
    out = de.l2_normalize(np.random.default_rng(0).standard_normal((5, 7)))
    np.testing.assert_allclose(np.linalg.norm(out.data, axis=-1), 1.0, atol=1e-6)


def test_relu_mean_pool_linear_trivia():
    np.testing.assert_allclose(de.relu(np.array([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    const = np.full((3, 10), 4.25, dtype=np.float32)
    np.testing.assert_allclose(de.mean_pool(const).data, 4.25, atol=1e-6)
    x = np.random.default_rng(0).standard_normal((4, 5)).astype(np.float32)
    out = de.linear(x, np.eye(5, dtype=np.float32), np.zeros(5, dtype=np.float32))
    np.testing.assert_allclose(out.data, x, atol=1e-6)


def test_log_softmax_rows_and_cols():
    x = np.array([[1.0, 1.0], [1.0, 1.0]])
    np.testing.assert_allclose(de.log_softmax(x, axis=1).data, np.log(0.5), atol=1e-6)
    x = np.array([[0.0, 100.0]])
    out = de.log_softmax(x, axis=1).data  # large logits stay finite
    assert np.all(np.isfinite(out))


def test_finite_guard_raises():
    with pytest.raises(NumericalError):
        de.exp(Tensor(np.array([1000.0])))  # overflow to inf


# ---------------------------------------------------------------------------
# backward mechanics
# ---------------------------------------------------------------------------


def test_square_gradient_at_three():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = de.sum_all(de.mul(x, x))
    de.backward(tape, loss)
    np.testing.assert_allclose(x.grad, [6.0], atol=1e-6)


def test_constant_function_zero_gradient():
    x = Tensor([2.0, -1.0], requires_grad=True)
    with Tape() as tape:
        loss = de.sum_all(de.sub(x, x))
    de.backward(tape, loss)
    np.testing.assert_allclose(x.grad, [0.0, 0.0])


def test_gradients_accumulate_additively():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        loss = de.sum_all(de.scale(x, 2.0))
    de.backward(tape, loss)
    de.backward(tape, loss)  # second pass adds on top
    np.testing.assert_allclose(x.grad, [4.0])
    x.zero_grad()
    np.testing.assert_allclose(x.grad, [0.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = de.scale(x, 1.0)
    with pytest.raises(DimensionError):
        de.backward(tape, y)


def test_tape_orders_ops_topologically():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        y = de.scale(x, 2.0)
        z = de.mul(y, y)
        loss = de.sum_all(z)
    outputs = [op[0] for op in tape.ops]
    assert outputs.index(y) < outputs.index(z) < outputs.index(loss)


def test_forward_without_tape_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    y = de.scale(x, 3.0)
    assert y.requires_grad
    tape = Tape()
    assert len(tape) == 0


# ---------------------------------------------------------------------------
# gradient sweep over every registered op
# ---------------------------------------------------------------------------


def _op_cases(rng):
    """One scalar-valued case per registered op (inputs kept off relu kinks)."""
    safe = lambda *shape: (rng.random(shape) + 0.1) * np.sign(rng.standard_normal(shape))
    h = 3
    return {
        "add": (lambda a, b: de.mean_all(de.add(a, b)), [safe(4, 3), safe(4, 3)]),
        "sub": (lambda a, b: de.mean_all(de.sub(a, b)), [safe(4, 3), safe(4, 3)]),
        "mul": (lambda a, b: de.mean_all(de.mul(a, b)), [safe(4, 3), safe(4, 3)]),
        "scale": (lambda a: de.mean_all(de.scale(a, -1.7)), [safe(5)]),
        "exp": (lambda a: de.mean_all(de.exp(a)), [rng.uniform(-1, 1, (3, 3))]),
        "relu": (lambda a: de.mean_all(de.relu(a)), [safe(6, 2)]),
        "sigmoid": (lambda a: de.mean_all(de.sigmoid(a)), [rng.uniform(-2, 2, (4,))]),
        "tanh": (lambda a: de.mean_all(de.tanh(a)), [rng.uniform(-2, 2, (4,))]),
        "matmul": (lambda a, b: de.mean_all(de.matmul(a, b)), [safe(3, 4), safe(4, 2)]),
        "linear": (
            lambda x, w, b: de.mean_all(de.linear(x, w, b)),
            [safe(3, 4), safe(2, 4), safe(2)],
        ),
        "conv1d": (
            lambda x, w, b: de.mean_all(de.conv1d(x, w, b, stride=2, padding=1)),
            [safe(2, 3, 8), safe(4, 3, 3), safe(4)],
        ),
        "conv2d": (
            lambda x, w, b: de.mean_all(de.conv2d(x, w, b, stride=2, padding=1)),
            [safe(2, 2, 6, 6), safe(3, 2, 3, 3), safe(3)],
        ),
        "group_norm": (
            lambda x, g, b: de.mean_all(de.mul(de.group_norm(x, g, b, groups=2), x)),
            [safe(2, 4, 5), safe(4), safe(4)],
        ),
        "instance_norm": (
            lambda x, y: de.mean_all(de.mul(de.instance_norm(x), y)),
            [safe(2, 3, 6), safe(2, 3, 6)],
        ),
        "mean_pool": (lambda x: de.mean_all(de.mean_pool(x)), [safe(2, 3, 7)]),
        "l2_normalize": (
            lambda x, y: de.mean_all(de.mul(de.l2_normalize(x), y)),
            [safe(3, 5) + np.sign(safe(3, 5)), safe(3, 5)],
        ),
        "log_softmax": (
            lambda x, y: de.mean_all(de.mul(de.log_softmax(x, axis=1), y)),
            [safe(4, 4), safe(4, 4)],
        ),
        "take_diag": (lambda x: de.mean_all(de.take_diag(x)), [safe(4, 4)]),
        "concat": (
            lambda a, b: de.mean_all(de.mul(de.concat([a, b], axis=1), de.concat([b, a], axis=1))),
            [safe(3, 2), safe(3, 2)],
        ),
        "slice_last": (lambda x: de.mean_all(de.slice_last(x, 1, 4)), [safe(3, 6)]),
        "reshape": (lambda x: de.mean_all(de.mul(de.reshape(x, (6, 2)), de.reshape(x, (6, 2)))), [safe(3, 4)]),
        "swap_last2": (lambda x, y: de.mean_all(de.mul(de.swap_last2(x), y)), [safe(3, 4), safe(4, 3)]),
        "pad_replicate": (
            lambda x, y: de.mean_all(de.mul(de.pad_replicate(x, 7), y)),
            [safe(2, 3), safe(2, 7)],
        ),
        "sum_all": (lambda x: de.sum_all(x), [safe(4, 2)]),
        "mean_all": (lambda x: de.mean_all(de.mul(x, x)), [safe(5)]),
        "gru_sequence": (
            lambda x, h0, wi, wh, bi, bh: de.mean_all(
                de.gru_sequence(x, h0, wi, wh, bi, bh)
            ),
            [
                rng.uniform(-1, 1, (2, 4, 3)),
                rng.uniform(-1, 1, (2, h)),
                rng.uniform(-0.5, 0.5, (3 * h, 3)),
                rng.uniform(-0.5, 0.5, (3 * h, h)),
                rng.uniform(-0.5, 0.5, 3 * h),
                rng.uniform(-0.5, 0.5, 3 * h),
            ],
        ),
    }


def test_op_sweep_covers_registry(rng):
    assert set(_op_cases(rng)) == set(de.REGISTERED_OPS)


@pytest.mark.parametrize("op_name", de.REGISTERED_OPS)
def test_gradients_float32(op_name, rng):
    fn, inputs = _op_cases(rng)[op_name]
    assert de.grad_check(fn, inputs, step=1e-3) <= 1e-3


@pytest.mark.parametrize("op_name", de.REGISTERED_OPS)
def test_gradients_float64(op_name, rng):
    fn, inputs = _op_cases(rng)[op_name]
    with de.precision("float64"):
        assert de.grad_check(fn, inputs, step=1e-5) <= 1e-6


def test_quadratic_form_gradient_is_exact(rng):
    a = rng.standard_normal((4, 4))
    a = (a + a.T) / 2

    def quad(x):
        row = de.reshape(x, (1, 4))
        return de.sum_all(de.mul(row, de.matmul(row, Tensor(a))))

    with de.precision("float64"):
        assert de.grad_check(quad, [rng.standard_normal(4)], step=1e-5) <= 1e-6


def test_composed_conv_gn_pool_gradient(rng):
    def composed(x, w, gamma, beta):
        y = de.conv1d(x, w, stride=1, padding=1)
        y = de.group_norm(y, gamma, beta, groups=2)
        return de.mean_all(de.mean_pool(y))

    inputs = [
        rng.standard_normal((3, 8)),
        rng.standard_normal((4, 3, 3)) * 0.5,
        rng.uniform(0.5, 1.5, 4),
        rng.standard_normal(4) * 0.1,
    ]
    assert de.grad_check(composed, inputs, step=1e-3) <= 1e-3
    with de.precision("float64"):
        assert de.grad_check(composed, inputs, step=1e-5) <= 1e-6


def test_determinism_bitwise(rng):
    x = rng.standard_normal((4, 6, 20)).astype(np.float32)
    w = rng.standard_normal((8, 6, 5)).astype(np.float32)

    def run():
        xt = Tensor(x, requires_grad=True)
        wt = Tensor(w, requires_grad=True)
        with Tape() as tape:
            y = de.conv1d(xt, wt, stride=2, padding=2)
            loss = de.mean_all(de.mul(y, y))
        de.backward(tape, loss)
        return y.data.copy(), xt.grad.copy(), wt.grad.copy()

    first, second = run(), run()
    for a, b in zip(first, second):
        assert np.array_equal(a, b)


def test_precision_context_switches_dtype():
    assert Tensor([1.0]).data.dtype == np.float32
    with de.precision("float64"):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32
