import numpy as np
import pytest

from hiergnn import autodiff as ad
from hiergnn.autodiff import BatchNormState, Tape, Tensor, backward, grad_check
from hiergnn.errors import ContractError, NumericError, ShapeError, TapeError
from hiergnn.graphcore import LaplacianOperator

from conftest import random_graph


def grad_of(f, x):
    t = Tensor(np.asarray(x, dtype=float), requires_grad=True)
    with Tape() as tape:
        loss = f(t)
    backward(tape, loss)
    return t.grad


def test_relu_forward_backward():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        y = ad.relu(x)
        loss = ad.reduce_sum(y)
    assert y.data.tolist() == [0.0, 0.0, 2.0]
    backward(tape, loss)
    assert x.grad.tolist() == [0.0, 0.0, 1.0]


def test_softmax_symmetric():
    np.testing.assert_allclose(ad.softmax(np.zeros((1, 2))).data, [[0.5, 0.5]])


def test_scatter_pool_example():
    out = ad.scatter_pool(np.array([[1.0], [3.0], [4.0]]), np.array([0, 0, 1]), 2)
    assert out.data.tolist() == [[4.0], [4.0]]


def test_square_gradient():
    assert grad_of(lambda a: ad.reduce_sum(ad.elementwise_mul(a, a)), [1.0, 2.0]).tolist() == [2.0, 4.0]


def test_sum_gradient_is_ones():
    assert np.array_equal(grad_of(ad.reduce_sum, np.ones((3, 4))), np.ones((3, 4)))


def test_composite_matches_finite_differences(rng):
    w = rng.normal(size=(3, 3))
    x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    res = grad_check(lambda t: ad.reduce_sum(ad.relu(ad.matmul(w, t))), x)
    assert res.max_rel_error <= 1e-5


def test_gradient_with_respect_to_both_matmul_args(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    with Tape() as tape:
        loss = ad.reduce_sum(ad.matmul(a, b))
    backward(tape, loss)
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ np.ones((3, 2)))


def test_grad_check_sum_of_squares(rng):
    x = Tensor(rng.normal(size=10), requires_grad=True)
    assert grad_check(lambda t: ad.reduce_sum(ad.elementwise_mul(t, t)), x).max_rel_error <= 1e-7


def test_grad_check_linear_exact_arithmetic(rng):
    # integer inputs, dyadic weights and a power-of-two step make every
    # floating-point operation exact, so only the method error remains
    w = rng.integers(-8, 9, size=10) / 4.0
    x = Tensor(rng.integers(-5, 6, size=10).astype(float), requires_grad=True)
    res = grad_check(lambda t: ad.reduce_sum(ad.elementwise_mul(t, w)), x, eps=2.0**-20)
    assert res.max_rel_error <= 1e-10


def test_grad_check_linear_roundoff_bound(rng):
    w = rng.normal(size=10)
    x = Tensor(rng.normal(size=10), requires_grad=True)
    assert grad_check(lambda t: ad.reduce_sum(ad.elementwise_mul(t, w)), x).max_rel_error <= 1e-8


def test_grad_check_skips_kinks():
    x = Tensor(np.array([1e-8, 1.0]), requires_grad=True)
    res = grad_check(lambda t: ad.reduce_sum(ad.relu(t)), x)
    assert res.skipped == [0]
    assert res.n_checked == 1


def test_grad_check_restores_input(rng):
    data = rng.normal(size=5)
    x = Tensor(data.copy(), requires_grad=True)
    grad_check(lambda t: ad.reduce_sum(ad.sigmoid(t)), x)
    assert np.array_equal(x.data, data)


def test_tape_is_single_use():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = ad.reduce_sum(x)
    backward(tape, loss)
    with pytest.raises(TapeError):
        backward(tape, loss)


def test_loss_must_be_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.elementwise_mul(x, 2.0)
    with pytest.raises(ContractError):
        backward(tape, y)


def test_loss_not_on_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        loss = ad.reduce_sum(x)
    with pytest.raises(TapeError):
        backward(Tape(), loss)


def test_non_finite_output_names_primitive():
    with pytest.raises(NumericError, match="log"):
        ad.log(np.array([0.0]))


def test_shape_errors():
    with pytest.raises(ShapeError):
        ad.add(np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(ShapeError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_dropout_eval_identity_and_fixed_mask(rng):
    x = rng.normal(size=(4, 5))
    assert np.array_equal(ad.dropout(x, None).data, x)
    mask = ad.dropout_mask(np.random.default_rng(1), x.shape, 0.5)
    again = ad.dropout_mask(np.random.default_rng(1), x.shape, 0.5)
    assert np.array_equal(mask, again)
    assert set(np.unique(mask)) <= {0.0, 2.0}
    assert np.array_equal(ad.dropout(x, mask).data, ad.dropout(x, mask).data)


def test_batchnorm_train_statistics(rng):
    x = rng.normal(3.0, 2.0, size=(64, 5))
    state = BatchNormState(5, eps=0.0)
    out = ad.batchnorm(x, np.ones(5), np.zeros(5), state, train=True).data
    assert np.all(np.abs(out.mean(axis=0)) <= 1e-10)
    assert np.all(np.abs(out.var(axis=0) - 1.0) <= 1e-8)


def test_batchnorm_running_stats_update(rng):
    x = rng.normal(size=(10, 3))
    state = BatchNormState(3)
    ad.batchnorm(x, np.ones(3), np.zeros(3), state, train=True)
    np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(axis=0, ddof=1))


def test_batchnorm_cancels_preceding_bias(rng):
    # a bias added before train-mode batch norm has no effect on the output
    x = rng.normal(size=(6, 4))
    b = Tensor(rng.normal(size=4), requires_grad=True)
    w = rng.normal(size=(6, 4))
    with Tape() as tape:
        y = ad.batchnorm(ad.add(x, b), rng.normal(size=4), np.zeros(4), BatchNormState(4), True)
        loss = ad.reduce_sum(ad.elementwise_mul(y, w))
    backward(tape, loss)
    assert np.all(np.abs(b.grad) <= 1e-12)


# randomized checks for every primitive: 20 draws, dimensions <= 16


def _draws():
    rng = np.random.default_rng(2024)
    for _ in range(20):
        yield rng, int(rng.integers(2, 5)), int(rng.integers(2, 5))


def _weighted(out, rng):
    w = rng.normal(size=out.shape)
    return ad.reduce_sum(ad.elementwise_mul(out, w))


def _lap(rng, n):
    return LaplacianOperator(random_graph(rng, n, 0.6))


PRIMITIVES = {
    "add": lambda rng, m, n: (lambda t, o=rng.normal(size=(m, n)): ad.add(t, o), (m, n)),
    "add_bias": lambda rng, m, n: (lambda t, o=rng.normal(size=(m, n)): ad.add(o, t), (n,)),
    "mul": lambda rng, m, n: (lambda t, o=rng.normal(size=(m, n)): ad.elementwise_mul(t, o), (m, n)),
    "mul_self": lambda rng, m, n: (lambda t: ad.elementwise_mul(t, t), (m, n)),
    "matmul_left": lambda rng, m, n: (lambda t, o=rng.normal(size=(n, 3)): ad.matmul(t, o), (m, n)),
    "matmul_right": lambda rng, m, n: (lambda t, o=rng.normal(size=(m, n)): ad.matmul(o, t), (n, 2)),
    "matmul_batched": lambda rng, m, n: (lambda t, o=rng.normal(size=(2, m, n)): ad.matmul(o, t), (n, 3)),
    "matmul_vector": lambda rng, m, n: (lambda t, o=rng.normal(size=(m, n)): ad.matmul(o, t), (n,)),
    "sparse_apply": lambda rng, m, n: (lambda t, lap=_lap(rng, m + 2): ad.sparse_apply(lap, t), (2, m + 2, n)),
    "relu": lambda rng, m, n: (ad.relu, (m, n)),
    "sigmoid": lambda rng, m, n: (ad.sigmoid, (m, n)),
    "softmax": lambda rng, m, n: (ad.softmax, (m, n)),
    "log_softmax": lambda rng, m, n: (ad.log_softmax, (m, n)),
    "softplus": lambda rng, m, n: (ad.softplus, (m, n)),
    "log": lambda rng, m, n: (lambda t: ad.log(ad.add(ad.elementwise_mul(t, t), 0.5)), (m, n)),
    "reduce_sum_axis": lambda rng, m, n: (lambda t: ad.reduce_sum(t, axis=0), (m, n)),
    "reduce_mean": lambda rng, m, n: (lambda t: ad.reduce_mean(t, axis=1), (m, n)),
    "concat_rows": lambda rng, m, n: (lambda t, o=rng.normal(size=(2, n)): ad.concat_rows([t, o, t]), (m, n)),
    "reshape": lambda rng, m, n: (lambda t: ad.reshape(t, (n * m,)), (m, n)),
    "take_column": lambda rng, m, n: (lambda t: ad.take_column(t, n - 1), (m, n)),
    "scatter_pool": lambda rng, m, n: (
        lambda t, c=np.arange(2 * m) // 2: ad.scatter_pool(t, c, m), (2, 2 * m, n)
    ),
    "dropout": lambda rng, m, n: (
        lambda t, k=ad.dropout_mask(rng, (m, n), 0.3): ad.dropout(t, k), (m, n)
    ),
    "batchnorm_train": lambda rng, m, n: (
        lambda t, g=rng.normal(size=n), b=rng.normal(size=n): ad.batchnorm(t, g, b, BatchNormState(n), True),
        (m + 3, n),
    ),
    "batchnorm_eval": lambda rng, m, n: (
        lambda t, g=rng.normal(size=n), s=BatchNormState(n, running_mean=rng.normal(size=n)): ad.batchnorm(
            t, g, np.zeros(n), s, False
        ),
        (m, n),
    ),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    for rng, m, n in _draws():
        op, shape = PRIMITIVES[name](rng, m, n)
        # positive upstream weights keep gradient components away from the
        # roundoff scale, where the relative error is meaningless
        w = rng.uniform(0.5, 1.5, size=op(np.zeros(shape)).shape)
        x = Tensor(rng.normal(size=shape), requires_grad=True)
        res = grad_check(lambda t: ad.reduce_sum(ad.elementwise_mul(op(t), w)), x)
        assert res.max_rel_error <= 1e-5, (name, m, n, res)


def test_parameter_gradients_for_pooling_weights(rng):
    # gradient with respect to the second operand of elementwise_mul + reshape
    h = rng.normal(size=(3, 6, 2))
    w = Tensor(rng.normal(size=6), requires_grad=True)
    c = np.array([0, 0, 1, 1, 2, 2])
    res = grad_check(
        lambda t: _weighted(ad.scatter_pool(ad.elementwise_mul(h, ad.reshape(t, (6, 1))), c, 3), np.random.default_rng(0)),
        w,
    )
    assert res.max_rel_error <= 1e-5


def test_batchnorm_parameter_gradients(rng):
    x = rng.normal(size=(7, 4))
    gamma = Tensor(rng.normal(size=4), requires_grad=True)
    beta = Tensor(rng.normal(size=4), requires_grad=True)
    w = rng.normal(size=(7, 4))
    for target in (gamma, beta):
        res = grad_check(
            lambda t: ad.reduce_sum(ad.elementwise_mul(ad.batchnorm(x, gamma, beta, BatchNormState(4), True), w)),
            target,
        )
        assert res.max_rel_error <= 1e-5
