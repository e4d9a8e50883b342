import numpy as np
import pytest

import himat.tensor as T
from himat.errors import (
    NonDeterministicFunction,
    NonFiniteValue,
    NonScalarLoss,
    ShapeMismatch,
    TapeConsumed,
)
from himat.tensor import Tensor, allocation_log, finite_difference_check, no_grad, softmax_rows


def test_matmul_identity():
    b = np.arange(6.0).reshape(2, 3)
    out = Tensor(np.eye(2)) @ Tensor(b)
    assert np.array_equal(out.data, b)


def test_matmul_hand_case():
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[0.0], [1.0]])
    assert np.array_equal(out.data, [[2.0], [4.0]])


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((5, 4))
    b = rng.standard_normal((4, 3))
    want = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(4):
                want[i, j] += a[i, k] * b[k, j]
    got = (Tensor(a) @ Tensor(b)).data
    assert np.allclose(got, want, atol=1e-12)


def test_matmul_shape_errors():
    with pytest.raises(ShapeMismatch):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 2)))
    with pytest.raises(ShapeMismatch):
        T.matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 2))))


def test_batched_matmul_grads():
    rng = np.random.default_rng(0)
    a = Tensor(rng.standard_normal((4, 3, 2)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 5)), requires_grad=True)
    (a @ w).sum().backward()
    assert a.grad.shape == (4, 3, 2)
    assert w.grad.shape == (2, 5)
    # weight grad sums over the batch
    want = sum(a.data[i].T @ np.ones((3, 5)) for i in range(4))
    assert np.allclose(w.grad, want)


def test_softmax_uniform_and_saturation():
    out = softmax_rows(Tensor([[0.0, 0.0, 0.0]]))
    assert np.allclose(out.data, 1 / 3, atol=1e-15)
    out = softmax_rows(Tensor([[1000.0, 0.0]]))
    assert abs(out.data[0, 0] - 1.0) < 1e-12
    assert abs(out.data[0, 1]) < 1e-12


def test_softmax_matches_naive_at_small_magnitude():
    rng = np.random.default_rng(3)
    x = rng.uniform(-2, 2, (3, 4))
    naive = np.exp(x) / np.exp(x).sum(axis=1, keepdims=True)
    out = softmax_rows(Tensor(x)).data
    assert np.abs(out.sum(axis=1) - 1).max() < 1e-12
    assert np.allclose(out, naive, atol=1e-12)


def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_quadratic_gives_2x():
    x = Tensor(np.random.default_rng(1).standard_normal(5), requires_grad=True)
    T.tsum(T.mul(x, x)).backward()
    assert np.allclose(x.grad, 2 * x.data, atol=1e-14)


def test_backward_errors():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(NonScalarLoss):
        (x + x).backward()
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(TapeConsumed):
        loss.backward()


def test_shared_subgraph_consumption_detected():
    x = Tensor(np.ones(3), requires_grad=True)
    mid = x * 2.0
    l1 = mid.sum()
    l2 = (mid * mid).sum()
    l1.backward()
    with pytest.raises(TapeConsumed):
        l2.backward()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_raises_not_propagates():
    with pytest.raises(NonFiniteValue):
        Tensor([np.inf])
    x = Tensor([0.0])
    with pytest.raises(NonFiniteValue):
        T.log(x)
    with pytest.raises(NonFiniteValue):
        T.div(Tensor([1.0]), Tensor([0.0]))


def test_broadcast_rules():
    a = Tensor(np.ones((2, 3)))
    assert (a + Tensor(np.ones((1, 3)))).shape == (2, 3)
    assert (a * 2.0).shape == (2, 3)
    with pytest.raises(ShapeMismatch):
        a + Tensor(np.ones((2, 4)))


def test_broadcast_backward_unbroadcasts():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones((1, 3)), requires_grad=True)
    (a * b).sum().backward()
    assert b.grad.shape == (1, 3)
    assert np.array_equal(b.grad, np.full((1, 3), 2.0))


def test_fd_check_trivial_sum():
    rep = finite_difference_check(lambda x: x.sum(), Tensor(np.random.default_rng(0).standard_normal(4)))
    assert rep.passed and rep.max_rel_err < 1e-10


def test_fd_check_polynomial_exact_at_zero():
    rep = finite_difference_check(
        lambda x: T.tsum(T.add(T.power(x, 3.0), T.mul(x, 2.0))), Tensor(np.zeros(3))
    )
    assert rep.passed


def test_fd_check_composite_ops():
    rng = np.random.default_rng(5)
    w = Tensor(rng.standard_normal((4, 4)))
    target = Tensor(rng.standard_normal((3, 4)))

    def f(x):
        h = T.gelu(x @ w)
        d = T.sub(softmax_rows(h), target)
        return T.tsum(T.mul(d, d))

    rep = finite_difference_check(f, Tensor(rng.standard_normal((3, 4))))
    assert rep.passed, rep


def test_fd_check_detects_nondeterminism():
    def f(x):
        return T.mul(x, float(np.random.default_rng().uniform())).sum()

    with pytest.raises(NonDeterministicFunction):
        finite_difference_check(f, Tensor(np.ones(2)))


@pytest.mark.parametrize("seed", range(5))
def test_primitive_adjoints(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((2, 4, 3))
    cases = [
        lambda x: T.tsum(T.mul(T.roll(x, 2, 1), x)),
        lambda x: T.tsum(T.power(T.pad_axis(x, 1, 1, 2), 2.0)),
        lambda x: T.tsum(T.mul(T.slice_axis(x, 1, 1, 3), 3.0)),
        lambda x: T.tsum(T.exp(T.mul(T.dyadic_down(x, 1), 0.5))),
        lambda x: T.tsum(T.sqrt(T.add(T.mul(T.dyadic_up(x, 2), T.dyadic_up(x, 2)), 1.0))),
        lambda x: T.tsum(T.tanh(T.permute(x, (2, 0, 1)))),
        lambda x: T.tsum(T.mul(T.concat([x, x], 0), rng_const)),
        lambda x: T.tmean(T.relu(x), axis=1).sum(),
    ]
    rng_const = Tensor(rng.standard_normal((4, 4, 3)))
    for f in cases:
        rep = finite_difference_check(f, Tensor(x0.copy()))
        assert rep.passed, (f, rep)


def test_embedding_adjoint():
    table = Tensor(np.random.default_rng(0).standard_normal((5, 3)), requires_grad=True)
    out = T.embedding(table, [1, 1, 4])
    out.sum().backward()
    want = np.zeros((5, 3))
    want[1] = 2
    want[4] = 1
    assert np.array_equal(table.grad, want)


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.standard_normal((8, 8)), requires_grad=True)
        y = softmax_rows(x @ Tensor(rng.standard_normal((8, 8))))
        loss = T.tsum(T.mul(y, y))
        loss.backward()
        return loss.item(), x.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1 == l2
    assert np.array_equal(g1, g2)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_allocation_log_records_sizes():
    with allocation_log() as log:
        a = Tensor(np.ones((4, 5)))
        _ = a * 2.0
    assert 20 in log and len(log) >= 2


def test_float32_mode():
    x = Tensor(np.ones((2, 2)), dtype=np.float32, requires_grad=True)
    y = (x * Tensor(np.full((2, 2), 2.0, dtype=np.float32))).sum()
    assert y.dtype == np.float32
    y.backward()
    assert x.grad.dtype == np.float32
    with pytest.raises(TypeError):
        x + Tensor(np.ones((2, 2)))  # f32 vs f64
