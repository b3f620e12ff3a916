import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alignrefine import numerics as nx
from alignrefine.numerics import NonFiniteError, ShapeError, Tensor, grad_check


def _fd_check(fn, x, eps=1e-6):
    return grad_check(fn, Tensor(x), eps)


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = nx.matmul(a, Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_log_softmax_uniform():
    out = nx.log_softmax(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [-math.log(3)] * 3, rtol=0, atol=1e-15)


def test_logsumexp_analytic():
    out = nx.logsumexp(Tensor([math.log(2), math.log(3)]), axis=-1)
    assert out.item() == pytest.approx(math.log(5), abs=1e-15)


def test_logsumexp_single_element_exact():
    assert nx.logsumexp(Tensor([-3.25]), axis=-1).item() == -3.25


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    nx.backward(nx.sum_(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_on_constant_leaves_no_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor(3.0)
    nx.backward(c)
    assert x.grad is None


def test_backward_accumulates_until_cleared():
    x = Tensor([1.0, -1.0], requires_grad=True)
    nx.backward(nx.sum_(x * 3.0))
    nx.backward(nx.sum_(x * 3.0))
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    nx.backward(nx.sum_(x * 3.0))
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        nx.backward(x * 2.0)


def test_shape_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        nx.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_non_finite_input_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, float("nan")])
    with pytest.raises(NonFiniteError):
        nx.exp(Tensor([1000.0]))


def test_log_softmax_chain_matches_finite_differences():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(5, 4))

    def fn(x):
        return nx.sum_(nx.mul(nx.log_softmax(x), Tensor(w)))

    assert _fd_check(fn, rng.normal(size=(5, 4))) < 1e-6


def test_grad_check_quadratic_form():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 4))
    A = Tensor(a @ a.T)

    def fn(x):
        return nx.sum_(nx.mul(x, nx.matmul(x, A)))

    assert _fd_check(fn, rng.normal(size=(1, 4))) < 1e-8


def test_grad_check_softmax_cross_entropy():
    rng = np.random.default_rng(1)
    targets = rng.integers(0, 5, size=6)

    def fn(x):
        return nx.mean(nx.mul(nx.take_last(nx.log_softmax(x), targets), -1.0))

    assert _fd_check(fn, rng.normal(size=(6, 5))) < 1e-6


def test_grad_check_rejects_bad_epsilon():
    with pytest.raises(ValueError):
        grad_check(lambda x: nx.sum_(x), Tensor([1.0]), 0.1)


def test_grad_check_reports_coordinate_when_non_finite():
    with pytest.raises(NonFiniteError, match="coordinate 0"):
        grad_check(lambda x: nx.sum_(nx.log(x)), Tensor([1e-7]), 1e-6)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(2)
    out = nx.softmax(Tensor(rng.normal(scale=10, size=(50, 7))))
    np.testing.assert_allclose(out.data.sum(-1), 1.0, atol=1e-12)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with nx.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_tape_is_topological_and_unique():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = x * x
    z = nx.sum_(y + y)
    tape = nx.Tape(z)
    ids = [id(n) for n in tape.nodes]
    assert len(ids) == len(set(ids))
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for n in tape.nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]


def test_dropout_uses_supplied_mask():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    mask = np.array([[1, 0, 1], [0, 1, 1]], dtype=bool)
    out = nx.dropout(x, mask, 0.5)
    np.testing.assert_array_equal(out.data, mask * 2.0)
    nx.backward(nx.sum_(out))
    np.testing.assert_array_equal(x.grad, mask * 2.0)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = nx.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 4, 3))
    for n in range(2):
        for o in range(4):
            for i in range(4):
                for j in range(3):
                    ref[n, o, i, j] = (xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_backward_bit_deterministic():
    rng = np.random.default_rng(5)
    x0 = rng.normal(size=(3, 4))
    w = Tensor(rng.normal(size=(4, 4)))

    def grads():
        x = Tensor(x0, requires_grad=True)
        nx.backward(nx.sum_(nx.log_softmax(nx.matmul(x, w))))
        return x.grad

    assert np.array_equal(grads(), grads())


# every differentiable op against central differences -------------------------

def _op_cases(rng):
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(2, 3))
    w = rng.normal(size=(3, 4))
    gamma = rng.normal(size=3)
    beta = rng.normal(size=3)
    kernel = rng.normal(size=(2, 1, 3, 3))
    ids = np.array([[0, 2], [1, 1]])
    mask = rng.random((2, 3)) > 0.3
    r = rng.normal(size=(2, 3))
    return {
        "add": (a, lambda x: nx.sum_(nx.mul(nx.add(x, Tensor(b)), Tensor(r)))),
        "sub": (a, lambda x: nx.sum_(nx.mul(nx.sub(Tensor(b), x), Tensor(r)))),
        "mul": (a, lambda x: nx.sum_(nx.mul(x, nx.mul(x, Tensor(b))))),
        "matmul": (a, lambda x: nx.sum_(nx.mul(nx.matmul(x, Tensor(w)), 0.7))),
        "matmul_rhs": (w, lambda x: nx.sum_(nx.tanh(nx.matmul(Tensor(a), x)))),
        "batched_matmul": (rng.normal(size=(2, 3, 3)), lambda x: nx.sum_(nx.tanh(nx.matmul(x, x)))),
        "concat": (a, lambda x: nx.sum_(nx.tanh(nx.concat([x, nx.mul(x, 2.0)], axis=0)))),
        "slice": (a, lambda x: nx.sum_(nx.tanh(x[:, 1:]))),
        "embedding": (rng.normal(size=(3, 4)), lambda x: nx.sum_(nx.tanh(nx.embedding(x, ids)))),
        "softmax": (a, lambda x: nx.sum_(nx.mul(nx.softmax(x), Tensor(r)))),
        "log_softmax": (a, lambda x: nx.sum_(nx.mul(nx.log_softmax(x), Tensor(r)))),
        "layer_norm": (a, lambda x: nx.sum_(nx.mul(nx.layer_norm(x, Tensor(gamma), Tensor(beta)), Tensor(r)))),
        "layer_norm_gamma": (gamma, lambda x: nx.sum_(nx.mul(nx.layer_norm(Tensor(a), x, Tensor(beta)), Tensor(r)))),
        "relu": (a, lambda x: nx.sum_(nx.mul(nx.relu(x), Tensor(r)))),
        "gelu": (a, lambda x: nx.sum_(nx.mul(nx.gelu(x), Tensor(r)))),
        "dropout": (a, lambda x: nx.sum_(nx.mul(nx.dropout(x, mask, 0.25), Tensor(r)))),
        "sum_axis": (a, lambda x: nx.sum_(nx.tanh(nx.sum_(x, axis=0)))),
        "mean": (a, lambda x: nx.sum_(nx.tanh(nx.mean(x, axis=1)))),
        "logsumexp": (a, lambda x: nx.sum_(nx.tanh(nx.logsumexp(x, axis=-1)))),
        "reshape_transpose": (a, lambda x: nx.sum_(nx.mul(x.reshape(3, 2).transpose(), Tensor(r)))),
        "conv2d": (rng.normal(size=(1, 1, 5, 4)),
                   lambda x: nx.sum_(nx.tanh(nx.conv2d(x, Tensor(kernel), Tensor(np.zeros(2)), 2, 1)))),
        "conv2d_weight": (kernel,
                          lambda x: nx.sum_(nx.tanh(nx.conv2d(Tensor(rng_fixed_input), x, None, 2, 1)))),
        "take_last": (a, lambda x: nx.sum_(nx.take_last(nx.log_softmax(x), np.array([2, 0])))),
        "exp_log": (np.abs(a) + 0.5, lambda x: nx.sum_(nx.mul(nx.log(x), nx.exp(nx.mul(x, 0.3))))),
    }


rng_fixed_input = np.random.default_rng(99).normal(size=(1, 1, 5, 4))


@pytest.mark.parametrize("op", sorted(_op_cases(np.random.default_rng(0))))
def test_op_gradients_on_random_instances(op):
    worst = 0.0
    for seed in range(100):
        x, fn = _op_cases(np.random.default_rng(seed))[op]
        worst = max(worst, grad_check(fn, Tensor(x), 1e-6))
    assert worst < 1e-4, f"{op}: {worst:.2e}"


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
def test_log_softmax_normalized(values):
    out = nx.log_softmax(Tensor(values))
    assert abs(nx.logsumexp(out, axis=-1).item()) < 1e-12
