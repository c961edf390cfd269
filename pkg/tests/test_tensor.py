import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minicil import tensor as T
from minicil.errors import ContractError, DegenerateInputError, DimensionError

from conftest import assert_grads_close, finite_diff_grads

RS = np.random.RandomState  # test-side randomness only; package rng is separate


def _scalar_fn(build):
    """Wrap a Tensor-graph builder into a plain-array scalar function."""

    def f(arrays):
        ts = [T.Tensor(a, requires_grad=True) for a in arrays]
        return float(build(ts).data)

    return f, lambda arrays: _analytic(build, arrays)


def _analytic(build, arrays):
    ts = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = build(ts)
    out.backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def check_op(build, arrays, rtol=1e-4):
    f, grad = _scalar_fn(build)
    assert_grads_close(grad(arrays), finite_diff_grads(f, arrays), rtol=rtol)


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(T.Tensor(np.eye(2)), T.Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_matmul_hand_checked():
    out = T.matmul(T.Tensor([[1.0, 2.0], [3.0, 4.0]]), T.Tensor([[0.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[2.0], [4.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_matmul_gradient_vs_finite_differences():
    rs = RS(0)
    a, b = rs.randn(5, 7), rs.randn(7, 3)
    check_op(lambda ts: T.tsum(T.matmul(ts[0], ts[1])), [a, b])


def test_batched_matmul_gradient():
    rs = RS(1)
    a, b = rs.randn(2, 3, 4), rs.randn(4, 5)
    check_op(lambda ts: T.tsum(T.matmul(ts[0], ts[1])), [a, b])


def test_relu_values():
    out = T.relu(T.Tensor([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_l2_normalize_unit_norm():
    rs = RS(2)
    v = rs.randn(4, 6) + 0.1
    out = T.l2_normalize(T.Tensor(v))
    np.testing.assert_allclose(np.linalg.norm(out.data, axis=-1), 1.0, atol=1e-12)


def test_l2_normalize_zero_vector_rejected():
    with pytest.raises(DegenerateInputError):
        T.l2_normalize(T.Tensor(np.zeros(3)))


def test_layer_norm_gradient_vs_finite_differences():
    rs = RS(3)
    x, g, b = rs.randn(3, 8), rs.randn(8), rs.randn(8)
    check_op(lambda ts: T.tsum(T.layer_norm(ts[0], ts[1], ts[2])), [x, g, b])


def test_cosine_similarity_basics():
    v = np.array([0.3, -1.2, 0.5])
    assert float(T.cosine_similarity(T.Tensor(v), T.Tensor(v)).data) == pytest.approx(1.0)
    out = T.cosine_similarity(T.Tensor([1.0, 0.0]), T.Tensor([0.0, 1.0]))
    assert float(out.data) == pytest.approx(0.0, abs=1e-12)
    out = T.cosine_similarity(T.Tensor([1.0, 1.0]), T.Tensor([1.0, 0.0]))
    assert float(out.data) == pytest.approx(1.0 / np.sqrt(2.0), abs=1e-6)


def test_cosine_similarity_zero_vector_rejected():
    with pytest.raises(DegenerateInputError):
        T.cosine_similarity(T.Tensor([0.0, 0.0]), T.Tensor([1.0, 0.0]))


def test_backward_analytic_quadratic():
    theta = T.Tensor([1.0, 2.0], requires_grad=True)
    loss = T.tsum(T.mul(theta, theta))
    loss.backward()
    np.testing.assert_array_equal(theta.grad, [2.0, 4.0])


def test_backward_frozen_leaf_gets_zero():
    frozen = T.Tensor([3.0], requires_grad=False)
    live = T.Tensor([2.0], requires_grad=True)
    loss = T.tsum(T.mul(frozen, live))
    grads = T.backward(loss, {"frozen": frozen, "live": live})
    np.testing.assert_array_equal(grads["frozen"], [0.0])
    np.testing.assert_array_equal(grads["live"], [3.0])


def test_backward_unreached_leaf_gets_zero():
    a = T.Tensor([1.0], requires_grad=True)
    unused = T.Tensor([5.0, 6.0], requires_grad=True)
    grads = T.backward(T.tsum(T.mul(a, a)), {"a": a, "unused": unused})
    np.testing.assert_array_equal(grads["unused"], [0.0, 0.0])


def test_backward_requires_scalar():
    a = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        T.mul(a, a).backward()


def test_tape_visits_each_node_once_on_diamond():
    # y = (x + x) * (x + x); naive revisit would double-count
    x = T.Tensor(3.0, requires_grad=True)
    s = T.add(x, x)
    y = T.mul(s, s)
    order = T.topo_order(y)
    assert len(order) == len({id(n) for n in order})
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for parent in node._parents:
            assert pos[id(parent)] < pos[id(node)]
    y.backward()
    assert float(x.grad) == pytest.approx(24.0)  # d/dx (2x)^2 = 8x


def test_no_grad_skips_recording():
    x = T.Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert y._backward is None and not y.requires_grad


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=12))
@settings(max_examples=50, deadline=None)
def test_softmax_rows_positive_and_sum_to_one(vals):
    p = T.softmax(T.Tensor(np.array(vals)[None, :])).data
    assert (p > 0).all()
    assert abs(p.sum() - 1.0) <= 1e-10


@given(
    st.integers(2, 5),
    st.integers(2, 5),
    st.integers(0, 2 ** 31 - 1),
)
@settings(max_examples=25, deadline=None)
def test_elementwise_finite_on_finite_inputs(rows, cols, seed):
    rs = RS(seed)
    x = rs.randn(rows, cols)
    y = rs.randn(rows, cols)
    outs = [
        T.add(T.Tensor(x), T.Tensor(y)),
        T.sub(T.Tensor(x), T.Tensor(y)),
        T.mul(T.Tensor(x), T.Tensor(y)),
        T.relu(T.Tensor(x)),
        T.layer_norm(T.Tensor(x), T.Tensor(np.ones(cols)), T.Tensor(np.zeros(cols))),
        T.softmax(T.Tensor(x)),
    ]
    for out in outs:
        assert np.isfinite(out.data).all()


OPS = {
    "add": lambda ts: T.tsum(T.add(ts[0], ts[1])),
    "sub": lambda ts: T.tsum(T.sub(ts[0], ts[1])),
    "mul": lambda ts: T.tsum(T.mul(ts[0], ts[1])),
    "div": lambda ts: T.tsum(T.div(ts[0], ts[1])),
    "power": lambda ts: T.tsum(T.power(ts[0], 3.0)),
    "exp": lambda ts: T.tsum(T.exp(ts[0])),
    "log": lambda ts: T.tsum(T.log(ts[0])),
    "relu": lambda ts: T.tsum(T.relu(ts[0])),
    "sum_axis": lambda ts: T.tsum(T.mul(T.tsum(ts[0], axis=0), T.tsum(ts[0], axis=0))),
    "mean_axis": lambda ts: T.tsum(T.mul(T.tmean(ts[0], axis=1), T.tmean(ts[0], axis=1))),
    "reshape": lambda ts: T.tsum(T.mul(T.reshape(ts[0], (-1,)), T.reshape(ts[0], (-1,)))),
    "swapaxes": lambda ts: T.tsum(T.matmul(T.swapaxes(ts[0], 0, 1), ts[0])),
    "concat": lambda ts: T.tsum(T.mul(T.concat([ts[0], ts[1]], axis=0), 2.0)),
    "index": lambda ts: T.tsum(T.mul(ts[0][1:, :2], ts[0][1:, :2])),
    "take_rows": lambda ts: T.tsum(T.take_rows(ts[0], [2, 0, 2])),
    "logsumexp": lambda ts: T.tsum(T.logsumexp(ts[0], axis=-1)),
    "softmax": lambda ts: T.tsum(T.mul(T.softmax(ts[0]), T.Tensor(np.arange(4.0)))),
    "layer_norm": lambda ts: T.tsum(T.layer_norm(ts[0], ts[1][0], ts[1][1])),
    "l2_normalize": lambda ts: T.tsum(T.mul(T.l2_normalize(ts[0]), T.Tensor(np.arange(4.0)))),
    "cosine_similarity": lambda ts: T.cosine_similarity(ts[0], ts[1]),
}


def _instance(name, rs):
    if name in ("div", "log"):
        return [rs.rand(3, 4) + 0.5, rs.rand(3, 4) + 0.5]
    if name == "power":
        return [rs.rand(3, 4) + 0.5]
    if name == "relu":
        x = rs.randn(3, 4)
        return [x + 0.2 * np.sign(x)]  # keep clear of the kink
    if name in ("layer_norm",):
        return [rs.randn(3, 4), rs.randn(2, 4)]
    if name == "cosine_similarity":
        return [rs.randn(5) + 0.1, rs.randn(5) + 0.1]
    if name in ("add", "sub", "mul", "concat"):
        return [rs.randn(3, 4), rs.randn(3, 4)]
    return [rs.randn(3, 4)]


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradcheck_twenty_instances(name):
    build = OPS[name]
    for trial in range(20):
        rs = RS(hash(name) % 10_000 + trial)
        check_op(build, _instance(name, rs))
