"""Tests for the reverse-mode autodiff core."""
import math

import numpy as np
import pytest

import diffcore as dc
from diffcore import DenseArray, ParamNode
from errors import ContractError, DimensionError, DomainError, LabelIndexError


def check_gradient(build, *params, eps=1e-6):
    """Compare backward() with central differences for every parameter."""
    for p in params:
        p.zero_grad()
    dc.backward(build())
    for p in params:
        numeric = dc.numeric_gradient(lambda: build().item(), p, eps)
        np.testing.assert_allclose(p.gradient, numeric, rtol=1e-5, atol=1e-7, err_msg=p.name)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def test_add_and_mul_gradients(rng):
    a = ParamNode(rng.normal(size=(3, 4)), "a")
    b = ParamNode(rng.normal(size=(3, 4)), "b")
    check_gradient(lambda: dc.sum(dc.mul(dc.add(a, b), b)), a, b)


def test_scalar_broadcast_gradient(rng):
    a = ParamNode(rng.normal(size=(2, 3)), "a")
    s = ParamNode(np.array(0.7), "s")
    check_gradient(lambda: dc.sum(dc.square(a * s - s)), a, s)


def test_matmul_gradient(rng):
    a = ParamNode(rng.normal(size=(3, 2)), "a")
    b = ParamNode(rng.normal(size=(2, 5)), "b")
    check_gradient(lambda: dc.sum(dc.tanh(dc.matmul(a, b))), a, b)


def test_unary_gradients(rng):
    x = ParamNode(rng.uniform(0.2, 2.0, size=(4,)), "x")
    for op in ("tanh", "exp", "log", "neg"):
        check_gradient(lambda: dc.sum(dc.square(dc.elementwise(op, x))), x)


def test_reshape_transpose_broadcast_gradients(rng):
    x = ParamNode(rng.normal(size=(2, 6)), "x")
    row = ParamNode(rng.normal(size=(3,)), "row")

    def build():
        y = dc.transpose(dc.reshape(x, (4, 3))) * 1.5
        return dc.sum(dc.square(dc.transpose(y) + dc.broadcast_rows(row, 4)))
    check_gradient(build, x, row)


def test_sum_axis_and_mean_gradients(rng):
    x = ParamNode(rng.normal(size=(3, 4)), "x")
    check_gradient(lambda: dc.sum(dc.square(dc.sum(x, axis=1))) + dc.mean(dc.exp(x)), x)


def test_softmax_cross_entropy_gradient(rng):
    logits = ParamNode(rng.normal(size=(5, 4)), "logits")
    labels = np.array([0, 3, 1, 1, 2])
    check_gradient(lambda: dc.softmax_cross_entropy(logits, labels), logits)


@pytest.mark.parametrize("P", [4000, 8000, 10000])
def test_uniform_logits_give_log_p(P):
    loss = dc.softmax_cross_entropy(np.zeros(P), 17)
    assert abs(loss.item() - math.log(P)) < 1e-9


def test_softmax_cross_entropy_examples():
    assert dc.softmax_cross_entropy([0.0, 0.0], 1).item() == pytest.approx(math.log(2), abs=1e-12)
    # stable for large logits
    loss = dc.softmax_cross_entropy([1000.0, 0.0], 0).item()
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.isfinite(dc.softmax_cross_entropy([0.0, 1000.0], 0).item())


def test_softmax_cross_entropy_contracts():
    with pytest.raises(LabelIndexError):
        dc.softmax_cross_entropy([0.0, 0.0, 0.0], 3)
    with pytest.raises(ContractError):
        dc.softmax_cross_entropy([1.0], 0)
    with pytest.raises(DimensionError):
        dc.softmax_cross_entropy(np.zeros((2, 3)), [0, 1, 2])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        dc.matmul(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        dc.add(np.zeros((2, 3)), np.zeros((3, 2)))


def test_log_domain():
    with pytest.raises(DomainError):
        dc.log([1.0, 0.0])
    assert isinstance(DomainError("x"), ValueError)


def test_unknown_elementwise_op():
    with pytest.raises(ContractError):
        dc.elementwise("relu", [1.0])


def test_backward_requires_scalar():
    x = ParamNode(np.ones(3), "x")
    with pytest.raises(ContractError):
        dc.backward(dc.exp(x))


def test_shared_node_accumulates_gradient():
    x = ParamNode(np.array([2.0]), "x")
    y = x * x
    dc.backward(dc.sum(y + y))
    np.testing.assert_allclose(x.gradient, [8.0])


def test_no_grad_records_nothing():
    x = ParamNode(np.ones((2, 2)), "x")
    with dc.no_grad():
        y = dc.sum(dc.tanh(x))
    assert not y.requires_grad
    assert y.parents == ()
    tracked = dc.sum(dc.tanh(x))
    assert tracked.requires_grad


def test_graph_trace_is_topological():
    a = ParamNode(np.ones(2), "a")
    b = ParamNode(np.ones(2), "b")
    root = dc.sum(dc.mul(dc.add(a, b), a))
    graph = dc.Graph.trace(root)
    position = {id(node): i for i, node in enumerate(graph.records)}
    for node in graph.records:
        for parent in node.parents:
            if parent.requires_grad:
                assert position[id(parent)] < position[id(node)]
    assert {p.name for p in graph.leaves} == {"a", "b"}
    assert graph.records[-1] is root


def test_constants_do_not_join_the_graph():
    out = dc.add(DenseArray([1.0]), DenseArray([2.0]))
    assert not out.requires_grad


def test_dense_layer_shapes_and_init(rng):
    layer = dc.Dense(4, 3, "fc", rng)
    assert [p.name for p in layer.parameters()] == ["fc.weight", "fc.bias"]
    assert np.all(np.abs(layer.weight.values) <= 0.5)
    assert layer(np.zeros((5, 4))).shape == (5, 3)
    zero = dc.Dense(4, 3, "z", rng, zero=True)
    assert not zero.weight.values.any()


def test_adam_minimizes_quadratic():
    x = ParamNode(np.array([3.0, -2.0]), "x")
    optimizer = dc.Adam([x], lr=0.1)
    for _ in range(500):
        optimizer.zero_grad()
        dc.backward(dc.sum(dc.square(x - 1.0)))
        optimizer.step()
    np.testing.assert_allclose(x.values, [1.0, 1.0], atol=1e-3)


def test_adam_first_step_moves_by_learning_rate():
    x = ParamNode(np.array([0.0]), "x")
    optimizer = dc.Adam([x], lr=0.01)
    dc.backward(dc.sum(x * 5.0))
    optimizer.step()
    assert x.values[0] == pytest.approx(-0.01, rel=1e-6)
