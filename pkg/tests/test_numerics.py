"""Test the autodiff core."""

from typing import Callable

import numpy as np
import pytest

from cvrscale.errors import ContractError, DimensionError, NumericError
from cvrscale.numerics import (
    ComputeGraph,
    ParamFactory,
    Tensor,
    backward,
    concat,
    elementwise,
    embedding_bag,
    layer_norm,
    log1p,
    matmul,
    relu,
    reshape,
    softmax_rows,
    take,
    transpose,
)
from cvrscale.utils import SplitMix64
from tests.collection_models import check_gradients


def _rand(shape: tuple, seed: int, name: str = "") -> Tensor:
    values = SplitMix64(seed).normal(int(np.prod(shape))).reshape(shape)
    return Tensor(values, requires_grad=True, name=name or f"rand{seed}")


def test_tensor_rejects_empty_extent() -> None:
    with pytest.raises(DimensionError, match="Tensor extents must be positive"):
        Tensor(np.zeros((0, 3)))


def test_broadcast_bias_gradient() -> None:
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    b = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward((x + b).sum())
    assert b.grad.tolist() == [2.0, 2.0, 2.0]
    assert x.grad.tolist() == [[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]


def test_broadcast_incompatible() -> None:
    with pytest.raises(DimensionError, match="Failed `add`, shapes are not broadcast-compatible"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(2))
    with pytest.raises(DimensionError, match="Failed `mul`, shapes are not broadcast-compatible"):
        Tensor(np.ones((2, 3))) * Tensor(np.ones((3, 2)))


def test_contract_errors() -> None:
    with pytest.raises(DimensionError, match="Failed `matmul`, inner extents differ"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(NumericError, match="Failed `log1p`"):
        log1p(Tensor([0.5, -1.0]))
    with pytest.raises(NumericError, match="Failed `softmax_rows`, input contains NaN"):
        softmax_rows(Tensor([[0.0, np.nan]]))
    with pytest.raises(ContractError, match="Unknown elementwise op `tanh`"):
        elementwise("tanh", [1.0])
    with pytest.raises(ContractError, match="Failed `backward`, loss must be a scalar"):
        backward(Tensor([1.0, 2.0], requires_grad=True) * 2.0)
    with pytest.raises(DimensionError, match="Failed `reshape`"):
        reshape(Tensor(np.ones((2, 3))), (4, 2))
    with pytest.raises(DimensionError, match="Failed `embedding_bag`, index outside table"):
        embedding_bag(Tensor(np.ones((2, 2))), np.array([0]), np.array([2]), np.array([1.0]), 1)


def test_fan_out_accumulates() -> None:
    x = Tensor([3.0], requires_grad=True)
    backward((x * x + x).sum())
    assert x.grad.tolist() == [7.0]
    # leaf gradients add up until reset
    backward((x * x + x).sum())
    assert x.grad.tolist() == [14.0]
    x.zero_grad()
    assert x.grad is None


def test_graph_topological_order() -> None:
    x = Tensor([1.0, 2.0], requires_grad=True)
    z = (relu(x) * x).sum()
    graph = ComputeGraph.from_output(z)
    assert graph.order[0] is x
    assert graph.order[-1] is z
    assert [node.op for node in graph.nodes] == ["relu", "mul", "sum"]


def test_relu_subgradient_at_zero() -> None:
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    backward(relu(x).sum())
    assert x.grad.tolist() == [0.0, 0.0, 1.0]


def test_embedding_bag_empty_bag() -> None:
    table = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    out = embedding_bag(table, np.array([0, 0]), np.array([1, 1]), np.array([0.5, 0.5]), n_rows=2)
    assert out.data.tolist() == [[3.0, 4.0], [0.0, 0.0]]
    backward(out.sum())
    assert table.grad.tolist() == [[0.0, 0.0], [1.0, 1.0]]


def _square_matmul(a: Tensor, b: Tensor) -> Tensor:
    prod = matmul(a, transpose(b, (1, 0)))
    return (prod * prod).sum()


@pytest.mark.parametrize(
    "build",
    [
        pytest.param(lambda a, b, c: (a * b).sum(), id="mul"),
        pytest.param(lambda a, b, c: (a * reshape(c, (3,))).mean(), id="mul-broadcast"),
        pytest.param(lambda a, b, c: _square_matmul(a, b), id="matmul"),
        pytest.param(lambda a, b, c: (softmax_rows(a) * b).sum(), id="softmax"),
        pytest.param(lambda a, b, c: (layer_norm(a, reshape(c, (3,)), reshape(c, (3,))) * b).sum(), id="layer-norm"),
        pytest.param(lambda a, b, c: (take(a, np.array([1, 1, 0]), axis=0) * concat([b, c], axis=0)).sum(), id="take"),
        pytest.param(lambda a, b, c: (concat([a, b], axis=-1) * concat([b, a], axis=-1)).sum(), id="concat"),
        pytest.param(lambda a, b, c: log1p(a * a).sum(), id="log1p"),
    ],
)
def test_op_gradients(build: Callable[[Tensor, Tensor, Tensor], Tensor]) -> None:
    a, b, c = _rand((2, 3), 1, "a"), _rand((2, 3), 2, "b"), _rand((1, 3), 3, "c")
    check_gradients(lambda: build(a, b, c), [a, b, c])


def test_batched_matmul_gradient() -> None:
    a, b = _rand((2, 3, 4), 4, "a"), _rand((4, 2), 5, "b")
    weights = Tensor(SplitMix64(6).normal(12).reshape(2, 3, 2))
    check_gradients(lambda: (matmul(a, b) * weights).sum(), [a, b])


def test_embedding_bag_gradient() -> None:
    table = _rand((4, 3), 7, "table")
    weights = Tensor(SplitMix64(8).normal(9).reshape(3, 3))
    rows, idx, wts = np.array([0, 0, 2, 2, 2]), np.array([1, 3, 0, 1, 1]), np.array([0.5, 0.5, 0.2, 0.4, 0.4])
    check_gradients(lambda: (embedding_bag(table, rows, idx, wts, 3) * weights).sum(), [table])


def test_param_factory_is_keyed_by_name() -> None:
    first = ParamFactory(3).glorot("layer/weight", (4, 5))
    again = ParamFactory(3).glorot("layer/weight", (4, 5))
    other = ParamFactory(3).glorot("other/weight", (4, 5))
    np.testing.assert_array_equal(first.data, again.data)
    assert not np.array_equal(first.data, other.data)
    assert np.abs(first.data).max() <= np.sqrt(6.0 / 9.0)
    assert first.requires_grad
    assert first.name == "layer/weight"
    assert ParamFactory(0).zeros("bias", (3,)).data.tolist() == [0.0, 0.0, 0.0]
    assert ParamFactory(0).ones("gain", (2,)).data.tolist() == [1.0, 1.0]


def test_softmax_rows_distribution() -> None:
    x = Tensor(SplitMix64(4).normal(24).reshape(4, 6) * 10.0)
    y = softmax_rows(x).data
    assert np.all(np.abs(y.sum(axis=1) - 1.0) <= 1e-12)
    perm = SplitMix64(5).permutation(6)
    permuted = softmax_rows(Tensor(x.data[:, perm])).data
    np.testing.assert_allclose(permuted, y[:, perm], rtol=0, atol=1e-15)


def test_backward_is_reproducible() -> None:
    a = _rand((3, 4), 1, "a")
    b = _rand((4, 2), 2, "b")
    hidden = relu(matmul(a, b))
    loss = (softmax_rows(hidden) * hidden + hidden * hidden).sum()
    backward(loss)
    first = (a.grad.copy(), b.grad.copy())
    a.zero_grad()
    b.zero_grad()
    backward(loss)
    assert np.array_equal(a.grad, first[0])
    assert np.array_equal(b.grad, first[1])
