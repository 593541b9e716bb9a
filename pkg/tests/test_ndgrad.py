import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kadapter import ndgrad as nd
from kadapter.errors import ArgumentError, DimensionError, NumericInputError, UndefinedLossError
from kadapter.ndgrad import Tensor

from helpers import OP_CASES

finite = st.floats(-2.0, 2.0, allow_nan=False, allow_infinity=False)


def rows(min_cols=2, max_cols=8):
    return st.integers(1, 4).flatmap(
        lambda r: st.integers(min_cols, max_cols).flatmap(lambda c: arrays(np.float64, (r, c), elements=finite)))


@pytest.mark.parametrize("name", sorted(OP_CASES))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_op_matches_finite_differences(name, seed):
    fn, inputs = OP_CASES[name](np.random.default_rng(seed))
    assert nd.gradcheck(fn, inputs) <= 1e-6


def test_matmul_identity_and_projector():
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(nd.matmul(Tensor(np.eye(2)), b).data, b.data)
    p = nd.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(p.data, [[5.0, 6.0], [0.0, 0.0]])


def test_matmul_gradient_of_sum():
    rng = np.random.default_rng(3)
    a = Tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True)
    b = Tensor(rng.uniform(-2, 2, (4, 2)))
    fn = lambda: nd.sum_all(nd.matmul(a, b))  # noqa: E731
    nd.backward(fn())
    # d/dA sum(AB) = 1 B^T, a closed form independent of the engine
    assert np.allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=0, atol=1e-12)
    assert nd.relative_error(a.grad, nd.finite_difference_grad(fn, a)) <= 1e-6


def test_softmax_examples():
    assert np.allclose(nd.softmax_lastdim(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    big = nd.softmax_lastdim(Tensor([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(big))
    assert big[0, 0] == 1.0 and big[0, 1] < 1e-300


def test_softmax_rejects_nonfinite():
    with pytest.raises(NumericInputError):
        nd.softmax_lastdim(Tensor([[np.nan, 0.0]]))


def test_layer_norm_examples():
    g, b = Tensor(np.ones(4)), Tensor(np.zeros(4))
    assert np.array_equal(nd.layer_norm(Tensor([[3.0, 3, 3, 3]]), g, b).data, np.zeros((1, 4)))
    out = nd.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    # eps=1e-5 pulls the unit outputs in slightly
    assert np.allclose(out, [[1 / math.sqrt(1 + 1e-5), -1 / math.sqrt(1 + 1e-5)]], atol=1e-15)


def test_layer_norm_shape_errors():
    with pytest.raises(DimensionError):
        nd.layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


def test_concat_examples_and_gradient():
    assert np.array_equal(nd.concat_lastdim([Tensor([1.0, 2.0]), Tensor([3.0])]).data, [1, 2, 3])
    a = Tensor(np.zeros((4, 8)), requires_grad=True)
    b = Tensor(np.zeros((4, 8)), requires_grad=True)
    out = nd.concat_lastdim([a, b])
    assert out.shape == (4, 16)
    nd.backward(nd.sum_all(out))
    assert np.array_equal(a.grad, np.ones((4, 8))) and np.array_equal(b.grad, np.ones((4, 8)))


def test_concat_errors():
    with pytest.raises(ArgumentError):
        nd.concat_lastdim([])
    with pytest.raises(DimensionError):
        nd.concat_lastdim([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))])


def test_cross_entropy_examples():
    assert nd.cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-15)
    assert nd.cross_entropy(Tensor([[10.0, -10.0]]), [0]).item() == pytest.approx(0.0, abs=1e-8)


def test_cross_entropy_ignore_index_and_errors():
    logits = Tensor([[0.0, 0.0], [50.0, -50.0]])
    assert nd.cross_entropy(logits, [0, -100]).item() == pytest.approx(math.log(2))
    with pytest.raises(UndefinedLossError):
        nd.cross_entropy(logits, [-100, -100])
    with pytest.raises(ArgumentError):
        nd.cross_entropy(logits, [0, 2])
    with pytest.raises(DimensionError):
        nd.cross_entropy(logits, [0])


def test_bce_zero_logits_is_ln2():
    assert nd.bce_with_logits(Tensor(np.zeros((3, 6))), np.eye(3, 6)).item() == pytest.approx(math.log(2))


def test_backward_of_sum_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    nd.backward(nd.sum_all(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ArgumentError):
        nd.backward(nd.scale(x, 2.0))


def test_frozen_graph_allocates_nothing():
    a, b = Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2)))
    loss = nd.sum_all(nd.matmul(a, b))
    nd.backward(loss)
    assert a.grad is None and b.grad is None and loss.grad is None


def test_frozen_input_next_to_trainable_gets_no_grad():
    w = Tensor(np.ones((3, 2)), requires_grad=True)
    x = Tensor(np.ones((4, 3)))
    nd.backward(nd.sum_all(nd.matmul(x, w)))
    assert w.grad is not None and x.grad is None


def test_gradients_accumulate_until_cleared():
    x = Tensor(np.ones(3), requires_grad=True)
    nd.backward(nd.sum_all(x))
    nd.backward(nd.sum_all(x))
    assert np.array_equal(x.grad, 2 * np.ones(3))
    nd.zero_grad([x])
    assert x.grad is None


def test_topological_order_and_single_visit():
    x = Tensor(np.ones(3), requires_grad=True)
    y = nd.mul(x, x)
    z = nd.add(y, y)  # y consumed twice: must still appear once
    loss = nd.sum_all(z)
    order = nd.topo_order(loss)
    ids = [t.node_id for t in order]
    assert len(ids) == len(set(ids))
    pos = {t.node_id: i for i, t in enumerate(order)}
    for t in order:
        for p in t._parents:
            if p.requires_grad:
                assert pos[p.node_id] < pos[t.node_id]
    nd.backward(loss)
    assert np.array_equal(x.grad, 4 * x.data)


def test_shape_errors():
    with pytest.raises(DimensionError):
        nd.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(DimensionError):
        nd.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ArgumentError):
        Tensor(np.ones(2)) / Tensor(np.ones(2))


@given(rows())
def test_softmax_rows_sum_to_one(x):
    s = nd.softmax_lastdim(Tensor(x)).data
    assert np.all(np.abs(s.sum(axis=-1) - 1.0) <= 1e-12)


@given(rows(min_cols=2))
def test_layer_norm_output_is_centred(x):
    x = x + np.arange(x.shape[1])  # never a constant row
    h = x.shape[1]
    out = nd.layer_norm(Tensor(x), Tensor(np.ones(h)), Tensor(np.zeros(h))).data
    assert np.all(np.abs(out.mean(axis=-1)) <= 1e-10)


@given(rows(), st.integers(0, 2**31 - 1))
def test_graph_replay_is_bit_identical(x, seed):
    w = np.random.default_rng(seed).normal(size=(x.shape[1], 3))

    def run():
        a = Tensor(x, requires_grad=True)
        loss = nd.sum_all(nd.gelu(nd.matmul(a, Tensor(w))))
        nd.backward(loss)
        return loss.data.tobytes(), a.grad.tobytes()

    assert run() == run()


@given(rows())
def test_frozen_tensor_never_receives_grad(x):
    frozen = Tensor(x)
    live = Tensor(np.ones(x.shape[1]), requires_grad=True)
    nd.backward(nd.sum_all(nd.softmax_lastdim(nd.mul(frozen, live))))
    assert frozen.grad is None
    assert live.grad is not None and live.grad.shape == live.shape
