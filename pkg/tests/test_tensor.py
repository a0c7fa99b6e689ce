import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cra_pcn import tensor as T
from cra_pcn.errors import ContractError, ParseError, ShapeError
from conftest import max_rel_error, numeric_grad


def check_op(fn, *arrays, tol=1e-5, seed=0):
    """FD-check ``sum(fn(*xs) * probe)`` against the tape for every input."""
    xs = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out_shape = fn(*xs).shape
    probe = np.random.default_rng(seed).normal(size=out_shape)
    with T.Tape() as tape:
        loss = T.sum(T.mul(fn(*xs), probe))
    grads = T.backward(tape, loss)

    def value():
        return float(np.sum(fn(*xs).data * probe))

    for x in xs:
        assert max_rel_error(grads[x], numeric_grad(value, x.data)) < tol


def test_matmul_examples():
    eye = T.Tensor(np.eye(2))
    m = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(eye, m).data, m.data)
    np.testing.assert_array_equal(T.matmul(T.Tensor([[1.0, 0.0]]), T.Tensor([[0.0], [5.0]])).data, [[0.0]])


def test_matmul_gradient(rng):
    check_op(T.matmul, rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), tol=1e-6)


def test_matmul_batched_gradient(rng):
    check_op(T.matmul, rng.normal(size=(2, 4, 3)), rng.normal(size=(3, 2)))


def test_matmul_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 2))))


def test_relu_examples():
    np.testing.assert_array_equal(T.relu(T.Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_relu_subgradient_zero_at_zero():
    x = T.Tensor([0.0, 1.0], requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum(T.relu(x))
    np.testing.assert_array_equal(T.backward(tape, loss)[x], [0.0, 1.0])


def test_add_zero_is_identity(rng):
    x = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(T.add(T.Tensor(x), 0.0).data, x)


def test_concat_shape(rng):
    out = T.concat([T.Tensor(rng.normal(size=(5, 3))), T.Tensor(rng.normal(size=(5, 5)))])
    assert out.shape == (5, 8)


def test_incompatible_shapes_raise():
    with pytest.raises(ShapeError):
        T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((3, 2))))


@pytest.mark.parametrize(
    "name, fn, shapes",
    [
        ("add-broadcast", T.add, [(4, 3), (3,)]),
        ("sub-broadcast", T.sub, [(4, 2, 3), (4, 1, 3)]),
        ("mul-broadcast", T.mul, [(4, 3), (4, 1)]),
        ("tanh", T.tanh, [(3, 4)]),
        ("relu", T.relu, [(3, 4)]),
        ("concat", lambda a, b: T.concat([a, b], axis=1), [(3, 2), (3, 4)]),
        ("concat-axis0", lambda a, b: T.concat([a, b], axis=0), [(2, 3), (1, 3)]),
        ("reshape", lambda a: T.reshape(a, (2, 6)), [(3, 4)]),
        ("broadcast_to", lambda a: T.broadcast_to(a, (5, 3, 4)), [(3, 1)]),
        ("sum-axis", lambda a: T.sum(a, axis=1), [(3, 4, 2)]),
        ("mean", lambda a: T.mean(a, axis=0, keepdims=True), [(3, 4)]),
        ("max", lambda a: T.max(a, axis=1), [(3, 5, 2)]),
        ("softmax", lambda a: T.softmax(a, axis=-1), [(3, 4)]),
        ("softmax_channelwise", T.softmax_channelwise, [(2, 3, 5)]),
    ],
)
def test_op_gradients(name, fn, shapes, rng):
    check_op(fn, *[rng.normal(size=s) for s in shapes])


def test_gather_repeated_rows_scatter_additively(rng):
    idx = np.array([[0, 2, 2], [1, 1, 1], [2, 0, 1]])
    check_op(lambda a: T.gather(a, idx), rng.normal(size=(3, 4)))
    x = T.Tensor(np.zeros((3, 2)), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum(T.gather(x, idx))
    np.testing.assert_array_equal(T.backward(tape, loss)[x], [[2, 2], [4, 4], [3, 3]])


def test_gather_out_of_range():
    with pytest.raises(ShapeError):
        T.gather(T.Tensor(np.zeros((3, 2))), np.array([[3]]))


def test_softmax_channelwise_closed_forms():
    np.testing.assert_array_equal(T.softmax_channelwise(T.Tensor(np.ones((1, 4, 2)))).data, np.full((1, 4, 2), 0.25))
    w = T.softmax_channelwise(T.Tensor(np.array([0.0, math.log(3.0)]).reshape(1, 2, 1))).data
    np.testing.assert_allclose(w.ravel(), [0.25, 0.75], rtol=0, atol=1e-15)


def test_softmax_channelwise_guards_overflow():
    w = T.softmax_channelwise(T.Tensor(np.array([1e308, -1e308, 0.0]).reshape(1, 3, 1))).data
    assert np.all(np.isfinite(w))
    np.testing.assert_array_equal(w.ravel(), [1.0, 0.0, 0.0])


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=3, max_dims=3, max_side=6),
                  elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_channelwise_is_distribution(logits):
    w = T.softmax_channelwise(T.Tensor(logits)).data
    assert np.all((w >= 0) & (w <= 1))
    assert np.max(np.abs(w.sum(axis=1) - 1.0)) <= 1e-12


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
                  elements=st.floats(-3, 3, allow_nan=False)))
def test_sum_and_half_norm_gradients(x):
    a = T.Tensor(x, requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum(a)
    np.testing.assert_array_equal(T.backward(tape, loss)[a], np.ones_like(x))
    with T.Tape() as tape:
        loss = T.mul(0.5, T.sum(T.mul(a, a)))
    np.testing.assert_array_equal(T.backward(tape, loss)[a], x)


def test_backward_rejects_non_scalar():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        y = T.mul(x, 2.0)
    with pytest.raises(ContractError):
        T.backward(tape, y)


def test_unreachable_leaf_gets_zero():
    x = T.Tensor(np.ones(3), requires_grad=True)
    unused = T.Tensor(np.ones((2, 2)), requires_grad=True)
    with T.Tape() as tape:
        tape.watch([unused])
        loss = T.sum(x)
    grads = T.backward(tape, loss)
    np.testing.assert_array_equal(grads[unused], np.zeros((2, 2)))


def test_tape_is_topological_and_shared_subexpression_counted_once():
    x = T.Tensor(np.array([2.0]), requires_grad=True)
    with T.Tape() as tape:
        y = T.mul(x, x)
        loss = T.sum(T.add(y, y))
    for node in tape.nodes:
        assert all(p is None or p < tape.nodes.index(node) for p in node.parents)
    np.testing.assert_array_equal(T.backward(tape, loss)[x], [8.0])


def test_forward_is_deterministic(rng):
    a, b = rng.normal(size=(6, 5)), rng.normal(size=(5, 4))
    r1 = T.softmax(T.tanh(T.matmul(T.Tensor(a), T.Tensor(b))), axis=0).data
    r2 = T.softmax(T.tanh(T.matmul(T.Tensor(a), T.Tensor(b))), axis=0).data
    assert r1.tobytes() == r2.tobytes()


def test_checkpoint_round_trip(tmp_path, rng):
    named = [("a.weight", rng.normal(size=(3, 4))), ("b", rng.normal(size=(5,))), ("s", np.array(2.5))]
    path = tmp_path / "x.ckpt"
    T.save_checkpoint(path, named, meta="version = 1\n")
    records, meta = T.load_checkpoint(path)
    assert meta == "version = 1\n"
    assert [n for n, _ in records] == [n for n, _ in named]
    for (_, a), (_, b) in zip(named, records):
        assert a.shape == b.shape and a.tobytes() == b.tobytes()


def test_checkpoint_layout_is_little_endian(tmp_path):
    path = tmp_path / "x.ckpt"
    T.save_checkpoint(path, [("w", np.array([1.0, -2.0]))])
    blob = path.read_bytes()
    assert blob[:8] == b"CRAPCNCK" and blob[8] == 1
    assert blob[9:13] == (1).to_bytes(4, "little")
    assert blob[-16 - 4:-4] == np.array([1.0, -2.0], dtype="<f8").tobytes()


def test_checkpoint_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + b"\x00" * 8)
    with pytest.raises(ParseError, match="magic"):
        T.load_checkpoint(bad)
    good = tmp_path / "good.ckpt"
    T.save_checkpoint(good, [("w", np.ones((4, 4)))])
    blob = good.read_bytes()
    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(blob[:-40])
    with pytest.raises(ParseError):
        T.load_checkpoint(cut)
    wrong = tmp_path / "ver.ckpt"
    wrong.write_bytes(blob[:8] + b"\x07" + blob[9:])
    with pytest.raises(ParseError, match="version"):
        T.load_checkpoint(wrong)
