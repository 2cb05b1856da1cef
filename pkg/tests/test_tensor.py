"""Autodiff engine: every primitive's gradient against central differences."""

import numpy as np
import pytest

from aeslab import tensor as T
from aeslab.errors import CheckpointError, ContractError, DimensionError

from oracles import rel_err

GRAD_TOL = 1e-4


def check_grads(build, shapes, seed, eps=1e-5):
    """Gradient of a scalar-valued composite w.r.t. each input tensor."""
    rng = np.random.default_rng(seed)
    xs = [T.Tensor(rng.normal(size=s)) for s in shapes]
    with T.Graph() as g:
        loss = build(*xs)
    T.backward(g, loss)
    for i, x in enumerate(xs):

        def f(v, i=i):
            args = list(xs)
            args[i] = v
            return build(*args)

        fd = T.finite_difference_gradient(f, x, eps)
        assert rel_err(x.grad, fd.data) <= GRAD_TOL, f"input {i} of {build.__name__}"


OPS = [
    ("add", lambda a, b: T.tsum(T.tanh(T.add(a, b))), [(3, 4), (3, 4)]),
    ("add_broadcast_row", lambda a, b: T.tsum(T.tanh(T.add(a, b))), [(3, 4), (4,)]),
    ("add_broadcast_col", lambda a, b: T.tsum(T.tanh(T.add(a, b))), [(3, 4), (3, 1)]),
    ("sub", lambda a, b: T.tsum(T.tanh(T.sub(a, b))), [(3, 4), (1, 4)]),
    ("mul", lambda a, b: T.tsum(T.tanh(T.mul(a, b))), [(3, 4), (3, 4)]),
    ("mul_broadcast", lambda a, b: T.tsum(T.tanh(T.mul(a, b))), [(3, 4), (1, 4)]),
    ("neg", lambda a: T.tsum(T.tanh(T.neg(a))), [(5,)]),
    ("matmul", lambda a, b: T.tsum(T.tanh(T.matmul(a, b))), [(3, 4), (4, 2)]),
    ("transpose", lambda a: T.tsum(T.tanh(T.transpose(a))), [(3, 4)]),
    ("reshape", lambda a: T.tsum(T.tanh(T.reshape(a, (4, 3)))), [(3, 4)]),
    ("concat0", lambda a, b: T.tsum(T.tanh(T.concat([a, b], axis=0))), [(2, 3), (4, 3)]),
    ("concat1", lambda a, b: T.tsum(T.tanh(T.concat([a, b], axis=1))), [(3, 2), (3, 4)]),
    ("slice", lambda a: T.tsum(T.tanh(T.slice_axis(a, 1, 1, 3))), [(3, 4)]),
    ("flip0", lambda a: T.tsum(T.tanh(T.flip0(a))), [(4, 3)]),
    ("gather", lambda a: T.tsum(T.tanh(T.gather_rows(a, [0, 2, 2, 1]))), [(4, 3)]),
    ("tanh", lambda a: T.tsum(T.tanh(a)), [(3, 4)]),
    ("sigmoid", lambda a: T.tsum(T.sigmoid(a)), [(3, 4)]),
    ("relu", lambda a: T.tsum(T.relu(a)), [(3, 4)]),
    ("hinge", lambda a: T.tsum(T.hinge(a)), [(7,)]),
    ("softmax", lambda a: T.tsum(T.mul(T.softmax(a, axis=1), T.softmax(a, axis=1))), [(3, 4)]),
    ("logsumexp", lambda a: T.tsum(T.logsumexp(a, axis=1)), [(3, 4)]),
    ("logsumexp_keep", lambda a: T.tsum(T.logsumexp(a, axis=0, keepdims=True)), [(3, 4)]),
    ("sum_all", lambda a: T.tsum(a), [(3, 4)]),
    ("sum_axis", lambda a: T.tsum(T.tanh(T.tsum(a, axis=0, keepdims=True))), [(3, 4)]),
    ("mean_all", lambda a: T.tmean(a), [(3, 4)]),
    ("mean_axis", lambda a: T.tsum(T.tanh(T.tmean(a, axis=1, keepdims=True))), [(3, 4)]),
]


@pytest.mark.parametrize("name,build,shapes", OPS, ids=[o[0] for o in OPS])
def test_primitive_gradients_match_finite_differences(name, build, shapes):
    for seed in range(25):
        check_grads(build, shapes, seed=seed)


def test_dropout_gradient():
    mask = np.array([[1.0, 0.0, 1.0], [1.0, 1.0, 0.0]])

    def build(a):
        return T.tsum(T.tanh(T.dropout(a, mask, 0.7)))

    for seed in range(25):
        check_grads(build, [(2, 3)], seed=seed)


def test_forward_values():
    assert abs(T.tanh(T.Tensor(0.5)).item() - 0.46211715726000974) < 1e-12
    s = T.softmax(T.Tensor([[0.0, 0.0, 0.0]]), axis=1)
    assert np.allclose(s.data, 1.0 / 3.0)
    out = T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((3, 1))))
    assert out.shape == (2, 1)


def test_softmax_rows_sum_to_one_and_shift_invariance():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(6, 5)) * 10
    a = T.softmax(T.Tensor(x), axis=1).data
    b = T.softmax(T.Tensor(x + 123.456), axis=1).data
    assert np.all(np.abs(a.sum(axis=1) - 1.0) <= 1e-12)
    assert np.allclose(a, b, atol=1e-12)


def test_matmul_shape_error_names_op():
    with pytest.raises(DimensionError, match="matmul"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_backward_simple_cases():
    x = T.Tensor([1.0, 2.0, 3.0])
    with T.Graph() as g:
        loss = T.tsum(x)
    T.backward(g, loss)
    assert np.array_equal(x.grad, np.ones(3))

    y = T.Tensor([1.0, 2.0])
    with T.Graph() as g:
        loss = T.tmean(T.mul(y, y))
    T.backward(g, loss)
    assert np.allclose(y.grad, [1.0, 2.0])


def test_backward_rejects_non_scalar_loss():
    x = T.Tensor([1.0, 2.0])
    with T.Graph() as g:
        out = T.mul(x, x)
    with pytest.raises(ContractError):
        T.backward(g, out)


def test_unused_leaf_gets_zero_grad():
    x = T.Tensor([1.0, 2.0])
    y = T.Tensor([3.0])
    with T.Graph() as g:
        g._ensure(y)  # participates in the graph but not in the loss
        loss = T.tsum(x)
    T.backward(g, loss)
    assert np.array_equal(y.grad, np.zeros(1))


def test_finite_difference_basics():
    ones = T.finite_difference_gradient(lambda t: T.tsum(t), T.Tensor(np.arange(6.0).reshape(2, 3)))
    assert np.all(np.abs(ones.data - 1.0) <= 1e-9)
    quad = T.finite_difference_gradient(lambda t: T.mul(t, t), T.Tensor(3.0), eps=1e-5)
    assert abs(quad.item() - 6.0) <= 1e-8
    with pytest.raises(ContractError):
        T.finite_difference_gradient(lambda t: T.tsum(t), T.Tensor(1.0), eps=0.0)


def test_two_layer_net_17_params_matches_finite_differences():
    rng = np.random.default_rng(11)
    x = np.array([[0.3, -0.7, 1.1]])
    w1 = T.Tensor(rng.normal(size=(3, 3)))  # 9
    b1 = T.Tensor(rng.normal(size=(3,)))    # 3
    w2 = T.Tensor(rng.normal(size=(3, 1)))  # 3
    b2 = T.Tensor(rng.normal(size=(1,)))    # 1
    scale = T.Tensor(rng.normal(size=()))   # 1  -> 17 parameters

    def net(*_):
        h = T.tanh(T.add(T.matmul(T.Tensor(x), w1), b1))
        return T.mul(T.tsum(T.add(T.matmul(h, w2), b2)), scale)

    params = [w1, b1, w2, b2, scale]
    with T.Graph() as g:
        loss = net()
    T.backward(g, loss)
    for p in params:
        def f(v, p=p):
            old = p.data
            p.data = v.data
            try:
                return net()
            finally:
                p.data = old

        fd = T.finite_difference_gradient(f, T.Tensor(p.data.copy()))
        assert rel_err(p.grad, fd.data) <= GRAD_TOL


def test_graph_replay_is_bitwise_deterministic():
    def run():
        rng = T.derive_rng(123, "replay")
        x = T.Tensor(rng.normal(size=(4, 4)))
        w = T.Tensor(rng.normal(size=(4, 2)))
        with T.Graph() as g:
            loss = T.tmean(T.mul(T.tanh(T.matmul(x, w)), T.sigmoid(T.matmul(x, w))))
        T.backward(g, loss)
        return loss.item(), x.grad.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2
    assert np.array_equal(g1, g2)


def test_derive_rng_is_stable_and_tag_sensitive():
    a = T.derive_rng(5, "x", 1).random(4)
    b = T.derive_rng(5, "x", 1).random(4)
    c = T.derive_rng(5, "x", 2).random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


class TestCheckpoint:
    def test_round_trip_is_byte_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        entries = {
            "alpha/w": rng.normal(size=(3, 4)),
            "alpha/b": rng.normal(size=(4,)),
            "scalar": np.array(3.75),
        }
        p = tmp_path / "model.ckpt"
        T.save_checkpoint(p, entries)
        loaded = T.load_checkpoint(p)
        assert list(loaded) == list(entries)
        for k in entries:
            assert np.array_equal(loaded[k], entries[k])
        assert T.checkpoint_bytes(loaded) == p.read_bytes()

    def test_bad_magic_rejected(self):
        with pytest.raises(CheckpointError):
            T.load_checkpoint_bytes(b"NOTACKPT" + b"\x00" * 16)

    def test_truncation_rejected(self, tmp_path):
        p = tmp_path / "model.ckpt"
        T.save_checkpoint(p, {"w": np.ones((2, 2))})
        data = p.read_bytes()
        with pytest.raises(CheckpointError):
            T.load_checkpoint_bytes(data[:-5])

    def test_trailing_bytes_rejected(self, tmp_path):
        p = tmp_path / "model.ckpt"
        T.save_checkpoint(p, {"w": np.ones(2)})
        with pytest.raises(CheckpointError):
            T.load_checkpoint_bytes(p.read_bytes() + b"\x00")

    def test_meta_entries_survive(self):
        meta = {"kind": "edu", "vocab": [["[UNK]", True], ["word", False]], "n": 3}
        arr = T.meta_to_array(meta)
        assert T.array_to_meta(arr) == meta
