"""Autodiff engine: op correctness against finite differences and against
hand-computed closed forms, plus tape bookkeeping semantics."""

import numpy as np
import pytest

from camclone import optim
from camclone import tensor as T
from camclone.checkpoint import (
    CheckpointError,
    load_checkpoint,
    restore_into,
    save_checkpoint,
)
from camclone.tensor import Parameter, ShapeError, Tape, Tensor, backward

RNG = np.random.default_rng

TOL = 1e-4  # max relative error for all finite-difference comparisons


def test_matmul_identity():
    rng = RNG(0)
    v = rng.normal(size=3)
    out = T.matmul(Tensor(np.eye(3)), Tensor(v))
    assert np.allclose(out.data, v)


def test_add_broadcast_and_grad():
    rng = RNG(1)
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(3,))
    tape = Tape()
    ta, tb = tape.leaf(a), tape.leaf(b)
    out = T.sum_all(T.add(ta, tb))
    backward(out)
    assert np.allclose(tape.grad(ta), np.ones((4, 3)))
    # broadcast leaf accumulates over the stretched axis
    assert np.allclose(tape.grad(tb), np.full(3, 4.0))


def test_shape_mismatch_raises():
    a = Tensor(np.zeros((4, 3)))
    b = Tensor(np.zeros((4, 2)))
    with pytest.raises(ShapeError):
        T.add(a, b)
    with pytest.raises(ShapeError):
        T.mse_loss(a, b)
    with pytest.raises(ShapeError):
        T.matmul(a, Tensor(np.zeros((4, 4))))


def test_backward_requires_scalar():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    y = T.scale(x, 2.0)
    with pytest.raises(ShapeError):
        backward(y)


def test_mse_loss_value_and_grad():
    rng = RNG(2)
    p = rng.normal(size=(5, 2))
    t = rng.normal(size=(5, 2))
    tape = Tape()
    tp = tape.leaf(p)
    loss = T.mse_loss(tp, Tensor(t))
    assert np.isclose(float(loss.data), ((p - t) ** 2).mean())
    backward(loss)
    assert np.allclose(tape.grad(tp), 2.0 * (p - t) / p.size)


def test_softmax_rows_sum_to_one_and_shift_invariance():
    rng = RNG(3)
    x = rng.normal(size=(6, 9)) * 30.0  # large logits: stability check
    s = T.softmax(Tensor(x), axis=-1)
    assert np.allclose(s.data.sum(axis=-1), 1.0)
    s2 = T.softmax(Tensor(x + 123.0), axis=-1)
    assert np.allclose(s.data, s2.data, atol=1e-12)


def test_layer_norm_constant_vector_is_bias():
    gain = Tensor(np.full(8, 2.0))
    bias = Tensor(np.linspace(0, 1, 8))
    x = Tensor(np.full((3, 8), 7.0))
    out = T.layer_norm(x, gain, bias)
    assert np.allclose(out.data, np.broadcast_to(bias.data, (3, 8)), atol=1e-5)


def test_unused_parameter_gets_zero_gradient():
    tape = Tape()
    used = Parameter("used", np.ones((2, 2)))
    unused = Parameter("unused", np.ones((3,)))
    loss = T.sum_all(T.mul(tape.watch(used), tape.watch(unused)[0]))
    # actually reach only `used` and the first element of `unused`
    backward(loss)
    g = tape.param_grad(unused)
    assert g.shape == (3,)
    assert g[1] == 0.0 and g[2] == 0.0
    never = Parameter("never", np.ones(4))
    assert np.all(tape.param_grad(never) == 0.0)


def test_watch_same_parameter_twice_accumulates():
    tape = Tape()
    w = Parameter("w", np.array([3.0]))
    a = tape.watch(w)
    b = tape.watch(w)
    assert a is b
    loss = T.sum_all(T.mul(a, b))  # w^2
    backward(loss)
    assert np.allclose(tape.param_grad(w), 2.0 * w.value)


def test_separate_tapes_are_independent():
    w = Parameter("w", np.array([2.0, -1.0]))
    t1, t2 = Tape(), Tape()
    l1 = T.sum_all(T.scale(t1.watch(w), 3.0))
    l2 = T.sum_all(T.mul(t2.watch(w), t2.watch(w)))
    backward(l2)
    backward(l1)
    assert np.allclose(t1.param_grad(w), [3.0, 3.0])
    assert np.allclose(t2.param_grad(w), 2.0 * w.value)


@pytest.mark.parametrize("op_name", [
    "add", "sub", "mul", "matmul", "reshape", "permute", "slice", "concat",
    "softmax", "layer_norm", "gelu", "mse", "gather",
])
def test_grad_check_each_op(op_name):
    rng = RNG(hash(op_name) % 2**32)

    if op_name == "add":
        fn = lambda a, b: T.sum_all(T.mul(T.add(a, b), T.add(a, b)))
        ins = [rng.normal(size=(3, 4)), rng.normal(size=(4,))]
    elif op_name == "sub":
        fn = lambda a, b: T.sum_all(T.mul(T.sub(a, b), T.sub(a, b)))
        ins = [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))]
    elif op_name == "mul":
        fn = lambda a, b: T.sum_all(T.mul(a, b))
        ins = [rng.normal(size=(5,)), rng.normal(size=(3, 5))]
    elif op_name == "matmul":
        fn = lambda a, b: T.sum_all(T.mul(T.matmul(a, b), T.matmul(a, b)))
        ins = [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))]
    elif op_name == "reshape":
        fn = lambda a: T.sum_all(T.mul(T.reshape(a, (6, 2)), T.reshape(a, (6, 2))))
        ins = [rng.normal(size=(3, 4))]
    elif op_name == "permute":
        fn = lambda a: T.sum_all(T.mul(T.permute(a, (2, 0, 1)), T.permute(a, (2, 0, 1))))
        ins = [rng.normal(size=(2, 3, 4))]
    elif op_name == "slice":
        fn = lambda a: T.sum_all(T.mul(a[1:3, ::2], a[1:3, ::2]))
        ins = [rng.normal(size=(4, 6))]
    elif op_name == "concat":
        fn = lambda a, b: T.sum_all(T.mul(T.concat([a, b], axis=1), T.concat([a, b], axis=1)))
        ins = [rng.normal(size=(2, 3)), rng.normal(size=(2, 4))]
    elif op_name == "softmax":
        w = Tensor(rng.normal(size=(3, 5)))
        fn = lambda a: T.sum_all(T.mul(T.softmax(a, axis=-1), w))
        ins = [rng.normal(size=(3, 5))]
    elif op_name == "layer_norm":
        w = Tensor(rng.normal(size=(4, 7)))
        fn = lambda x, g, b: T.sum_all(T.mul(T.layer_norm(x, g, b), w))
        ins = [rng.normal(size=(4, 7)), rng.normal(size=7), rng.normal(size=7)]
    elif op_name == "gelu":
        w = Tensor(rng.normal(size=(3, 4)))
        fn = lambda a: T.sum_all(T.mul(T.gelu(a), w))
        ins = [rng.normal(size=(3, 4))]
    elif op_name == "mse":
        fn = lambda a, b: T.mse_loss(a, b)
        ins = [rng.normal(size=(4, 3)), rng.normal(size=(4, 3))]
    elif op_name == "gather":
        ids = np.array([0, 2, 2, 1])
        w = Tensor(rng.normal(size=(4, 3)))
        fn = lambda tbl: T.sum_all(T.mul(T.gather_rows(tbl, ids), w))
        ins = [rng.normal(size=(4, 3))]

    assert optim.grad_check(fn, ins) < TOL


def test_grad_check_composite_attention_like():
    """One grad check through a softmax(QK^T)V + layer-norm + gelu chain."""
    rng = RNG(99)
    n, d = 4, 6

    def fn(q, k, v, g, b):
        att = T.softmax(T.scale(T.matmul(q, T.permute(k, (1, 0))), d**-0.5), axis=-1)
        out = T.matmul(att, v)
        out = T.layer_norm(out, g, b)
        return T.mse_loss(T.gelu(out), Tensor(np.zeros((n, d))))

    ins = [rng.normal(size=(n, d)) for _ in range(3)] + [rng.normal(size=d), rng.normal(size=d)]
    assert optim.grad_check(fn, ins) < TOL


def test_adam_first_step_magnitude():
    # with constant unit gradient the first Adam step is ~lr regardless of scale
    p = Parameter("p", np.array([0.0, 0.0]))
    opt = optim.Adam([p], lr=0.1)
    tape = Tape()
    loss = T.sum_all(tape.watch(p))  # d/dp = 1
    backward(loss)
    opt.step(tape)
    assert np.allclose(p.value, -0.1, atol=1e-6)


def test_adam_respects_freeze():
    frozen = Parameter("f", np.array([1.0, 2.0]), trainable=False)
    live = Parameter("l", np.array([1.0, 2.0]))
    before = frozen.value.tobytes()
    opt = optim.Adam([frozen, live], lr=0.05)
    for _ in range(3):
        tape = Tape()
        loss = T.sum_all(T.add(T.mul(tape.watch(frozen), tape.watch(frozen)),
                               T.mul(tape.watch(live), tape.watch(live))))
        backward(loss)
        opt.step(tape)
    assert frozen.value.tobytes() == before
    assert not np.allclose(live.value, [1.0, 2.0])


def test_adam_descends_quadratic():
    rng = RNG(7)
    target = rng.normal(size=(4, 4))
    p = Parameter("p", np.zeros((4, 4)))
    opt = optim.Adam([p], lr=0.05)
    first = None
    for _ in range(400):
        tape = Tape()
        loss = T.mse_loss(tape.watch(p), Tensor(target))
        if first is None:
            first = float(loss.data)
        backward(loss)
        opt.step(tape)
    assert float(loss.data) < first * 1e-3


def test_checkpoint_round_trip_bitexact(tmp_path):
    rng = RNG(11)
    params = [
        Parameter("blocks.0.w", rng.normal(size=(7, 5)).astype(np.float32)),
        Parameter("blocks.0.b", rng.normal(size=5).astype(np.float32)),
        Parameter("emb", rng.normal(size=(3, 2, 4)).astype(np.float64)),
        Parameter("scalarish", np.array([1e-37, -0.0, 3e38], dtype=np.float32)),
    ]
    path = tmp_path / "w.ckpt"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert list(loaded) == [p.name for p in params]
    for p in params:
        assert loaded[p.name].dtype == p.value.dtype
        assert loaded[p.name].tobytes() == p.value.tobytes()


def test_checkpoint_header_and_errors(tmp_path):
    p = tmp_path / "w.ckpt"
    save_checkpoint(p, [Parameter("x", np.zeros(2, dtype=np.float32))])
    raw = p.read_bytes()
    assert raw[:4] == b"CCM1"
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    trunc = tmp_path / "trunc.ckpt"
    trunc.write_bytes(raw[:-3])
    with pytest.raises(CheckpointError):
        load_checkpoint(trunc)


def test_restore_into_validates(tmp_path):
    p1 = Parameter("a", np.ones((2, 2), dtype=np.float32))
    path = tmp_path / "w.ckpt"
    save_checkpoint(path, [p1])
    loaded = load_checkpoint(path)
    with pytest.raises(CheckpointError):
        restore_into([Parameter("b", np.ones(2, dtype=np.float32))], loaded)
    target = Parameter("a", np.zeros((2, 2), dtype=np.float32))
    restore_into([target], loaded)
    assert np.array_equal(target.value, p1.value)


def test_tensor_data_is_read_only():
    t = Tensor(np.ones(3))
    with pytest.raises(ValueError):
        t.data[0] = 5.0
