import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from episeg import tensor as T
from episeg.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from episeg.optim import SgdState, sgd_step
from episeg.tensor import NonFiniteError, ShapeError, TapeError, Tensor

from helpers import FD_RTOL, gradcheck, naive_conv2d, op_cases

CASES = op_cases()


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradients_match_central_differences(name):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(5):
        build, inputs = CASES[name](rng)
        assert gradcheck(build, inputs) < FD_RTOL


def test_conv_sum_of_ones():
    out = T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1) and out.data[0, 0, 0] == 9.0


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 5, 4))
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    assert np.array_equal(out.data, x)


def test_conv_matches_naive_loops_on_random_input():
    rng = np.random.default_rng(1)
    x, k, b = rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    out = T.conv2d(Tensor(x), Tensor(k), Tensor(b)).data
    assert out.shape == (3, 3, 3)
    assert np.max(np.abs(out - naive_conv2d(x, k, b))) < 1e-12


@settings(max_examples=25, deadline=None)
@given(cin=st.integers(1, 4), cout=st.integers(1, 4), h=st.integers(3, 16), w=st.integers(3, 16),
       stride=st.integers(1, 2), pad=st.integers(0, 1), seed=st.integers(0, 2**31))
def test_conv_bit_exact_on_integer_valued_input(cin, cout, h, w, stride, pad, seed):
    # integer data keeps every partial sum exact, so summation order cannot matter
    rng = np.random.default_rng(seed)
    x = rng.integers(-8, 9, size=(cin, h, w)).astype(float)
    k = rng.integers(-4, 5, size=(cout, cin, 3, 3)).astype(float)
    b = rng.integers(-4, 5, size=cout).astype(float)
    out = T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, pad).data
    assert out.shape == (cout, (h + 2 * pad - 3) // stride + 1, (w + 2 * pad - 3) // stride + 1)
    assert np.array_equal(out, naive_conv2d(x, k, b, stride, pad))


def test_conv_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), Tensor(np.zeros(1)))
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))


def test_elementwise_examples():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    assert T.relu(Tensor(-3.0)).item() == 0.0 and T.relu(Tensor(3.0)).item() == 3.0
    x = np.arange(4.0)
    assert np.array_equal(T.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)


def test_sigmoid_is_stable_for_large_logits():
    out = T.sigmoid(Tensor([-800.0, 800.0])).data
    assert out[0] == 0.0 and out[1] == 1.0


def test_upsample_examples():
    const = T.bilinear_upsample(Tensor(np.full((2, 3, 2), 4.25)), 7, 5).data
    assert np.all(const == 4.25)
    out = T.bilinear_upsample(Tensor([[[0.0, 1.0], [2.0, 3.0]]]), 3, 3).data
    assert out[0, 1, 1] == 1.5
    assert np.array_equal(out[0, [0, 0, -1, -1], [0, -1, 0, -1]], [0.0, 1.0, 2.0, 3.0])
    x = np.random.default_rng(2).normal(size=(2, 4, 3))
    assert np.array_equal(T.bilinear_upsample(Tensor(x), 4, 3).data, x)
    with pytest.raises(ShapeError):
        T.bilinear_upsample(Tensor(x), 3, 3)


def test_backward_of_sum_is_ones():
    x = Tensor(np.random.default_rng(3).normal(size=(2, 3, 4)), requires_grad=True)
    with T.Tape() as tape:
        loss = T.tensor_sum(x)
    T.backward(tape, loss)
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_fan_out_accumulates():
    x = Tensor([1.5, -2.0], requires_grad=True)
    with T.Tape() as tape:
        loss = T.tensor_sum(T.add(T.mul(x, x), T.mul(Tensor(3.0), x)))
    T.backward(tape, loss)
    assert np.allclose(x.grad, 2 * x.data + 3.0, rtol=0, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_shared_subexpression_equals_duplicated_tree(seed):
    rng = np.random.default_rng(seed)
    x0, W0 = rng.normal(size=4), rng.normal(size=(3, 4))
    # DAG: h used twice
    x, W = Tensor(x0, requires_grad=True), Tensor(W0, requires_grad=True)
    with T.Tape() as tape:
        h = T.sigmoid(T.linear(x, W, Tensor(np.zeros(3))))
        loss = T.tensor_sum(T.mul(h, h))
    T.backward(tape, loss)
    # tree: h recomputed from duplicated leaves, gradients summed by hand
    xa, xb = Tensor(x0, requires_grad=True), Tensor(x0, requires_grad=True)
    Wa, Wb = Tensor(W0, requires_grad=True), Tensor(W0, requires_grad=True)
    with T.Tape() as tape2:
        ha = T.sigmoid(T.linear(xa, Wa, Tensor(np.zeros(3))))
        hb = T.sigmoid(T.linear(xb, Wb, Tensor(np.zeros(3))))
        loss2 = T.tensor_sum(T.mul(ha, hb))
    T.backward(tape2, loss2)
    assert loss.item() == loss2.item()
    assert np.allclose(x.grad, xa.grad + xb.grad, rtol=1e-14, atol=1e-15)
    assert np.allclose(W.grad, Wa.grad + Wb.grad, rtol=1e-14, atol=1e-15)


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        y = T.mul(x, Tensor(2.0))
    with pytest.raises(ShapeError):
        T.backward(tape, y)
    with T.Tape() as other:
        z = T.tensor_sum(x)
    with pytest.raises(TapeError):
        T.backward(tape, z)
    with pytest.raises(TapeError):
        T.backward(tape, Tensor(1.0))


def test_non_finite_outputs_raise():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, math.nan])
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        T.mul(Tensor([1e200]), Tensor([1e200]))
    with pytest.raises(NonFiniteError):
        T.log(Tensor([0.0]))


def test_no_tape_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.Tape() as tape:
        with T.no_tape():
            T.mul(x, x)
        T.add(x, x)
    assert [n.op for n in tape.nodes] == ["add"]


def test_tapes_are_thread_confined():
    seen = {}

    def work(tag):
        x = Tensor(np.ones(2), requires_grad=True)
        with T.Tape() as tape:
            for _ in range(50):
                x = T.add(x, Tensor(1.0))
        seen[tag] = len(tape)

    threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert seen == {i: 50 for i in range(4)}


def test_maxpool_tie_goes_to_first_element():
    x = Tensor(np.ones((1, 2, 2)), requires_grad=True)
    with T.Tape() as tape:
        loss = T.tensor_sum(T.maxpool2(x))
    T.backward(tape, loss)
    assert np.array_equal(x.grad[0], [[1.0, 0.0], [0.0, 0.0]])


def test_bce_values():
    t = np.array([[1, 0], [0, 1]])
    assert T.bce_sum(Tensor(np.full((2, 2), 0.5)), t).item() == pytest.approx(4 * math.log(2), abs=1e-15)
    assert T.bce_sum(Tensor(t.astype(float)), t).item() / t.size < 1e-9


# --- optimizer -------------------------------------------------------------


def _param(value, grad):
    p = Tensor(np.array([value]), requires_grad=True)
    p.grad[...] = grad
    return p


def test_sgd_plain_step():
    p = _param(1.0, 2.0)
    sgd_step([p], SgdState(0.1, 0.0))
    assert p.data[0] == pytest.approx(0.8, abs=1e-15)
    assert p.grad[0] == 0.0


def test_sgd_momentum_two_steps():
    lr, g = 0.01, 3.0
    p = _param(0.0, g)
    state = SgdState(lr, 0.99)
    sgd_step([p], state)
    before = p.data[0]
    p.grad[...] = g
    sgd_step([p], state)
    assert before - p.data[0] == pytest.approx(lr * 1.99 * g, rel=1e-14)


def test_sgd_multiplier_scales_step_exactly():
    a, b = _param(0.0, 1.0), _param(0.0, 1.0)
    state = SgdState(0.5, 0.9)
    state.set_multiplier([b], 0.1)
    for _ in range(3):
        a0, b0 = a.data[0], b.data[0]
        sgd_step([a, b], state)
        assert (b0 - b.data[0]) == pytest.approx(0.1 * (a0 - a.data[0]), rel=1e-15)
        a.grad[...] = 1.0
        b.grad[...] = 1.0


def test_sgd_validation():
    with pytest.raises(ValueError):
        SgdState(0.0)
    with pytest.raises(ValueError):
        SgdState(0.1, 1.0)
    with pytest.raises(TapeError):
        sgd_step([Tensor([1.0])], SgdState(0.1))


# --- checkpoint ------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    tensors = {"a.weight": rng.normal(size=(2, 3, 1, 4)), "scalar": np.array(2.5), "b": rng.normal(size=5)}
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, tensors, 2**40 + 3, {"kind": "test", "n": [1, 2]})
    back, seed, cfg = load_checkpoint(path)
    assert seed == 2**40 + 3 and cfg == {"kind": "test", "n": [1, 2]}
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape and np.array_equal(back[k], tensors[k])


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    save_checkpoint(path, {"a": np.ones(3)}, 1, {})
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
