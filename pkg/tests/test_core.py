import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsprune import core as C
from capsprune.core import Adam, AdamState, Tape, Tensor, adam_step, grad_check, record_op
from capsprune.errors import (
    ConfigError, ContractError, DomainError, NonFiniteError, ShapeError, StaleTapeError,
)

from conftest import naive_conv


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- conv2d ---------------------------------------------------------------------------

def test_conv2d_zero_input_gives_bias(rng):
    x = t64(np.zeros((2, 3, 5, 5)))
    w = t64(rng.normal(size=(4, 3, 3, 3)))
    b = t64([0.5, -1.0, 2.0, 0.0])
    out = C.conv2d(x, w, b, stride=1, padding=1).data
    for c in range(4):
        assert np.all(out[:, c] == b.data[c])


def test_conv2d_scalar():
    out = C.conv2d(t64([[[[3.0]]]]), t64([[[[-2.5]]]]), t64([0.0]))
    assert out.data.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == -7.5


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_matches_loop_oracle(rng, stride, pad):
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = C.conv2d(t64(x), t64(w), t64(b), stride, pad).data
    assert np.max(np.abs(out - naive_conv(x, w, b, stride, pad))) < 1e-10


def test_conv2d_errors(rng):
    x = t64(rng.normal(size=(1, 2, 5, 5)))
    with pytest.raises(ShapeError):
        C.conv2d(x, t64(rng.normal(size=(3, 4, 3, 3))))
    with pytest.raises(ConfigError):
        C.conv2d(x, t64(rng.normal(size=(3, 2, 2, 2))), stride=2)  # (5-2)/2 not integral


# -- matmul ---------------------------------------------------------------------------

def test_matmul_identity_and_hand_values(rng):
    v = rng.normal(size=(3, 2))
    assert np.array_equal(C.matmul(t64(np.eye(3)), t64(v)).data, v)
    out = C.matmul(t64([[1, 2], [3, 4]]), t64([[5], [6]])).data
    assert out.tolist() == [[17.0], [39.0]]


def test_matmul_matches_loop_oracle(rng):
    a, b = rng.normal(size=(4, 7)), rng.normal(size=(7, 3))
    ref = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            for k in range(7):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.max(np.abs(C.matmul(t64(a), t64(b)).data - ref)) < 1e-12


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError):
        C.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


# -- softmax --------------------------------------------------------------------------

def test_softmax_uniform_and_stable():
    assert np.allclose(C.softmax(t64(np.zeros((2, 4))), axis=1).data, 0.25)
    out = C.softmax(t64([1000.0, 0.0]), axis=0).data
    assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-300)
    assert np.all(np.isfinite(out))


def test_softmax_matches_direct_formula(rng):
    x = rng.normal(size=5)
    ref = np.array([np.exp(v) for v in x]) / sum(np.exp(v) for v in x)
    assert np.max(np.abs(C.softmax(t64(x), 0).data - ref)) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_sums_to_one_and_positive(vals):
    out = C.softmax(t64(vals), 0).data
    assert abs(out.sum() - 1) < 1e-6
    assert np.all(out > 0)


# -- elementwise ----------------------------------------------------------------------

def test_elementwise_values():
    assert C.relu(t64([-1, 0, 2])).data.tolist() == [0, 0, 2]
    n = C.vector_norm(t64([3.0, 4.0])).item()
    assert abs(n - 5) < 1e-7
    assert C.square(t64([-3.0])).data.tolist() == [9.0]
    assert C.sqrt(t64([9.0])).data.tolist() == [3.0]
    assert (t64([1.0, 2.0]) + t64([3.0])).data.tolist() == [4.0, 5.0]
    assert (t64([1.0, 2.0]) * 3).data.tolist() == [3.0, 6.0]


def test_sqrt_domain_error():
    with pytest.raises(DomainError):
        C.sqrt(t64([-1.0]))


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        C.exp(t64([1000.0]))


def test_broadcast_mismatch():
    with pytest.raises(ShapeError):
        t64(np.ones(3)) + t64(np.ones(4))


# -- gradients of every primitive vs finite differences (64-bit, h=1e-5) ---------------

def _rand(rng, shape, positive=False):
    a = rng.normal(size=shape)
    return np.abs(a) + 0.5 if positive else a


PRIMITIVE_CASES = {
    "add": (lambda x, o: C.tsum(C.add(x, o) * o), (3, 4)),
    "sub": (lambda x, o: C.tsum(C.sub(o, x) * o), (3, 4)),
    "mul": (lambda x, o: C.tsum(C.mul(x, o)), (3, 4)),
    "div": (lambda x, o: C.tsum(C.div(o, x)), (3, 4)),
    "relu": (lambda x, o: C.tsum(C.relu(x) * o), (3, 4)),
    "square": (lambda x, o: C.tsum(C.square(x) * o), (3, 4)),
    "sqrt": (lambda x, o: C.tsum(C.sqrt(x) * o), (3, 4)),
    "exp": (lambda x, o: C.tsum(C.exp(x) * o), (3, 4)),
    "sum": (lambda x, o: C.tsum(C.tsum(x, axis=1, keepdims=True) * o[:, :1]), (3, 4)),
    "mean": (lambda x, o: C.tsum(C.mean(x, axis=0) * o[0]), (3, 4)),
    "reshape": (lambda x, o: C.tsum(C.reshape(x, (4, 3)) * o.reshape(4, 3)), (3, 4)),
    "transpose": (lambda x, o: C.tsum(C.transpose(x, (1, 0)) * o.T), (3, 4)),
    "vector_norm": (lambda x, o: C.tsum(C.vector_norm(x, axis=1) * o[:, 0]), (3, 4)),
    "softmax": (lambda x, o: C.tsum(C.softmax(x, axis=1) * o), (3, 4)),
    "matmul": (lambda x, o: C.tsum(C.matmul(x, o.T)), (3, 4)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(name, rng):
    f, shape = PRIMITIVE_CASES[name]
    positive = name in ("sqrt", "div")
    x = t64(_rand(rng, shape, positive))
    other = _rand(rng, shape, positive)
    if name == "relu":  # keep away from the kink
        x.data[np.abs(x.data) < 1e-2] += 0.1
    assert grad_check(lambda t: f(t, other), x, h=1e-5) < 1e-6


def test_conv2d_gradients(rng):
    x = t64(rng.normal(size=(2, 2, 5, 5)))
    w = t64(rng.normal(size=(3, 2, 3, 3)))
    b = t64(rng.normal(size=3))
    g = rng.normal(size=(2, 3, 3, 3))

    def f(_):
        return C.tsum(C.conv2d(x, w, b, stride=2, padding=1) * g)

    for t in (x, w, b):
        assert grad_check(f, t) < 1e-6


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradients(rng, training):
    x = t64(rng.normal(size=(3, 2, 2, 2)))
    gamma, beta = t64(rng.uniform(0.5, 1.5, 2)), t64(rng.normal(size=2))
    g = rng.normal(size=x.shape)

    def f(_):
        rm, rv = np.zeros(2), np.ones(2)
        return C.tsum(C.batch_norm(x, gamma, beta, rm, rv, training) * g)

    for t in (x, gamma, beta):
        assert grad_check(f, t) < 1e-6


def test_batch_norm_running_stats_update():
    x = t64(np.arange(16, dtype=float).reshape(2, 2, 2, 2))
    rm, rv = np.zeros(2), np.ones(2)
    C.batch_norm(x, t64(np.ones(2)), t64(np.zeros(2)), rm, rv, training=True)
    ch = x.data.transpose(1, 0, 2, 3).reshape(2, -1)
    assert np.allclose(rm, 0.1 * ch.mean(1))
    assert np.allclose(rv, 0.9 + 0.1 * ch.var(1, ddof=1))


# -- tape semantics ---------------------------------------------------------------------

def test_backward_sum_and_square():
    x = t64([1.0, -2.0, 3.0], grad=True)
    with Tape() as tape:
        loss = C.tsum(x)
    tape.backward(loss)
    assert x.grad.tolist() == [1, 1, 1]
    x.grad = None
    with Tape():
        loss = C.tsum(x * x)
    loss.backward()
    assert np.array_equal(x.grad, 2 * x.data)


def test_fan_out_accumulates():
    x = t64([0.5, 1.5], grad=True)
    with Tape():
        y = x * 1.0
        loss = C.tsum(y + y)
    loss.backward()
    assert y.grad.tolist() == [2, 2]
    assert x.grad.tolist() == [2, 2]


def test_backward_twice_is_stale():
    x = t64([1.0], grad=True)
    with Tape():
        loss = C.tsum(x * x)
    loss.backward()
    with pytest.raises(StaleTapeError):
        loss.backward()


def test_tape_not_reentrant_and_scalar_loss():
    tape = Tape()
    with tape:
        with pytest.raises(StaleTapeError):
            tape.__enter__()
        y = t64([1.0, 2.0], grad=True) * 2
    with pytest.raises(ContractError):
        tape.backward(y)


def test_no_tape_no_recording():
    x = t64([1.0], grad=True)
    y = x * 2
    assert not y.requires_grad
    with pytest.raises(ContractError):
        y.backward()


def test_tapes_are_thread_local(rng):
    results = {}

    def work(k):
        x = t64(np.full(3, float(k)), grad=True)
        with Tape() as tape:
            loss = C.tsum(x * x)
        tape.backward(loss)
        results[k] = x.grad

    threads = [threading.Thread(target=work, args=(k,)) for k in range(1, 6)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    for k in range(1, 6):
        assert np.array_equal(results[k], np.full(3, 2.0 * k))


# -- Adam --------------------------------------------------------------------------------

def test_adam_zero_gradient_is_noop():
    p = t64([1.0, -2.0], grad=True)
    state = AdamState()
    for _ in range(3):
        adam_step({"p": p}, {"p": np.zeros(2)}, state)
        assert p.data.tolist() == [1.0, -2.0]
    assert state.t == 3


def test_adam_first_step_is_lr():
    p = t64([0.0], grad=True)
    adam_step({"p": p}, {"p": np.array([1.0])}, AdamState())
    assert p.data[0] == pytest.approx(-1e-3, rel=1e-6)


def test_adam_matches_recurrence_on_quadratic():
    target = np.array([1.0, -3.0, 0.5])
    p = t64([0.2, 0.1, -0.4], grad=True)
    opt = Adam({"p": p}, lr=0.05)
    # straight-line reference
    q, m, v = p.data.copy(), np.zeros(3), np.zeros(3)
    for t in range(1, 4):
        opt.zero_grad()
        with Tape() as tape:
            loss = C.tsum(C.square(p - target))
        tape.backward(loss)
        opt.step()
        g = 2 * (q - target)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        q = q - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.max(np.abs(p.data - q)) < 1e-12


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step({"p": t64([1.0, 2.0], grad=True)}, {"p": np.zeros(3)}, AdamState())


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 50))
def test_adam_zero_gradient_any_t(t):
    p = t64([0.3], grad=True)
    state = AdamState(t=t - 1)
    adam_step({"p": p}, {"p": np.zeros(1)}, state)
    assert p.data[0] == 0.3 and state.t == t


# -- grad_check itself --------------------------------------------------------------------

def test_grad_check_sum_of_squares(rng):
    assert grad_check(lambda t: C.tsum(C.square(t)), t64(rng.normal(size=6))) < 1e-9


def test_grad_check_rejects_non_scalar(rng):
    with pytest.raises(ContractError):
        grad_check(lambda t: t * 2, t64(rng.normal(size=3)))


def test_grad_check_catches_wrong_backward(rng):
    def bad_cube(x):
        # derivative should be 3x^2; report 2x instead
        return record_op(x.data ** 3, (x,), lambda g: (g * 2 * x.data,), "bad_cube")

    x = t64(rng.uniform(1.0, 2.0, size=4))
    assert grad_check(lambda t: C.tsum(bad_cube(t)), x) > 1e-2
