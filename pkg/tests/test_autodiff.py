import numpy as np
import pytest
from hypothesis import given, strategies as st

from coloke.autodiff import ParamVector, Tape, backward, grad_check
from coloke.errors import DimensionError, NonFiniteError
from coloke.koopman import Buffer, LiftedModel, multistep_loss
from coloke.learners import LearnerConfig, OnlineAELearner


def test_quadratic_gradient():
    p = ParamVector.from_arrays({"p": np.array([1.0, 2.0, 3.0])})
    tape = Tape(p)
    g = backward(tape, tape.sqnorm(tape.param("p")))
    np.testing.assert_array_equal(g.view("p"), [2.0, 4.0, 6.0])


def test_tanh_slope_at_zero():
    p = ParamVector.from_arrays({"p": np.array(0.0)})
    tape = Tape(p)
    g = backward(tape, tape.sum(tape.tanh(tape.param("p"))))
    assert g.view("p") == 1.0


def test_unused_parameter_gets_zero():
    p = ParamVector.from_arrays({"a": np.ones(2), "b": np.ones(3)})
    tape = Tape(p)
    g = backward(tape, tape.sqnorm(tape.param("a")))
    np.testing.assert_array_equal(g.view("b"), 0.0)


def _matvec_loss(x, y):
    def loss(tape):
        return tape.sqnorm(tape.param("K") @ x - y)
    return loss


def test_matvec_gradient_against_finite_differences(rng):
    p = ParamVector.from_arrays({"K": rng.normal(size=(2, 2))})
    x, y = rng.normal(size=2), rng.normal(size=2)
    loss = _matvec_loss(x, y)
    tape = Tape(p)
    g = backward(tape, loss(tape)).values
    h = 1e-5
    for i in range(4):
        up, down = p.copy(), p.copy()
        up.values[i] += h
        down.values[i] -= h
        fd = (loss(Tape(up)).value - loss(Tape(down)).value) / (2 * h)
        assert abs(g[i] - fd) / max(1.0, abs(fd)) < 1e-5


def test_grad_check_quadratic_and_constant(rng):
    p = ParamVector.from_arrays({"p": rng.normal(size=5)})
    assert grad_check(lambda t: t.sqnorm(t.param("p")), p) < 1e-8
    assert grad_check(lambda t: t.sum(t.constant(np.ones(3))), p) == 0.0


def test_grad_check_rejects_non_finite_loss():
    p = ParamVector.from_arrays({"p": np.ones(2)})
    with pytest.raises(NonFiniteError):
        grad_check(lambda t: t.sqnorm(t.param("p") - np.array([np.inf, 0.0])), p)


def test_non_scalar_root_rejected():
    p = ParamVector.from_arrays({"p": np.ones(2)})
    tape = Tape(p)
    with pytest.raises(DimensionError):
        backward(tape, tape.tanh(tape.param("p")))


def test_nan_adjoint_reports_node():
    p = ParamVector.from_arrays({"p": np.ones(1)})
    tape = Tape(p)
    diff = tape.param("p") - np.array([np.nan])
    with pytest.raises(NonFiniteError) as info:
        backward(tape, tape.sqnorm(diff))
    assert info.value.node_id == diff.id


def test_multistep_loss_gradient_check_w3(rng):
    model = LiftedModel.create(2, seed=3)
    model.params.values[:] += 0.1 * rng.normal(size=len(model.params))
    buf = Buffer.from_states(rng.normal(size=(4, 2)))
    assert buf.w == 3
    assert grad_check(lambda t: multistep_loss(model, buf, t), model.params) < 1e-5


def test_onlineae_loss_gradient_check_default_network(rng):
    ae = OnlineAELearner(2, LearnerConfig(w=3))
    X = rng.normal(size=(4, 2))
    assert grad_check(lambda t: ae.loss(t, X), ae.params) < 1e-5


@pytest.mark.parametrize("seed", range(20))
def test_training_losses_pass_grad_check(seed):
    # random points on narrower networks keep the full coordinate sweep cheap
    rng = np.random.default_rng(seed)
    w = 2 + seed % 2
    d = 2 + seed % 3 // 2
    hidden = tuple(int(h) for h in rng.integers(2, 9, size=int(rng.integers(1, 4))))
    model = LiftedModel.create(d, hidden=hidden, seed=seed)
    model.params.values[:] += 0.2 * rng.normal(size=len(model.params))
    buf = Buffer.from_states(rng.uniform(-2, 2, size=(w + 1, d)))
    assert grad_check(lambda t: multistep_loss(model, buf, t), model.params) < 1e-4

    ae = OnlineAELearner(2, LearnerConfig(seed=seed, w=w, hidden=hidden))
    ae.params.values[:] += 0.2 * rng.normal(size=len(ae.params))
    X = rng.uniform(-2, 2, size=(w + 1, 2))
    assert grad_check(lambda t: ae.loss(t, X), ae.params) < 1e-4


def _graph(tape, x):
    # a small nonlinear graph touching every primitive
    W = tape.param("W")
    h = tape.tanh(W @ x + tape.param("b"))
    parts = tape.concat([h, tape.index(h, slice(0, 1))])
    return tape.sum(tape.scale(parts, 0.5)) + tape.sqnorm(tape.transpose(W) @ h, None)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_gradient_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    p = ParamVector.from_arrays({"W": rng.normal(size=(3, 3)), "b": rng.normal(size=3)})
    x1, x2 = rng.normal(size=3), rng.normal(size=3)

    def grad(fn):
        tape = Tape(p)
        return backward(tape, fn(tape)).values

    gf = grad(lambda t: _graph(t, x1))
    gg = grad(lambda t: _graph(t, x2))
    gc = grad(lambda t: tape_combo(t, a, b, x1, x2))
    np.testing.assert_allclose(gc, a * gf + b * gg, atol=1e-12, rtol=1e-12)


def tape_combo(tape, a, b, x1, x2):
    return tape.scale(_graph(tape, x1), a) + tape.scale(_graph(tape, x2), b)


def test_backward_is_deterministic(rng):
    model = LiftedModel.create(2, seed=1)
    buf = Buffer.from_states(rng.normal(size=(6, 2)))
    grads = []
    for _ in range(2):
        tape = Tape(model.params)
        grads.append(backward(tape, multistep_loss(model, buf, tape)).values)
    np.testing.assert_array_equal(grads[0], grads[1])
