import numpy as np
import pytest

from tsvt import tensor as T
from tsvt.optim import Adam, AdamState, adam_step
from tsvt.tensor import Tensor, UsageError


def test_missing_grad_rejected():
    w = Tensor([1.0], requires_grad=True)
    with pytest.raises(UsageError):
        adam_step(w, AdamState())


def test_zero_gradient_leaves_param_unchanged():
    w = Tensor([1.0, -2.0], requires_grad=True)
    w.zero_grad()
    state = AdamState()
    adam_step(w, state)
    np.testing.assert_array_equal(w.data, [1.0, -2.0])
    assert state.t == 1


def test_first_step_matches_hand_recurrence():
    # w=1, g=1: m_hat = 1, v_hat = 1, update = lr * 1/(sqrt(1)+eps)
    w = Tensor([1.0], requires_grad=True)
    w.grad = np.array([1.0])
    state = AdamState(lr=2e-4)
    adam_step(w, state)
    expected = 1.0 - 2e-4 * (1.0 / (1.0 + 1e-8))
    np.testing.assert_allclose(w.data, [expected], rtol=1e-12)


def test_descends_quadratic():
    # oracle first: plain gradient descent on w^2 from w=1 with lr=0.1
    # converges well below 0.5 in 100 steps; Adam must do at least as well.
    w_gd = 1.0
    for _ in range(100):
        w_gd -= 0.1 * 2 * w_gd
    assert abs(w_gd) < 0.5

    w = Tensor([1.0], requires_grad=True)
    state = AdamState(lr=0.1)
    for _ in range(100):
        w.zero_grad()
        T.backward(T.sum_(T.mul(w, w)))
        adam_step(w, state)
    assert abs(w.data[0]) < 0.5


def test_adam_collection_step_and_state_arrays():
    rng = np.random.default_rng(0)
    params = {
        "a": Tensor(rng.normal(size=(2, 2)), requires_grad=True),
        "b": Tensor(rng.normal(size=3), requires_grad=True),
    }
    opt = Adam(params, lr=0.01)
    opt.zero_grad()
    loss = T.add(
        T.sum_(T.mul(params["a"], params["a"])),
        T.sum_(T.mul(params["b"], params["b"])),
    )
    T.backward(loss)
    before = {k: p.data.copy() for k, p in params.items()}
    opt.step()
    for k, p in params.items():
        assert not np.array_equal(p.data, before[k])
    arrays = opt.state_arrays()
    assert set(arrays) == {"a.m", "a.v", "b.m", "b.v"}
