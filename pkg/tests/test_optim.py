import numpy as np
import pytest

from vislex.autodiff import Tensor
from vislex.errors import ContractError
from vislex.optim import AdamWState, SgdState, adamw_step, sgd_step


def param(value, grad):
    p = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
    p.grad = np.array(grad, dtype=np.float64)
    return p


def test_sgd_zero_lr_leaves_params():
    p = param([1.0, -2.0], [0.5, 0.5])
    sgd_step({"p": p}, SgdState(), lr=0.0, wd=0.0)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_sgd_single_step_rule():
    p = param([1.0], [0.5])
    sgd_step({"p": p}, SgdState(), lr=0.1, wd=0.0, momentum=0.0)
    np.testing.assert_allclose(p.data, [0.95])


def test_sgd_two_step_velocity_recursion():
    # v1 = 1, theta1 = -0.1; v2 = 0.9 + 1 = 1.9, theta2 = -0.29
    p = param([0.0], [1.0])
    state = SgdState()
    sgd_step({"p": p}, state, lr=0.1, wd=0.0, momentum=0.9)
    np.testing.assert_allclose(p.data, [-0.1])
    p.grad = np.array([1.0])
    sgd_step({"p": p}, state, lr=0.1, wd=0.0, momentum=0.9)
    np.testing.assert_allclose(p.data, [-0.29])


def test_sgd_weight_decay_in_gradient():
    p = param([2.0], [0.0])
    sgd_step({"p": p}, SgdState(), lr=0.1, wd=0.5, momentum=0.0)
    np.testing.assert_allclose(p.data, [2.0 - 0.1 * (0.5 * 2.0)])


def test_sgd_missing_grad_contract_error():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ContractError):
        sgd_step({"p": p}, SgdState(), lr=0.1, wd=0.0)


def test_adamw_zero_grad_zero_wd_noop():
    p = param([3.0, -1.0], [0.0, 0.0])
    adamw_step({"p": p}, AdamWState(), lr=0.1, wd=0.0)
    np.testing.assert_array_equal(p.data, [3.0, -1.0])


def test_adamw_first_step_bias_corrected():
    p = param([1.0], [0.5])
    adamw_step({"p": p}, AdamWState(), lr=0.1, wd=0.0)
    # mhat = g, vhat = g^2 at t=1, so the step is lr * g / (|g| + eps)
    expected = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8))
    np.testing.assert_allclose(p.data, [expected], rtol=1e-12)


def test_adamw_decoupled_decay_exact():
    p = param([2.0], [0.0])
    adamw_step({"p": p}, AdamWState(), lr=0.1, wd=0.01)
    np.testing.assert_array_equal(p.data, [2.0 * (1.0 - 0.001)])


def test_adamw_missing_grad_contract_error():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ContractError):
        adamw_step({"p": p}, AdamWState(), lr=0.1, wd=0.0)


def test_adamw_state_counts_steps():
    p = param([1.0], [0.1])
    state = AdamWState()
    for expected_t in (1, 2, 3):
        p.grad = np.array([0.1])
        adamw_step({"p": p}, state, lr=0.01, wd=0.0)
        assert state.t == expected_t
