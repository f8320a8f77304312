import numpy as np
import pytest

from vislex import autodiff as ad
from vislex.autodiff import Tensor
from vislex.errors import ContractError
from vislex.gradcheck import finite_diff_check


def test_square_at_three():
    report = finite_diff_check(lambda x: x * x, Tensor([3.0]))
    assert abs(report.analytic[0] - 6.0) < 1e-12
    assert abs(report.numeric[0] - 6.0) < 1e-8
    assert report.passed


def test_report_carries_per_element_errors():
    report = finite_diff_check(lambda x: ad.tsum(x * x), Tensor(np.array([1.0, -2.0, 0.5])))
    assert report.rel_err.shape == (3,)
    assert report.max_rel_err == report.rel_err.max()


def test_nondeterministic_function_rejected():
    state = {"n": 0}

    def noisy(x):
        state["n"] += 1
        return x * float(state["n"])

    with pytest.raises(ContractError):
        finite_diff_check(noisy, Tensor([1.0]))


def test_stop_gradient_interior_surrogate():
    # f(x) = sum(x * sg[x]): the barred factor is held constant during FD,
    # matching the analytic gradient sg[x] (not 2x).
    x0 = np.array([1.5, -0.7, 2.0])
    frozen = x0.copy()

    def surrogate(x):
        return ad.tsum(x * Tensor(frozen))

    report = finite_diff_check(surrogate, Tensor(x0))
    assert report.passed
    np.testing.assert_allclose(report.analytic, frozen, atol=1e-12)

    # and the live graph produces the same analytic gradient
    live = Tensor(x0, requires_grad=True)
    ad.backward(ad.tsum(live * ad.stop_gradient(live)))
    np.testing.assert_allclose(live.grad, frozen, atol=1e-12)
