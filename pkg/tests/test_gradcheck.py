import numpy as np
import pytest

from umq import tensor as T
from umq.gradcheck import grad_check


def test_cubic_polynomial():
    x = T.Tensor(np.array([2.0]), requires_grad=True)
    report = grad_check(lambda: T.tsum(x ** 3), [("x", x)], h=1e-5)
    assert report.max_rel_error < 1e-7
    assert not report.skipped


def test_hinge_exactly_at_kink_is_skipped_not_failed():
    x = T.Tensor(np.array([0.0]), requires_grad=True)
    report = grad_check(lambda: T.tsum(T.hinge(x)), [("x", x)], h=1e-6)
    assert ("x", 0) in report.skipped
    assert report.max_rel_error == 0.0


def test_composite_mlp_with_detach_passes():
    rng = np.random.default_rng(3)
    w1 = T.Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    w2 = T.Tensor(rng.normal(size=(6, 1)), requires_grad=True)
    x = T.Tensor(rng.normal(size=(3, 4)))

    def loss():
        hidden = T.relu(x @ w1)
        out = hidden @ w2
        # stop-gradient scaling: frozen during the check's replay passes
        scale = T.detach(T.tsum(out * out)) + 1.0
        return T.tsum(out * out) / scale

    report = grad_check(loss, [("w1", w1), ("w2", w2)], h=1e-6)
    assert report.max_rel_error < 1e-6


def test_wrong_backward_rule_is_caught():
    x = T.Tensor(np.array([[0.4, -1.2]]), requires_grad=True)

    def bad_tanh(t):
        out = T.Tensor(np.tanh(t.data), t.requires_grad, (t,), None, "tanh")
        out._backward_fn = lambda g: t._accumulate(g * 0.5)  # wrong rule
        return out

    report = grad_check(lambda: T.tsum(bad_tanh(x)), [("x", x)], h=1e-6)
    assert report.max_rel_error > 1e-2
    assert report.worst_param() == "x"


def test_requires_float64_params():
    x = T.Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    with pytest.raises(ValueError, match="float64"):
        grad_check(lambda: T.tsum(x * x), [("x", x)])


def test_branch_change_detection_near_relu_boundary():
    # a coordinate within h of the relu kink flips its mask under perturbation
    x = T.Tensor(np.array([5e-7, 1.0]), requires_grad=True)
    report = grad_check(lambda: T.tsum(T.relu(x)), [("x", x)], h=1e-6)
    assert ("x", 0) in report.skipped
    assert ("x", 1) not in report.skipped
    assert report.max_rel_error < 1e-8
