import numpy as np
import numpy.testing as npt
import pytest

from metanorm import autodiff as ad
from metanorm.autodiff import Tape, Variable, backward, finite_diff_check
from metanorm.errors import NumericError, ShapeError


def test_sum_gradient_is_ones():
    x = Variable(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.vsum(x)
        backward(tape, loss)
    npt.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_quadratic_gradient():
    x = Variable(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.vsum(x * x)
        backward(tape, loss)
    npt.assert_array_equal(x.grad, [2.0, 4.0])


def test_accumulation_on_reuse():
    # y = x + x gets the sum of single-use adjoints
    x = Variable(np.array([3.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.vsum(x + x)
        backward(tape, loss)
    npt.assert_array_equal(x.grad, [2.0])


def test_double_backward_doubles_grads():
    x = Variable(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.vsum(x * x)
        backward(tape, loss)
        first = x.grad.copy()
        backward(tape, loss)
    npt.assert_array_equal(x.grad, 2 * first)


def test_non_scalar_loss_rejected():
    x = Variable(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * x
        with pytest.raises(ShapeError):
            backward(tape, y)


def test_loss_off_tape_rejected():
    x = Variable(np.ones(3), requires_grad=True)
    with Tape():
        loss = ad.vsum(x)
    with Tape() as other:
        with pytest.raises(ValueError):
            backward(other, loss)


def test_relu_subgradient_zero_at_zero():
    x = Variable(np.array([0.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.vsum(ad.relu(x))
        backward(tape, loss)
    npt.assert_array_equal(x.grad, [0.0])


def test_matmul_gradients():
    a = Variable(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
    b = Variable(np.array([[1.0], [1.0]]), requires_grad=True)
    with Tape() as tape:
        loss = ad.vsum(ad.matmul(a, b))
        backward(tape, loss)
    npt.assert_array_equal(a.grad, [[1.0, 1.0], [1.0, 1.0]])
    npt.assert_array_equal(b.grad, [[4.0], [6.0]])


def test_broadcast_add_unbroadcasts_grad():
    x = Variable(np.ones((2, 3)), requires_grad=True)
    b = Variable(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = ad.vsum(x + b)
        backward(tape, loss)
    npt.assert_array_equal(b.grad, [2.0, 2.0, 2.0])


def test_repeat_duplicates_and_sums_back():
    x = Variable(np.array([[1.0, 2.0]]), requires_grad=True)
    with Tape() as tape:
        y = ad.repeat(x, 3, axis=1)
        npt.assert_array_equal(y.value, [[1, 1, 1, 2, 2, 2]])
        loss = ad.vsum(y)
        backward(tape, loss)
    npt.assert_array_equal(x.grad, [[3.0, 3.0]])


def test_conv2d_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = Variable(rng.standard_normal((2, 3, 5, 5)), requires_grad=True)
    w = Variable(rng.standard_normal((4, 3, 3, 3)) * 0.3, requires_grad=True)

    def f():
        return ad.vsum(y := ad.conv2d(x, w, stride=2, padding=1)) + ad.vsum(y * y)

    report = finite_diff_check(f, [x, w], names=["x", "w"])
    assert report.passed, [(e.name, e.max_rel_err) for e in report.entries]


def test_pools_match_finite_differences():
    rng = np.random.default_rng(4)
    x = Variable(rng.standard_normal((2, 2, 4, 4)), requires_grad=True)
    for pool in (ad.avg_pool2d, ad.max_pool2d):
        report = finite_diff_check(lambda: ad.vsum(pool(x, 2) * pool(x, 2)), [x])
        assert report.passed, pool.__name__


class TestFiniteDiffCheck:
    def test_quadratic_scalar(self):
        theta = Variable(np.array([3.0]), requires_grad=True)
        report = finite_diff_check(lambda: ad.vsum(theta * theta), [theta])
        assert report.passed
        assert report.entries[0].max_rel_err < 1e-8

    def test_relu_kink_excluded(self):
        theta = Variable(np.array([0.0]), requires_grad=True)
        report = finite_diff_check(lambda: ad.vsum(ad.relu(theta)), [theta])
        assert report.entries[0].excluded == 1

    def test_nondeterministic_f_detected(self):
        theta = Variable(np.array([1.0]), requires_grad=True)
        state = {"n": 0}

        def f():
            state["n"] += 1
            return ad.vsum(theta * float(state["n"]))

        with pytest.raises(NumericError):
            finite_diff_check(f, [theta])

    def test_wrong_backward_detected(self):
        theta = Variable(np.array([1.5]), requires_grad=True)

        def broken(a):
            out = Variable(a.value * 2.0)
            return ad._record(out, (a,), lambda g: (3.0 * g,))

        report = finite_diff_check(lambda: ad.vsum(broken(theta)), [theta])
        assert not report.passed
