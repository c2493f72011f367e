"""
Unit tests for the tape-based reverse-mode autodiff engine.
"""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from SHARED.drive_sdk import autodiff as ad
from SHARED.drive_sdk.errors import DomainError, NonFiniteError, ShapeError

finite = st.floats(min_value=-5.0, max_value=5.0, allow_nan=False, allow_infinity=False)


def _grad(f, x):
    tape = ad.Tape()
    leaf = tape.leaf(x)
    return tape.backward(f(leaf)).wrt(leaf).data


class TestForwardOps:
    """Test forward values of the primitive ops"""

    def test_add(self):
        """Test elementwise addition"""
        np.testing.assert_array_equal(ad.add([1.0, 2.0], [3.0, 4.0]).data, [4.0, 6.0])

    def test_matmul_identity(self):
        """Test identity matrix leaves the operand unchanged"""
        x = np.arange(12.0).reshape(3, 4)
        np.testing.assert_array_equal(ad.matmul(np.eye(3), x).data, x)

    def test_sigmoid_symmetry_point(self):
        """Test sigmoid(0) is one half"""
        assert ad.sigmoid(0.0).item() == 0.5

    def test_sigmoid_extreme_inputs_are_finite(self):
        """Test sigmoid saturates without overflow"""
        out = ad.sigmoid(np.array([-1000.0, 1000.0])).data
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_wrap_angle(self):
        """Test wrap to (-pi, pi]"""
        assert ad.wrap_angle(3 * math.pi).item() == pytest.approx(math.pi)

    def test_constants_are_not_recorded(self):
        """Test ops on constants stay off any tape"""
        assert not (ad.constant(1.0) + 2.0).recorded

    def test_item_needs_single_element(self):
        """Test item() on a vector raises ShapeError"""
        with pytest.raises(ShapeError):
            ad.constant([1.0, 2.0]).item()

    def test_broadcast_mismatch(self):
        """Test incompatible shapes raise ShapeError"""
        with pytest.raises(ShapeError):
            ad.add(np.zeros(3), np.zeros(4))

    def test_conv2d_identity_kernel(self):
        """Test 1x1 identity kernel reproduces the input"""
        x = np.random.default_rng(0).normal(size=(1, 2, 5, 5))
        w = np.eye(2).reshape(2, 2, 1, 1)
        np.testing.assert_allclose(ad.conv2d(x, w).data, x)

    def test_conv2d_output_size(self):
        """Test stride 2 with padding 1 halves an even input"""
        out = ad.conv2d(np.zeros((2, 1, 8, 8)), np.zeros((3, 1, 3, 3)), stride=2, padding=1)
        assert out.shape == (2, 3, 4, 4)

    def test_conv2d_channel_mismatch(self):
        """Test conv2d rejects mismatched channels"""
        with pytest.raises(ShapeError):
            ad.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))


class TestDomainErrors:
    """Test undefined points raise instead of propagating NaN"""

    def test_division_by_zero(self):
        """Test division by zero raises DomainError"""
        with pytest.raises(DomainError):
            ad.div(1.0, np.array([1.0, 0.0]))

    def test_atan2_origin(self):
        """Test atan2(0, 0) raises DomainError"""
        with pytest.raises(DomainError):
            ad.atan2(0.0, 0.0)

    def test_log_non_positive(self):
        """Test log of zero raises DomainError"""
        with pytest.raises(DomainError):
            ad.log(0.0)

    def test_sqrt_negative(self):
        """Test sqrt of a negative value raises DomainError"""
        with pytest.raises(DomainError):
            ad.sqrt(-1.0)

    def test_fractional_power_at_zero(self):
        """Test p < 1 power at 0 raises DomainError"""
        with pytest.raises(DomainError):
            ad.power(np.array([0.0, 1.0]), 0.5)

    def test_exp_overflow(self):
        """Test overflow to infinity raises NonFiniteError"""
        with pytest.raises(NonFiniteError):
            ad.exp(1000.0)

    def test_errors_are_value_errors(self):
        """Test DomainError is catchable as ValueError"""
        with pytest.raises(ValueError):
            ad.log(-1.0)


class TestBackward:
    """Test reverse-mode gradients"""

    def test_product_rule(self):
        """Test d(xy) at (2, 3)"""
        tape = ad.Tape()
        x, y = tape.leaf(2.0), tape.leaf(3.0)
        grads = tape.backward(x * y)
        assert grads.wrt(x).item() == 3.0
        assert grads.wrt(y).item() == 2.0

    def test_sum_gives_ones(self):
        """Test gradient of sum is all ones with the input shape"""
        g = _grad(lambda t: t.sum(), np.zeros((2, 3)))
        np.testing.assert_array_equal(g, np.ones((2, 3)))

    def test_sin_at_zero(self):
        """Test d sin(x) at 0 is 1"""
        assert _grad(lambda t: t.sin(), 0.0) == pytest.approx(1.0)

    def test_reused_leaf_accumulates(self):
        """Test x used twice accumulates both paths"""
        assert _grad(lambda t: t * t + t, 3.0) == pytest.approx(7.0)

    def test_unused_leaf_gets_zero(self):
        """Test leaf not on the loss path has zero gradient"""
        tape = ad.Tape()
        x, y = tape.leaf([1.0, 2.0]), tape.leaf(5.0)
        grads = tape.backward((x * 2.0).sum())
        np.testing.assert_array_equal(grads.wrt(y).data, 0.0)

    def test_kink_derivatives_are_zero(self):
        """Test relu and abs have zero derivative at 0"""
        assert _grad(lambda t: t.relu(), 0.0) == 0.0
        assert _grad(lambda t: t.abs(), 0.0) == 0.0

    def test_sqrt_at_zero_has_zero_gradient(self):
        """Test sqrt'(0) convention"""
        assert _grad(lambda t: t.sqrt(), 0.0) == 0.0

    def test_where_routes_gradient(self):
        """Test where() sends gradient only to the selected branch"""
        tape = ad.Tape()
        a, b = tape.leaf([1.0, 2.0]), tape.leaf([3.0, 4.0])
        grads = tape.backward(ad.where(np.array([True, False]), a, b).sum())
        np.testing.assert_array_equal(grads.wrt(a).data, [1.0, 0.0])
        np.testing.assert_array_equal(grads.wrt(b).data, [0.0, 1.0])

    def test_non_scalar_loss(self):
        """Test backward on a vector raises ShapeError"""
        tape = ad.Tape()
        x = tape.leaf([1.0, 2.0])
        with pytest.raises(ShapeError):
            tape.backward(x * 2.0)

    def test_loss_from_other_tape(self):
        """Test backward on a foreign loss raises ValueError"""
        first, second = ad.Tape(), ad.Tape()
        loss = first.leaf(1.0) * 2.0
        with pytest.raises(ValueError):
            second.backward(loss)

    def test_mixing_tapes(self):
        """Test combining tensors from two tapes raises ValueError"""
        with pytest.raises(ValueError):
            ad.Tape().leaf(1.0) + ad.Tape().leaf(2.0)

    def test_linearity(self):
        """Test grad(a f + b g) = a grad f + b grad g"""
        x = np.array([0.3, -1.2, 2.0])
        f = lambda t: (t.sin() * t).sum()
        g = lambda t: (t.exp()).sum()
        combined = _grad(lambda t: 2.5 * f(t) - 0.5 * g(t), x)
        np.testing.assert_allclose(combined, 2.5 * _grad(f, x) - 0.5 * _grad(g, x), atol=1e-10)

    @given(arrays(np.float64, st.integers(1, 6), elements=finite))
    def test_sum_of_squares_gradient(self, x):
        """Test gradient of sum(x^2) is 2x"""
        np.testing.assert_allclose(_grad(lambda t: t.square().sum(), x), 2.0 * x, atol=1e-12)


class TestGradCheck:
    """Test the finite-difference checker"""

    def test_sum_of_squares(self):
        """Test exact quadratic passes tightly"""
        x = np.random.default_rng(1).normal(size=5)
        assert ad.grad_check(lambda t: t.square().sum(), x, eps=1e-5) < 1e-6

    def test_constant_function(self):
        """Test constant function gives zero error"""
        assert ad.grad_check(lambda t: ad.constant(4.0), np.ones(3)) == 0.0

    def test_composite_pipeline(self):
        """Test a conv + tanh + matmul pipeline"""
        rng = np.random.default_rng(2)
        w = rng.normal(size=(2, 1, 3, 3))
        m = rng.normal(size=(8, 1))

        def f(t):
            h = ad.conv2d(t.reshape(1, 1, 4, 4), w, padding=1).tanh()
            return ad.matmul(h.reshape(1, 32)[:, :8], m).sum()

        assert ad.grad_check(f, rng.normal(size=16)) < 1e-6

    def test_bad_eps(self):
        """Test eps must be positive"""
        with pytest.raises(ValueError):
            ad.grad_check(lambda t: t.sum(), np.ones(2), eps=0.0)
