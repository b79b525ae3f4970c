"""Unit tests for the reverse-mode autodiff core.

Backward rules are checked two ways: against hand-computed oracles for the
small cases, and against central finite differences (eps=1e-5) for random
instances.  The full 20-instance battery lives in test_acceptance.
"""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reidlab import autodiff as ad
from reidlab.errors import ConfigError, ContractError, DomainError, ShapeError
from reidlab.gradcheck import check_fn, numeric_grad, rel_err


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestTensorBasics:
    def test_construction_coerces_to_float64(self):
        t = ad.tensor([[1, 2], [3, 4]])
        assert t.data.dtype == np.float64
        assert t.shape == (2, 2)
        assert not t.requires_grad

    def test_detach_shares_no_grad_link(self):
        a = ad.tensor([1.0, 2.0], requires_grad=True)
        b = a.detach()
        assert not b.requires_grad
        loss = ad.tsum(ad.mul(ad.tensor([3.0, 4.0]), b))
        assert not loss.requires_grad

    def test_backward_requires_scalar(self):
        a = ad.tensor([1.0, 2.0], requires_grad=True)
        out = ad.mul(a, a)
        with pytest.raises(ContractError):
            ad.backward(out)

    def test_grad_accumulates_across_backward_calls(self):
        a = ad.tensor([1.0, 2.0, 3.0], requires_grad=True)
        for _ in range(2):
            loss = ad.tsum(ad.mul(a, a))
            ad.backward(loss)
        # each pass contributes 2*a
        np.testing.assert_allclose(a.grad, 4.0 * a.data)
        ad.zero_grads([a])
        assert a.grad is None

    def test_fanout_gradients_add(self):
        a = ad.tensor([2.0], requires_grad=True)
        out = ad.add(ad.mul(a, a), ad.scale(a, 3.0))  # a^2 + 3a
        ad.backward(ad.tsum(out))
        np.testing.assert_allclose(a.grad, [7.0])

    def test_constants_are_pruned(self):
        a = ad.tensor([1.0], requires_grad=True)
        c = ad.constant([5.0])
        out = ad.tsum(ad.mul(a, c))
        ad.backward(out)
        assert c.grad is None
        np.testing.assert_allclose(a.grad, [5.0])


class TestExactOracles:
    def test_matmul_forward_and_backward_hand_values(self):
        a = ad.tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        b = ad.tensor([[5.0, 6.0], [7.0, 8.0]], requires_grad=True)
        c = ad.matmul(a, b)
        np.testing.assert_array_equal(c.data, [[19.0, 22.0], [43.0, 50.0]])
        ad.backward(ad.tsum(c))
        # d sum(AB) / dA = ones @ B^T, first entry 5+6=11
        np.testing.assert_array_equal(a.grad, [[11.0, 15.0], [11.0, 15.0]])
        np.testing.assert_array_equal(b.grad, [[4.0, 4.0], [6.0, 6.0]])

    def test_matmul_shape_error_mentions_both_shapes(self):
        a = ad.tensor(np.ones((2, 3)))
        b = ad.tensor(np.ones((2, 3)))
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(a, b)

    def test_cross_entropy_frozen_value(self):
        # scores (1, 0, 0), true class 0: loss = -ln(e / (e + 2))
        z = ad.tensor([1.0, 0.0, 0.0], requires_grad=True)
        loss = ad.cross_entropy_logits(z, 0)
        expected = -np.log(np.e / (np.e + 2.0))
        assert abs(loss.item() - expected) < 1e-12
        assert abs(loss.item() - 0.5514447139320511) < 1e-12

    def test_softmax_rows_sum_to_one(self, rng):
        x = ad.tensor(rng.normal(size=(5, 7)) * 30.0)
        s = ad.softmax(x, axis=1)
        np.testing.assert_allclose(s.data.sum(axis=1), np.ones(5), atol=1e-12)

    def test_broadcast_add_backward(self):
        a = ad.tensor(np.ones((2, 3)), requires_grad=True)
        b = ad.tensor(np.ones((3,)), requires_grad=True)
        ad.backward(ad.tsum(ad.add(a, b)))
        np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
        np.testing.assert_array_equal(b.grad, 2.0 * np.ones(3))

    def test_grad_reverse_contract(self):
        a = ad.tensor([1.0, -2.0], requires_grad=True)
        out = ad.grad_reverse(a, lam=1.0)
        np.testing.assert_array_equal(out.data, a.data)  # identity forward
        ad.backward(ad.tsum(ad.mul(out, ad.constant([3.0, 5.0]))))
        np.testing.assert_array_equal(a.grad, [-3.0, -5.0])  # pure negation at lam=1

    def test_grad_reverse_scales_by_lambda(self):
        a = ad.tensor([2.0], requires_grad=True)
        ad.backward(ad.tsum(ad.grad_reverse(a, lam=0.5)))
        np.testing.assert_array_equal(a.grad, [-0.5])

    def test_mean_pool_spatial(self):
        x = ad.tensor(np.arange(24, dtype=float).reshape(2, 3, 4), requires_grad=True)
        p = ad.mean_pool_spatial(x)
        np.testing.assert_allclose(p.data, x.data.mean(axis=(1, 2)))
        ad.backward(ad.tsum(p))
        np.testing.assert_allclose(x.grad, np.full((2, 3, 4), 1.0 / 12.0))


class TestDomainGuards:
    def test_log_rejects_nonpositive(self):
        with pytest.raises(DomainError):
            ad.log(ad.tensor([1.0, 0.0]))

    def test_div_rejects_zero(self):
        with pytest.raises(DomainError):
            ad.div(ad.tensor([1.0]), ad.tensor([0.0]))

    def test_sqrt_rejects_negative(self):
        with pytest.raises(DomainError):
            ad.sqrt(ad.tensor([-1.0]))

    def test_exp_overflow_stays_finite(self):
        out = ad.exp(ad.tensor([1000.0, -1000.0, 0.0]))
        assert np.all(np.isfinite(out.data))

    def test_sigmoid_extremes_finite(self):
        out = ad.sigmoid(ad.tensor([-800.0, 800.0]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [0.0, 1.0], atol=1e-12)


class TestConv2d:
    def test_matches_naive_loop(self, rng):
        x = rng.normal(size=(2, 5, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        out = ad.conv2d(ad.tensor(x), ad.tensor(w), stride=1, pad=1).data
        naive = np.zeros((3, 5, 6))
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        for o in range(3):
            for i in range(5):
                for j in range(6):
                    naive[o, i, j] = (xp[:, i : i + 3, j : j + 3] * w[o]).sum()
        np.testing.assert_allclose(out, naive, atol=1e-12)

    def test_strided_shape_halves_exactly(self, rng):
        # kernel 4 / stride 2 / pad 1 halves even inputs exactly
        x = ad.tensor(rng.normal(size=(1, 3, 8, 6)))
        w = ad.tensor(rng.normal(size=(4, 3, 4, 4)))
        out = ad.conv2d(x, w, stride=2, pad=1)
        assert out.shape == (1, 4, 4, 3)

    def test_non_integral_output_is_config_error(self, rng):
        x = ad.tensor(rng.normal(size=(1, 6, 6)))
        w = ad.tensor(rng.normal(size=(1, 1, 3, 3)))
        with pytest.raises(ConfigError):
            ad.conv2d(x, w, stride=4, pad=0)

    def test_gradients_match_fd(self, rng):
        x = ad.tensor(rng.normal(size=(2, 5, 6)), requires_grad=True)
        w = ad.tensor(rng.normal(size=(3, 2, 2, 2)), requires_grad=True)
        mix = ad.constant(rng.normal(size=(3, 4, 5)))
        err = check_fn(lambda: ad.tsum(ad.mul(ad.conv2d(x, w, stride=1, pad=0), mix)), [x, w])
        assert err < 1e-4


class TestSpatialOps:
    def test_avg_pool_requires_divisible(self, rng):
        with pytest.raises(ShapeError):
            ad.avg_pool2d(ad.tensor(rng.normal(size=(1, 5, 4))), 2)

    def test_avg_pool_value(self):
        x = ad.tensor(np.arange(16, dtype=float).reshape(1, 4, 4))
        out = ad.avg_pool2d(x, 2)
        np.testing.assert_allclose(out.data[0], [[2.5, 4.5], [10.5, 12.5]])

    def test_upsample_preserves_constant(self):
        x = ad.tensor(np.full((2, 3, 2), 7.0))
        out = ad.upsample_bilinear(x, (9, 5))
        np.testing.assert_allclose(out.data, np.full((2, 9, 5), 7.0), atol=1e-12)

    def test_upsample_backward_fd(self, rng):
        x = ad.tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        mix = ad.constant(rng.normal(size=(2, 7, 9)))
        err = check_fn(lambda: ad.tsum(ad.mul(ad.upsample_bilinear(x, (7, 9)), mix)), [x])
        assert err < 1e-4

    def test_bilinear_sample_integer_positions_exact(self, rng):
        x = rng.normal(size=(3, 6, 5))
        out = ad.bilinear_sample(ad.tensor(x), ad.tensor([2.0, 3.0]))
        np.testing.assert_array_equal(out.data, x[:, 2, 3])

    def test_bilinear_sample_out_of_bounds_is_zero(self, rng):
        x = ad.tensor(rng.normal(size=(3, 6, 5)))
        out = ad.bilinear_sample(x, ad.tensor([-10.0, 2.0]))
        np.testing.assert_array_equal(out.data, np.zeros(3))

    def test_bilinear_sample_fd_both_inputs(self, rng):
        x = ad.tensor(rng.normal(size=(2, 5, 6)), requires_grad=True)
        pos = ad.tensor([1.37, 2.82], requires_grad=True)
        mix = ad.constant(rng.normal(size=2))
        err = check_fn(lambda: ad.tsum(ad.mul(ad.bilinear_sample(x, pos), mix)), [x, pos])
        assert err < 1e-4


class TestFiniteDifferenceSweep:
    """One random instance per op here; the acceptance battery runs 20."""

    @pytest.mark.parametrize(
        "name",
        ["add", "mul", "div", "sigmoid", "exp", "log", "softmax", "l2_norm", "take", "concat"],
    )
    def test_op(self, name, rng):
        a = ad.tensor(rng.uniform(0.3, 2.0, size=(3, 4)), requires_grad=True)
        b = ad.tensor(rng.uniform(0.3, 2.0, size=(3, 4)), requires_grad=True)
        mix = ad.constant(rng.normal(size=(3, 4)))
        builders = {
            "add": lambda: ad.tsum(ad.mul(ad.add(a, b), mix)),
            "mul": lambda: ad.tsum(ad.mul(ad.mul(a, b), mix)),
            "div": lambda: ad.tsum(ad.mul(ad.div(a, b), mix)),
            "sigmoid": lambda: ad.tsum(ad.mul(ad.sigmoid(a), mix)),
            "exp": lambda: ad.tsum(ad.mul(ad.exp(a), mix)),
            "log": lambda: ad.tsum(ad.mul(ad.log(a), mix)),
            "softmax": lambda: ad.tsum(ad.mul(ad.softmax(a, axis=1), mix)),
            "l2_norm": lambda: ad.l2_norm(a),
            "take": lambda: ad.tsum(ad.take(a, [0, 5, 5, 11])),
            "concat": lambda: ad.tsum(ad.mul(ad.concat([a, b], axis=0), ad.constant(np.ones((6, 4))))),
        }
        err = check_fn(builders[name], [a, b])
        assert err < 1e-4, f"{name}: rel err {err}"


@given(
    a=st.floats(min_value=-3.0, max_value=3.0, allow_nan=False),
    b=st.floats(min_value=-3.0, max_value=3.0, allow_nan=False),
)
@settings(max_examples=30, deadline=None)
def test_backward_is_linear_in_loss(a, b):
    """grad(a*L1 + b*L2) == a*grad(L1) + b*grad(L2) elementwise."""
    x = ad.tensor([0.7, -1.2, 2.1], requires_grad=True)

    def l1():
        return ad.tsum(ad.mul(x, x))

    def l2():
        return ad.tsum(ad.sigmoid(x))

    ad.zero_grads([x])
    ad.backward(l1())
    g1 = x.grad.copy()
    ad.zero_grads([x])
    ad.backward(l2())
    g2 = x.grad.copy()
    ad.zero_grads([x])
    ad.backward(ad.add(ad.scale(l1(), a), ad.scale(l2(), b)))
    np.testing.assert_allclose(x.grad, a * g1 + b * g2, atol=1e-9)


def test_same_inputs_bitwise_identical(rng):
    x = rng.normal(size=(3, 4, 5))
    w = rng.normal(size=(2, 3, 3, 3))
    r1 = ad.conv2d(ad.tensor(x), ad.tensor(w), stride=1, pad=1).data
    r2 = ad.conv2d(ad.tensor(x), ad.tensor(w), stride=1, pad=1).data
    assert np.array_equal(r1, r2)


def test_numeric_grad_helper_on_quadratic():
    t = ad.tensor([1.0, 2.0], requires_grad=True)
    g = numeric_grad(lambda: float((t.data**2).sum()), t)
    np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-6)
    assert rel_err(g, np.array([2.0, 4.0])) < 1e-6
