"""Channel attention heads, shared embedding, and the adversarial diversity loss."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import reidlab.autodiff as ad
from reidlab import attention
from reidlab.errors import ConfigError


def test_zero_params_gate_is_exactly_half():
    # sigmoid(0) = 0.5 with no rounding, so the gated block is exactly U/2
    rng = np.random.default_rng(0)
    u = ad.tensor(rng.normal(size=(3, 4, 2)))
    p = attention.ChannelAttentionParams(
        ad.tensor(np.zeros((5, 3))), ad.tensor(np.zeros((3, 5)))
    )
    out = attention.channel_attention(u, p)
    assert np.array_equal(out.data, 0.5 * u.data)


def test_gate_stays_in_unit_interval():
    rng = np.random.default_rng(1)
    u = ad.tensor(rng.uniform(0.1, 2.0, size=(4, 3, 3)))
    p = attention.ChannelAttentionParams.init(4, rng, hidden=7)
    out = attention.channel_attention(u, p)
    assert np.all(out.data > 0.0)
    assert np.all(out.data < u.data)


def test_single_matches_batch_row():
    rng = np.random.default_rng(2)
    batch = ad.tensor(rng.normal(size=(2, 3, 4, 4)))
    p = attention.ChannelAttentionParams.init(3, rng, hidden=6)
    full = attention.channel_attention(batch, p)
    one = attention.channel_attention(ad.tensor(batch.data[1]), p)
    np.testing.assert_array_equal(one.data, full.data[1])


def test_identity_embed_returns_pooled_features():
    # with identity weights and non-negative input the embed is the channel mean
    rng = np.random.default_rng(3)
    u = ad.tensor(rng.uniform(0.0, 1.0, size=(4, 2, 3)))
    p = attention.SharedEmbedParams.identity(4)
    out = attention.shared_embed(u, p)
    np.testing.assert_allclose(out.data, u.data.mean(axis=(1, 2)), rtol=0, atol=1e-15)


def test_shared_embed_batch_shape():
    rng = np.random.default_rng(4)
    u = ad.tensor(rng.normal(size=(5, 6, 2, 2)))
    p = attention.SharedEmbedParams.init(6, rng, hidden=8, out_dim=3)
    assert attention.shared_embed(u, p).data.shape == (5, 3)


def test_discrepancy_identity_adversary_frozen_value():
    # A = identity on non-negative vectors: ||(0,0) - (3,4)||^2 = 25
    adv = attention.AdversaryParams.identity(2)
    z1 = ad.tensor(np.array([0.0, 0.0]))
    z2 = ad.tensor(np.array([3.0, 4.0]))
    loss = attention.discrepancy_loss([z1, z2], adv, reverse_features=False)
    assert loss.data == pytest.approx(25.0, abs=1e-12)


def test_discrepancy_batch_averages_over_samples():
    adv = attention.AdversaryParams.identity(2)
    z1 = ad.tensor(np.array([[0.0, 0.0], [1.0, 1.0]]))
    z2 = ad.tensor(np.array([[3.0, 4.0], [1.0, 2.0]]))
    loss = attention.discrepancy_loss([z1, z2], adv, reverse_features=False)
    assert loss.data == pytest.approx((25.0 + 1.0) / 2.0, abs=1e-12)


def test_discrepancy_sums_all_head_pairs():
    adv = attention.AdversaryParams.identity(1)
    zs = [ad.tensor(np.array([float(v)])) for v in (0.0, 1.0, 3.0)]
    loss = attention.discrepancy_loss(zs, adv, reverse_features=False)
    # pairs (0,1), (0,3), (1,3): 1 + 9 + 4
    assert loss.data == pytest.approx(14.0, abs=1e-12)


def test_discrepancy_needs_two_heads():
    adv = attention.AdversaryParams.identity(2)
    with pytest.raises(ConfigError):
        attention.discrepancy_loss([ad.tensor(np.ones(2))], adv)


def _grads(loss, leaves):
    ad.zero_grads(leaves)
    ad.backward(loss)
    return [None if t.grad is None else t.grad.copy() for t in leaves]


def test_reversal_negates_upstream_but_not_adversary():
    rng = np.random.default_rng(5)
    adv = attention.AdversaryParams.init(3, rng, hidden=4, out_dim=2)
    zs = [ad.tensor(rng.normal(size=3), requires_grad=True) for _ in range(3)]
    leaves = zs + list(adv.tensors())

    plain = _grads(attention.discrepancy_loss(zs, adv, reverse_features=False), leaves)
    reversed_ = _grads(attention.discrepancy_loss(zs, adv, reverse_features=True), leaves)

    for g_plain, g_rev in zip(plain[:3], reversed_[:3]):
        np.testing.assert_allclose(g_rev, -g_plain, rtol=0, atol=1e-14)
    for g_plain, g_rev in zip(plain[3:], reversed_[3:]):
        np.testing.assert_allclose(g_rev, g_plain, rtol=0, atol=1e-14)


def test_reversed_step_on_features_raises_discrepancy():
    # descending the reversed loss moves the features toward *larger* true
    # discrepancy -- the whole point of the reversal layer
    rng = np.random.default_rng(6)
    adv = attention.AdversaryParams.init(3, rng, hidden=5, out_dim=3)
    zs = [ad.tensor(rng.normal(size=3), requires_grad=True) for _ in range(2)]

    def true_value():
        return float(attention.discrepancy_loss(zs, adv, reverse_features=False).data)

    before = true_value()
    loss = attention.discrepancy_loss(zs, adv, reverse_features=True)
    ad.zero_grads(zs)
    ad.backward(loss)
    for z in zs:
        z.data -= 1e-3 * z.grad
    assert true_value() > before


def test_adversary_step_lowers_discrepancy():
    rng = np.random.default_rng(7)
    adv = attention.AdversaryParams.init(3, rng, hidden=5, out_dim=3)
    zs = [ad.tensor(rng.normal(size=3)) for _ in range(2)]
    params = list(adv.tensors())
    for t in params:
        t.requires_grad = True

    def value():
        return float(attention.discrepancy_loss(zs, adv, reverse_features=True).data)

    before = value()
    loss = attention.discrepancy_loss(zs, adv, reverse_features=True)
    ad.zero_grads(params)
    ad.backward(loss)
    for t in params:
        t.data -= 1e-3 * t.grad
    assert value() < before


def test_grl_lambda_scales_feature_gradient():
    rng = np.random.default_rng(8)
    adv = attention.AdversaryParams.init(2, rng, hidden=4, out_dim=2)
    zs = [ad.tensor(rng.normal(size=2), requires_grad=True) for _ in range(2)]
    g1 = _grads(attention.discrepancy_loss(zs, adv, grl_lambda=1.0), zs)
    g3 = _grads(attention.discrepancy_loss(zs, adv, grl_lambda=3.0), zs)
    for a, b in zip(g1, g3):
        np.testing.assert_allclose(b, 3.0 * a, rtol=1e-12, atol=1e-14)


def test_proximal_penalty_frozen_value():
    phi = [ad.tensor(np.ones(4), requires_grad=True)]
    psi = [np.zeros(4)]
    # (beta/2) * ||1||^2 = (2/2) * 4
    pen = attention.proximal_penalty(phi, psi, beta=2.0)
    assert pen.data == pytest.approx(4.0, abs=1e-15)
    ad.backward(pen)
    np.testing.assert_allclose(phi[0].grad, 2.0 * np.ones(4), atol=1e-15)


def test_proximal_penalty_zero_at_snapshot():
    rng = np.random.default_rng(9)
    vals = [rng.normal(size=(3, 2)), rng.normal(size=4)]
    phi = [ad.tensor(v.copy(), requires_grad=True) for v in vals]
    pen = attention.proximal_penalty(phi, vals, beta=0.5)
    assert pen.data == 0.0


def test_proximal_penalty_empty_rejected():
    with pytest.raises(ConfigError):
        attention.proximal_penalty([], [], beta=1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 4))
def test_discrepancy_never_negative(seed, heads):
    rng = np.random.default_rng(seed)
    adv = attention.AdversaryParams.init(3, rng, hidden=4, out_dim=2)
    zs = [ad.tensor(rng.normal(size=(2, 3))) for _ in range(heads)]
    assert attention.discrepancy_loss(zs, adv).data >= 0.0
