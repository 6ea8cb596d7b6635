"""Channel FiLM, Bernoulli uncertainty, and uncertainty-tempered spatial gating."""

import pytest
import torch

from descov import ChannelNorm, DescriptorModulator, descriptor_uncertainty

K, C, D, GRID = 3, 8, 16, (4, 4)


def _modulator(seed=0, dtype=torch.float64, **kw):
    torch.manual_seed(seed)
    m = DescriptorModulator(C, D, K, **kw).to(dtype)
    m.eval()
    return m


def _inputs(seed=1, b=2, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    feats = torch.randn(b, C, *GRID, generator=g, dtype=dtype)
    token = torch.randn(b, D, generator=g, dtype=dtype)
    maps = torch.rand(b, K, *GRID, generator=g, dtype=dtype)
    return feats, token, maps


# -- uncertainty -----------------------------------------------------------


def test_uncertainty_endpoints():
    u, ub = descriptor_uncertainty(torch.tensor([[0.0, 1.0]], dtype=torch.float64))
    assert torch.all(u == 0.0) and ub.item() == 0.0


def test_uncertainty_peak():
    u, _ = descriptor_uncertainty(torch.tensor([[0.5]], dtype=torch.float64))
    assert u.item() == 1.0


def test_uncertainty_fixture():
    p = torch.tensor([[0.2, 0.8, 0.5]], dtype=torch.float64)
    u, ub = descriptor_uncertainty(p)
    torch.testing.assert_close(
        u, torch.tensor([[0.64, 0.64, 1.0]], dtype=torch.float64)
    )
    assert ub.item() == pytest.approx(0.76)


def test_uncertainty_symmetry():
    p = torch.rand(4, K, dtype=torch.float64)
    u1, _ = descriptor_uncertainty(p)
    u2, _ = descriptor_uncertainty(1.0 - p)
    torch.testing.assert_close(u1, u2)


def test_uncertainty_range():
    p = torch.rand(16, K, dtype=torch.float64)
    u, ub = descriptor_uncertainty(p)
    assert u.min() >= 0.0 and u.max() <= 1.0
    assert torch.all(ub >= 0.0) and torch.all(ub <= 1.0)


# -- channel normalization -------------------------------------------------


def test_channel_norm_train_standardizes():
    torch.manual_seed(0)
    norm = ChannelNorm(C).to(torch.float64)
    norm.train()
    x = torch.randn(16, C, 5, 5, dtype=torch.float64) * 3.0 + 1.5
    y = norm(x)
    mean = y.mean(dim=(0, 2, 3))
    std = y.std(dim=(0, 2, 3), unbiased=False)
    torch.testing.assert_close(mean, torch.zeros(C, dtype=torch.float64), atol=1e-9, rtol=0)
    torch.testing.assert_close(std, torch.ones(C, dtype=torch.float64), atol=1e-4, rtol=0)


def test_channel_norm_batch_one_is_instance_norm():
    norm = ChannelNorm(C).to(torch.float64)
    norm.train()
    x = torch.randn(1, C, 6, 6, dtype=torch.float64)
    y = norm(x)
    inst = (x - x.mean(dim=(2, 3), keepdim=True)) / torch.sqrt(
        x.var(dim=(2, 3), keepdim=True, unbiased=False) + norm.eps
    )
    torch.testing.assert_close(y, inst)


def test_channel_norm_eval_uses_running_stats():
    torch.manual_seed(1)
    norm = ChannelNorm(C).to(torch.float64)
    norm.train()
    for _ in range(50):
        norm(torch.randn(8, C, 4, 4, dtype=torch.float64) * 2.0 + 1.0)
    norm.eval()
    x = torch.randn(4, C, 4, 4, dtype=torch.float64)
    y = norm(x)
    expected = (x - norm.running_mean[None, :, None, None]) / torch.sqrt(
        norm.running_var[None, :, None, None] + norm.eps
    )
    torch.testing.assert_close(y, expected)
    # same input twice in eval mode: stats frozen
    torch.testing.assert_close(y, norm(x))


# -- channel FiLM ----------------------------------------------------------


def test_film_identity_with_zeroed_heads():
    m = _modulator()
    with torch.no_grad():
        for head in (m.scale_head, m.bias_head):
            for layer in head:
                if hasattr(layer, "weight"):
                    layer.weight.zero_()
                    layer.bias.zero_()
    feats, token, _ = _inputs()
    out = m.channel_film(feats, token)
    torch.testing.assert_close(out, m.norm(feats))


def test_film_scale_bounded():
    m = _modulator(seed=3)
    _, token, _ = _inputs(seed=4)
    scale = 1.0 + torch.tanh(m.scale_head(token))
    assert scale.min() > 0.0 and scale.max() < 2.0


def test_film_shapes():
    m = _modulator()
    feats, token, _ = _inputs(b=3)
    assert m.channel_film(feats, token).shape == feats.shape


# -- spatial gate ----------------------------------------------------------


def test_gate_strength_monotone_decreasing():
    m = _modulator()
    grid = torch.linspace(0.0, 1.0, 11, dtype=torch.float64)
    alphas = torch.stack([m.gate_strength(u) for u in grid])
    assert torch.all(alphas[1:] <= alphas[:-1] + 1e-12)
    assert m.gate_strength(torch.tensor(0.2)) > m.gate_strength(torch.tensor(0.8))


def test_gate_strength_init_values():
    """s=4, b=0 at init: alpha = sigmoid(4(1-u))."""
    m = _modulator()
    for ub in (0.0, 0.5, 1.0):
        want = torch.sigmoid(torch.tensor(4.0 * (1.0 - ub), dtype=torch.float64))
        got = m.gate_strength(torch.tensor(ub, dtype=torch.float64))
        assert got.item() == pytest.approx(want.item(), abs=1e-12)


def test_suppressed_gate_halves_features():
    """With b=-20 and maximal uncertainty the factor saturates at 0.5."""
    m = _modulator()
    with torch.no_grad():
        m.gate_bias.fill_(-20.0)
    feats, _, maps = _inputs(seed=5)
    ub = torch.ones(feats.shape[0], dtype=torch.float64)
    out = m.spatial_modulate(feats, maps, ub)
    want = m.refine(feats * 0.5)
    torch.testing.assert_close(out, want, atol=1e-6, rtol=1e-6)


def test_modulation_factor_range():
    m = _modulator(seed=6)
    feats, _, maps = _inputs(seed=7)
    for ub in (0.0, 0.3, 0.9):
        alpha = m.gate_strength(torch.tensor(ub, dtype=torch.float64))
        gate = torch.sigmoid(m.gate_conv(maps))
        factor = 0.5 + alpha * gate
        assert factor.min() > 0.5 and factor.max() < 1.5


def test_monotone_suppression_of_gate_product():
    """alpha*G_s never grows as u_bar grows (s>0), on a u_bar grid."""
    m = _modulator(seed=8)
    _, _, maps = _inputs(seed=9)
    gate = torch.sigmoid(m.gate_conv(maps))
    prev = None
    for ub in torch.linspace(0, 1, 6, dtype=torch.float64):
        cur = m.gate_strength(ub) * gate
        if prev is not None:
            assert torch.all(cur <= prev + 1e-12)
        prev = cur


def test_unnormalized_map_rejected():
    m = _modulator()
    feats, _, maps = _inputs()
    ub = torch.full((feats.shape[0],), 0.5, dtype=torch.float64)
    with pytest.raises(Exception):
        m.spatial_modulate(feats, maps * 3.0, ub)


def test_per_channel_gate_variant():
    m = _modulator(gate_per_channel=True)
    assert m.gate_conv.out_channels == C
    feats, token, maps = _inputs(seed=10)
    probs = torch.rand(feats.shape[0], K, dtype=torch.float64)
    out = m(feats, token, maps, probs)
    assert out.shape == feats.shape


def test_end_to_end_finite_difference():
    """Central-difference oracle through FiLM + gating + refinement w.r.t. the
    token, including the path through u_bar -> alpha."""
    m = _modulator(seed=11)
    feats, token, _ = _inputs(seed=12, b=1)
    probs = torch.rand(1, K, dtype=torch.float64, requires_grad=True)
    maps = torch.rand(1, K, *GRID, dtype=torch.float64)
    weight = torch.randn(1, C, *GRID, dtype=torch.float64)

    def scalar(tok, p):
        return (m(feats, tok, maps, p) * weight).sum()

    token = token.clone().requires_grad_(True)
    scalar(token, probs).backward()
    eps = 1e-6
    for idx in [(0, 0), (0, 7)]:
        hi, lo = token.detach().clone(), token.detach().clone()
        hi[idx] += eps
        lo[idx] -= eps
        fd = (scalar(hi, probs) - scalar(lo, probs)).item() / (2 * eps)
        assert fd == pytest.approx(token.grad[idx].item(), rel=1e-4, abs=1e-7)
    for idx in [(0, 1)]:
        hi, lo = probs.detach().clone(), probs.detach().clone()
        hi[idx] += eps
        lo[idx] -= eps
        fd = (scalar(token.detach(), hi) - scalar(token.detach(), lo)).item() / (2 * eps)
        assert fd == pytest.approx(probs.grad[idx].item(), rel=1e-4, abs=1e-7)
