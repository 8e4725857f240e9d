import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from mossfuse import blocks as B


def np_conv1x1(conv, x):
    w = conv.weight.detach().double().numpy()[:, :, 0, 0]
    b = conv.bias.detach().double().numpy()
    return np.einsum("oc,chw->ohw", w, x) + b[:, None, None]


def np_layernorm(norm, x):
    mu = x.mean(0, keepdims=True)
    var = x.var(0, keepdims=True)
    y = (x - mu) / np.sqrt(var + norm.eps)
    return y * norm.weight.detach().double().numpy()[:, None, None] + norm.bias.detach().double().numpy()[:, None, None]


def attention_oracle(q, k, v, temperature, heads, q_gate=None):
    """Loop over heads and channel pairs; q/k/v are (C, H, W) numpy arrays."""
    c = q.shape[0]
    cj = c // heads
    qf, kf, vf = q.reshape(c, -1), k.reshape(c, -1), v.reshape(c, -1)
    qn = qf / np.maximum(np.linalg.norm(qf, axis=1, keepdims=True), 1e-12)
    kn = kf / np.maximum(np.linalg.norm(kf, axis=1, keepdims=True), 1e-12)
    if q_gate is not None:
        qn = qn * np.broadcast_to(q_gate, q.shape).reshape(c, -1)
    out = np.zeros_like(vf)
    for j in range(heads):
        for a in range(cj):
            logits = np.array([qn[j * cj + a] @ kn[j * cj + b] for b in range(cj)]) / temperature[j]
            p = np.exp(logits - logits.max())
            p /= p.sum()
            out[j * cj + a] = sum(p[b] * vf[j * cj + b] for b in range(cj))
    return out.reshape(q.shape)


def sa_oracle(sa, x):
    h = np.maximum(np_conv1x1(sa.conv1, x), 0)
    h = np.maximum(np_conv1x1(sa.conv2, h), 0)
    return 1 / (1 + np.exp(-np_conv1x1(sa.conv3, h)))


def ca_oracle(ca, x):
    g = x.mean(axis=(1, 2))[:, None, None]
    h = np.maximum(np_conv1x1(ca.conv1, g), 0)
    h = np.maximum(np_conv1x1(ca.conv2, h), 0)
    return 1 / (1 + np.exp(-np_conv1x1(ca.conv3, h)))


def dwconv_oracle(conv, x):
    w = conv.weight.detach().double().numpy()[:, 0]
    b = conv.bias.detach().double().numpy()
    c, hh, ww = x.shape
    k = w.shape[-1]
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    out = np.zeros_like(x)
    for ch in range(c):
        for i in range(hh):
            for j in range(ww):
                out[ch, i, j] = (w[ch] * xp[ch, i:i + k, j:j + k]).sum() + b[ch]
    return out


def randomize(module, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g) * 0.5)
    return module


def test_heads_must_divide():
    with pytest.raises(B.ConfigurationError):
        B.SWSA(10, heads=4)
    with pytest.raises(B.ConfigurationError):
        B.SpatialAwareAggregation(6, heads=4)


def test_swsa_matches_loop_oracle():
    torch.manual_seed(0)
    m = randomize(B.SWSA(8, heads=2)).double()
    with torch.no_grad():
        m.temperature.copy_(torch.tensor([0.7, 1.3]).view(2, 1, 1))
    x = torch.randn(1, 8, 4, 4, dtype=torch.float64)
    got = m(x)[0].detach().numpy()
    xn = x[0].numpy()
    qkv = np_conv1x1(m.qkv, xn)
    q, k, v = qkv[:8], qkv[8:16], qkv[16:]
    att = attention_oracle(q, k, v, [0.7, 1.3], 2)
    assert np.abs(got - np_conv1x1(m.project_out, att)).max() < 1e-5


def test_swsa_zero_query_is_uniform():
    m = B.SWSA(8, heads=2)
    with torch.no_grad():
        m.qkv.weight[:8].zero_()
        m.qkv.bias[:8].zero_()
    x = torch.randn(1, 8, 5, 5)
    q, k, v = m.qkv(x).chunk(3, dim=1)
    out, attn = B.spectral_attention(q, k, v, m.temperature, 2)
    assert torch.allclose(attn, torch.full_like(attn, 0.25))
    means = v.view(1, 2, 4, 5, 5).mean(2, keepdim=True).expand(1, 2, 4, 5, 5).reshape(1, 8, 5, 5)
    assert torch.allclose(out, means, atol=1e-6)


def test_swt_identity_when_branches_zero():
    blk = B.SWTBlock(8, heads=2)
    with torch.no_grad():
        for conv in (blk.attn.project_out, blk.ffn.project_out):
            conv.weight.zero_()
            conv.bias.zero_()
    x = torch.randn(2, 8, 6, 7)
    assert torch.equal(blk(x), x)


def test_swt_gradcheck():
    torch.manual_seed(1)
    blk = B.SWTBlock(4, heads=2).double()
    x = torch.randn(1, 4, 3, 3, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda t: blk(t).sum(), (x,), eps=1e-6, atol=1e-6, rtol=1e-3)


@pytest.mark.parametrize("cls", [B.SpatialAwareAggregation, B.SpectralAwareAggregation])
def test_aggregation_gradcheck(cls):
    torch.manual_seed(2)
    m = randomize(cls(8, heads=2), seed=3).double()
    s = torch.randn(1, 8, 3, 3, dtype=torch.float64, requires_grad=True)
    c = torch.randn(1, 8, 3, 3, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda a, b: m(a, b), (s, c), eps=1e-6, atol=1e-6, rtol=1e-3)


@pytest.mark.parametrize("cls,spatial_query", [(B.SpatialAwareAggregation, True),
                                               (B.SpectralAwareAggregation, False)])
def test_aggregation_scalar_oracle(cls, spatial_query):
    m = randomize(cls(8, heads=2), seed=4).double()
    with torch.no_grad():
        m.temperature.copy_(torch.tensor([0.9, 1.4]).view(2, 1, 1))
    shared = torch.randn(1, 8, 4, 4, dtype=torch.float64)
    comp = torch.randn(1, 8, 4, 4, dtype=torch.float64)
    got = m(shared, comp)[0].detach().numpy()

    s, c = shared[0].numpy(), comp[0].numpy()
    qkv = np_conv1x1(m.qkv, np_layernorm(m.norm, s))
    q, k, v = qkv[:8], qkv[8:16], qkv[16:]
    base = dwconv_oracle(m.dwconv, c)
    gate_q = sa_oracle(m.query_gate, base) if spatial_query else ca_oracle(m.query_gate, base)
    att = attention_oracle(q, k, v, [0.9, 1.4], 2, q_gate=gate_q)
    gate_c = ca_oracle(m.conv_gate, att) if spatial_query else sa_oracle(m.conv_gate, att)
    want = np_conv1x1(m.project_out, att + gate_c * base)
    assert np.abs(got - want).max() < 1e-5


@pytest.mark.parametrize("cls", [B.SpatialAwareAggregation, B.SpectralAwareAggregation])
def test_aggregation_all_ones_gates(cls, monkeypatch):
    m = cls(8, heads=2)
    shared, comp = torch.randn(1, 8, 5, 5), torch.randn(1, 8, 5, 5)
    monkeypatch.setattr(m.query_gate, "forward", lambda t: torch.ones(1, 1, 1, 1))
    monkeypatch.setattr(m.conv_gate, "forward", lambda t: torch.ones(1, 1, 1, 1))
    q, k, v = m.qkv(m.norm(shared)).chunk(3, dim=1)
    att, _ = B.spectral_attention(q, k, v, m.temperature, 2)
    want = m.project_out(att + m.dwconv(comp))
    assert torch.allclose(m(shared, comp), want, atol=1e-6)
    with pytest.raises(ValueError):
        m(shared, comp[:, :, :4])


def test_gates():
    x = torch.randn(2, 16, 6, 5)
    sa, ca = B.SpatialAttention(16), B.ChannelAttention(16)
    assert sa(x).shape == (2, 1, 6, 5) and ca(x).shape == (2, 16, 1, 1)
    for g in (sa(x), ca(x)):
        assert bool(((g > 0) & (g < 1)).all())
    perm = x.flatten(2)[:, :, torch.randperm(30)].view_as(x)
    assert torch.allclose(ca(perm), ca(x), atol=1e-6)
    with torch.no_grad():
        for p in sa.parameters():
            p.zero_()
    assert torch.equal(sa(x), torch.full((2, 1, 6, 5), 0.5))


def test_gate_composition_oracles():
    torch.manual_seed(5)
    sa, ca = randomize(B.SpatialAttention(16)).double(), randomize(B.ChannelAttention(16)).double()
    x = torch.randn(1, 16, 4, 3, dtype=torch.float64)
    assert np.abs(sa(x)[0].detach().numpy() - sa_oracle(sa, x[0].numpy())).max() < 1e-6
    assert np.abs(ca(x)[0].detach().numpy() - ca_oracle(ca, x[0].numpy())).max() < 1e-6


def test_dilated_to_sparse_matches_dilated_conv():
    torch.manual_seed(6)
    k = torch.randn(3, 1, 3, 3, dtype=torch.float64)
    x = torch.randn(1, 3, 12, 12, dtype=torch.float64)
    dil = F.conv2d(x, k, padding=2, dilation=2, groups=3)
    sparse = B.dilated_to_sparse(k, 2)
    assert sparse.shape[-1] == 5
    dense = F.conv2d(x, sparse, padding=2, groups=3)
    assert (dil - dense).abs().max() < 1e-6
    # scalar loop oracle for one output pixel
    i, j, ch = 6, 4, 1
    val = sum(k[ch, 0, a, b] * x[0, ch, i + 2 * (a - 1), j + 2 * (b - 1)]
              for a in range(3) for b in range(3))
    assert abs(float(dense[0, ch, i, j] - val)) < 1e-6


def test_reparam_branch_errors():
    with pytest.raises(B.ConfigurationError):
        B.DilatedReparamConv(4, large_kernel=7, branches=((5, 2),))
    with pytest.raises(B.ConfigurationError):
        B.DilatedReparamConv(4, large_kernel=12)


def random_bn(block, seed):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for bn in [block.lk_bn, *block.bns]:
            bn.running_mean.copy_(torch.rand(bn.num_features, generator=g) * 2 - 1)
            bn.running_var.copy_(torch.rand(bn.num_features, generator=g) + 0.5)
            bn.weight.copy_(torch.rand(bn.num_features, generator=g) + 0.5)
            bn.bias.copy_(torch.rand(bn.num_features, generator=g) - 0.5)


def test_reparam_merge_equivalence_and_state():
    torch.manual_seed(7)
    blk = B.DilatedReparamConv(6)
    random_bn(blk, 0)
    with pytest.raises(B.ReparamStateError):
        blk.merged_parameters()
    blk.eval()
    x = torch.randn(3, 6, 17, 15)
    with torch.no_grad():
        before = blk(x)
        blk.merge()
        after = blk(x)
    assert (before - after).abs().max() < 1e-4
    k1, b1 = blk.merged_parameters()
    blk.merge()
    k2, b2 = blk.merged_parameters()
    assert torch.equal(k1, k2) and torch.equal(b1, b2)


def test_merge_with_zero_branches_is_folded_large_kernel():
    blk = B.DilatedReparamConv(4)
    random_bn(blk, 1)
    with torch.no_grad():
        # a zeroed branch: zero kernel and a BN that maps zero to zero
        for conv, bn in zip(blk.convs, blk.bns):
            conv.weight.zero_()
            bn.running_mean.zero_()
            bn.bias.zero_()
    blk.eval()
    kernel, bias = blk.merged_parameters()
    k_lk, b_lk = B.fuse_bn(blk.lk.weight, None, blk.lk_bn)
    assert torch.allclose(kernel, k_lk)
    x = torch.randn(1, 4, 9, 9)
    with torch.no_grad():
        assert torch.allclose(blk(x), blk.lk_bn(blk.lk(x)), atol=1e-6)


def test_lkcnn_shapes_and_merge():
    blk = B.LKCNNBlock(8)
    x = torch.randn(2, 8, 11, 9)
    assert blk(x).shape == x.shape
    blk.eval()
    with torch.no_grad():
        before = blk(x)
        after = blk.merge()(x)
    assert (before - after).abs().max() < 1e-4


def test_ablation_fusions_shapes():
    s, c = torch.randn(1, 8, 6, 6), torch.randn(1, 8, 6, 6)
    for cls in (B.ConcatConvFusion, B.CrossAttentionFusion):
        assert cls(8, heads=2)(s, c).shape == s.shape


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 9), st.integers(1, 9), st.sampled_from([(4, 1), (4, 2), (8, 2), (8, 4)]),
       st.integers(0, 1000))
def test_block_shape_contracts(h, w, ch, seed):
    c, heads = ch
    torch.manual_seed(seed)
    x = torch.randn(1, c, h, w)
    assert B.SWTBlock(c, heads)(x).shape == x.shape
    assert B.LKCNNBlock(c, large_kernel=5, branches=((3, 1), (3, 2)))(x).shape == x.shape
    for cls in (B.SpatialAwareAggregation, B.SpectralAwareAggregation):
        assert cls(c, heads)(x, torch.randn_like(x)).shape == x.shape
    sa = B.SpatialAttention(c)(x)
    ca = B.ChannelAttention(c)(x)
    assert sa.shape == (1, 1, h, w) and ca.shape == (1, c, 1, 1)
    assert bool(((sa > 0) & (sa < 1)).all() and ((ca > 0) & (ca < 1)).all())


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_attention_rows_sum_to_one(seed):
    torch.manual_seed(seed)
    m = B.SWSA(8, heads=4)
    m(torch.randn(2, 8, 5, 4))
    rows = m.last_attention.sum(-1)
    assert torch.allclose(rows, torch.ones_like(rows), atol=1e-6)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_reparam_property(seed):
    torch.manual_seed(seed)
    blk = B.DilatedReparamConv(4)
    random_bn(blk, seed)
    blk.eval()
    x = torch.randn(1, 4, 10, 10)
    with torch.no_grad():
        ref = blk(x)
        kernel, bias = blk.merged_parameters()
        merged = F.conv2d(x, kernel, bias, padding=6, groups=4)
    assert (ref - merged).abs().max() < 1e-4
