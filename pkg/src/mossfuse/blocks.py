"""Network building blocks.

All modules take and return ``(N, C, H, W)`` tensors.

* :class:`SWSA` / :class:`SWTBlock` -- spectral-wise (channels-as-tokens)
  self-attention and the pre-norm transformer block around it.
* :class:`DilatedReparamConv` / :class:`LKCNNBlock` -- large-kernel depth-wise
  convolution with parallel dilated branches that fold into one kernel.
* :class:`SpatialAttention`, :class:`ChannelAttention` -- sigmoid gates.
* :class:`SpatialAwareAggregation`, :class:`SpectralAwareAggregation` -- the
  gated two-branch fusion blocks, plus the plain fusions used for ablations.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange


class ConfigurationError(ValueError):
    pass


class ReparamStateError(RuntimeError):
    pass


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel vector of every pixel."""

    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = x.var(1, keepdim=True, unbiased=False)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class GatedFFN(nn.Module):
    def __init__(self, dim, expansion=2):
        super().__init__()
        hidden = dim * expansion
        self.project_in = nn.Conv2d(dim, hidden * 2, 1)
        self.project_out = nn.Conv2d(hidden, dim, 1)

    def forward(self, x):
        a, b = self.project_in(x).chunk(2, dim=1)
        return self.project_out(F.gelu(a) * b)


def _check_heads(dim, heads):
    if heads < 1 or dim % heads:
        raise ConfigurationError(f"{dim} channels cannot be split into {heads} heads")


def spectral_attention(q, k, v, temperature, heads, q_gate=None):
    """Channels-as-tokens attention.

    ``q``, ``k``, ``v`` are (N, C, H, W). Q and K are L2-normalized along the
    pixel axis, then ``q_gate`` (broadcastable to Q) rescales the query before
    the (C/J x C/J) logits are divided by the per-head temperature.
    Returns the attended values and the attention maps (N, J, C/J, C/J).
    """
    h, w = q.shape[-2:]
    if q_gate is not None:
        q = F.normalize(q.flatten(2), dim=-1).view_as(q) * q_gate
        k = F.normalize(k.flatten(2), dim=-1).view_as(k)
        q = rearrange(q, "n (j c) h w -> n j c (h w)", j=heads)
        k = rearrange(k, "n (j c) h w -> n j c (h w)", j=heads)
    else:
        q = F.normalize(rearrange(q, "n (j c) h w -> n j c (h w)", j=heads), dim=-1)
        k = F.normalize(rearrange(k, "n (j c) h w -> n j c (h w)", j=heads), dim=-1)
    v = rearrange(v, "n (j c) h w -> n j c (h w)", j=heads)
    attn = torch.softmax(q @ k.transpose(-2, -1) / temperature, dim=-1)
    out = rearrange(attn @ v, "n j c (h w) -> n (j c) h w", h=h, w=w)
    return out, attn


class SWSA(nn.Module):
    def __init__(self, dim, heads=4):
        super().__init__()
        _check_heads(dim, heads)
        self.heads = heads
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.qkv = nn.Conv2d(dim, dim * 3, 1)
        self.project_out = nn.Conv2d(dim, dim, 1)
        self.last_attention = None

    def forward(self, x):
        q, k, v = self.qkv(x).chunk(3, dim=1)
        out, self.last_attention = spectral_attention(q, k, v, self.temperature, self.heads)
        return self.project_out(out)


class SWTBlock(nn.Module):
    def __init__(self, dim, heads=4, ffn_expansion=2):
        super().__init__()
        self.norm1 = LayerNorm2d(dim)
        self.attn = SWSA(dim, heads)
        self.norm2 = LayerNorm2d(dim)
        self.ffn = GatedFFN(dim, ffn_expansion)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


def dilated_to_sparse(kernel, dilation):
    """Zero-interleave a (C, 1, k, k) kernel into its dense (k-1)*d+1 equivalent."""
    if dilation == 1:
        return kernel
    c, one, k, _ = kernel.shape
    size = (k - 1) * dilation + 1
    sparse = kernel.new_zeros(c, one, size, size)
    sparse[:, :, ::dilation, ::dilation] = kernel
    return sparse


def fuse_bn(kernel, bias, bn):
    std = torch.sqrt(bn.running_var + bn.eps)
    scale = bn.weight / std
    if bias is None:
        bias = torch.zeros_like(bn.running_mean)
    return kernel * scale.reshape(-1, 1, 1, 1), bn.bias + (bias - bn.running_mean) * scale


class DilatedReparamConv(nn.Module):
    """Large depth-wise kernel plus parallel dilated small kernels, each with BN.

    ``branches`` is a sequence of (kernel_size, dilation). After :meth:`merge`
    (inference only) the block is a single biased large-kernel convolution.
    """

    def __init__(self, dim, large_kernel=13, branches=((5, 1), (3, 2), (3, 3))):
        super().__init__()
        if large_kernel % 2 == 0:
            raise ConfigurationError("large kernel must be odd")
        for k, d in branches:
            if k % 2 == 0 or (k - 1) * d + 1 > large_kernel:
                raise ConfigurationError(
                    f"branch ({k}, dil {d}) spans {(k - 1) * d + 1} > large kernel {large_kernel}")
        self.dim = dim
        self.large_kernel = large_kernel
        self.branch_spec = tuple((int(k), int(d)) for k, d in branches)
        self.lk = nn.Conv2d(dim, dim, large_kernel, padding=large_kernel // 2, groups=dim, bias=False)
        self.lk_bn = nn.BatchNorm2d(dim)
        self.convs = nn.ModuleList(
            nn.Conv2d(dim, dim, k, padding=d * (k - 1) // 2, dilation=d, groups=dim, bias=False)
            for k, d in self.branch_spec)
        self.bns = nn.ModuleList(nn.BatchNorm2d(dim) for _ in self.branch_spec)
        self.merged = None

    @property
    def is_merged(self):
        return self.merged is not None

    def forward(self, x):
        if self.merged is not None:
            return self.merged(x)
        out = self.lk_bn(self.lk(x))
        for conv, bn in zip(self.convs, self.bns):
            out = out + bn(conv(x))
        return out

    def merged_parameters(self):
        """Equivalent (kernel, bias) of the whole multi-branch stage."""
        if self.merged is not None:
            return self.merged.weight.detach().clone(), self.merged.bias.detach().clone()
        if self.training:
            raise ReparamStateError("BN statistics are not final; call eval() before merging")
        with torch.no_grad():
            kernel, bias = fuse_bn(self.lk.weight, None, self.lk_bn)
            for (k, d), conv, bn in zip(self.branch_spec, self.convs, self.bns):
                bk, bb = fuse_bn(conv.weight, None, bn)
                bk = dilated_to_sparse(bk, d)
                pad = (self.large_kernel - bk.shape[-1]) // 2
                kernel = kernel + F.pad(bk, (pad, pad, pad, pad))
                bias = bias + bb
        return kernel, bias

    def merge(self):
        kernel, bias = self.merged_parameters()
        if self.merged is not None:
            return self
        conv = nn.Conv2d(self.dim, self.dim, self.large_kernel, padding=self.large_kernel // 2,
                         groups=self.dim, bias=True)
        conv.weight.data.copy_(kernel)
        conv.bias.data.copy_(bias)
        self.merged = conv
        del self.lk, self.lk_bn, self.convs, self.bns
        return self


class SEBlock(nn.Module):
    def __init__(self, dim, reduction=4):
        super().__init__()
        hidden = max(dim // reduction, 1)
        self.down = nn.Conv2d(dim, hidden, 1)
        self.up = nn.Conv2d(hidden, dim, 1)

    def forward(self, x):
        w = x.mean(dim=(2, 3), keepdim=True)
        return x * torch.sigmoid(self.up(F.relu(self.down(w))))


class LKCNNBlock(nn.Module):
    """Dilated-reparam conv -> SE -> FFN, with two residual connections."""

    def __init__(self, dim, large_kernel=13, branches=((5, 1), (3, 2), (3, 3)), ffn_expansion=2):
        super().__init__()
        self.reparam = DilatedReparamConv(dim, large_kernel, branches)
        self.se = SEBlock(dim)
        self.norm = nn.BatchNorm2d(dim)
        self.ffn = GatedFFN(dim, ffn_expansion)

    def forward(self, x):
        x = x + self.se(self.reparam(x))
        return x + self.ffn(self.norm(x))

    def merge(self):
        self.reparam.merge()
        return self


class SpatialAttention(nn.Module):
    """Three 1x1 convolutions C -> C/4 -> C/8 -> 1 and a sigmoid: an (N, 1, H, W) gate."""

    def __init__(self, dim):
        super().__init__()
        c1, c2 = max(dim // 4, 1), max(dim // 8, 1)
        self.conv1 = nn.Conv2d(dim, c1, 1)
        self.conv2 = nn.Conv2d(c1, c2, 1)
        self.conv3 = nn.Conv2d(c2, 1, 1)

    def forward(self, x):
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        return torch.sigmoid(self.conv3(x))


class ChannelAttention(nn.Module):
    """Global average pool, bottleneck C -> C/4 -> C/4 -> C, sigmoid: an (N, C, 1, 1) gate."""

    def __init__(self, dim):
        super().__init__()
        hidden = max(dim // 4, 1)
        self.conv1 = nn.Conv2d(dim, hidden, 1)
        self.conv2 = nn.Conv2d(hidden, hidden, 1)
        self.conv3 = nn.Conv2d(hidden, dim, 1)

    def forward(self, x):
        x = x.mean(dim=(2, 3), keepdim=True)
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        return torch.sigmoid(self.conv3(x))


class _GatedAggregation(nn.Module):
    query_gate_cls = None
    conv_gate_cls = None

    def __init__(self, dim, heads=4):
        super().__init__()
        _check_heads(dim, heads)
        self.heads = heads
        self.norm = LayerNorm2d(dim)
        self.qkv = nn.Conv2d(dim, dim * 3, 1)
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.dwconv = nn.Conv2d(dim, dim, 3, padding=1, groups=dim)
        self.query_gate = self.query_gate_cls(dim)
        self.conv_gate = self.conv_gate_cls(dim)
        self.project_out = nn.Conv2d(dim, dim, 1)

    def forward(self, shared, comp):
        if shared.shape != comp.shape:
            raise ValueError(f"shared {tuple(shared.shape)} and complementary "
                             f"{tuple(comp.shape)} features differ in shape")
        q, k, v = self.qkv(self.norm(shared)).chunk(3, dim=1)
        base = self.dwconv(comp)
        attended, _ = spectral_attention(q, k, v, self.temperature, self.heads,
                                         q_gate=self.query_gate(base))
        gated = self.conv_gate(attended) * base
        return self.project_out(attended + gated)


class SpatialAwareAggregation(_GatedAggregation):
    """Spatial gate of the conv branch refines the query; channel gate of the
    attention output reweights the conv branch."""

    query_gate_cls = SpatialAttention
    conv_gate_cls = ChannelAttention


class SpectralAwareAggregation(_GatedAggregation):
    """Mirror of :class:`SpatialAwareAggregation`: channel gate on the query,
    spatial gate on the conv branch."""

    query_gate_cls = ChannelAttention
    conv_gate_cls = SpatialAttention


class ConcatConvFusion(nn.Module):
    def __init__(self, dim, heads=4):
        super().__init__()
        self.fuse = nn.Conv2d(dim * 2, dim, 1)

    def forward(self, shared, comp):
        if shared.shape != comp.shape:
            raise ValueError("shared and complementary features differ in shape")
        return self.fuse(torch.cat([shared, comp], dim=1))


class CrossAttentionFusion(nn.Module):
    """Ungated spectral cross-attention: queries from shared, keys/values from comp."""

    def __init__(self, dim, heads=4):
        super().__init__()
        _check_heads(dim, heads)
        self.heads = heads
        self.norm_q = LayerNorm2d(dim)
        self.norm_kv = LayerNorm2d(dim)
        self.q = nn.Conv2d(dim, dim, 1)
        self.kv = nn.Conv2d(dim, dim * 2, 1)
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.project_out = nn.Conv2d(dim, dim, 1)

    def forward(self, shared, comp):
        if shared.shape != comp.shape:
            raise ValueError("shared and complementary features differ in shape")
        q = self.q(self.norm_q(shared))
        k, v = self.kv(self.norm_kv(comp)).chunk(2, dim=1)
        out, _ = spectral_attention(q, k, v, self.temperature, self.heads)
        return self.project_out(out)


AGGREGATORS = {
    "gated": (SpatialAwareAggregation, SpectralAwareAggregation),
    "concat_conv": (ConcatConvFusion, ConcatConvFusion),
    "cross_attention": (CrossAttentionFusion, CrossAttentionFusion),
}
