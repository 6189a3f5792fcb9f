"""Positional encodings, FiLM modulation and the attention layer stacks."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import ADDITIVE, SelfAttention, SyncAttention, pool_region_tokens


class SinusoidalEncoding(nn.Module):
    """sin/cos of every input scalar at frequencies 2^0..2^(L-1), then a learned projection."""

    def __init__(self, in_features: int, channels: int, n_freqs: int = 6):
        super().__init__()
        self.in_features = in_features
        self.register_buffer("freqs", 2.0 ** torch.arange(n_freqs, dtype=torch.float32),
                             persistent=False)
        self.proj = nn.Linear(2 * n_freqs * in_features, channels)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        ang = x[..., None] * self.freqs.to(x.dtype)
        return torch.cat([ang.sin(), ang.cos()], dim=-1).flatten(-2)

    def forward(self, x):
        if x.shape[-1] != self.in_features:
            raise ValueError(f"expected {self.in_features} input features, got {x.shape[-1]}")
        return self.proj(self.features(x))


class FiLM(nn.Module):
    """Residual feature-wise modulation: x + gamma(c) * LN(x) + beta(c).

    Both heads start at zero, so the block is the identity at initialisation.
    """

    def __init__(self, channels: int, context: int | None = None):
        super().__init__()
        context = context or channels
        self.norm = nn.LayerNorm(channels, elementwise_affine=False)
        self.gamma = nn.Linear(context, channels)
        self.beta = nn.Linear(context, channels)
        for lin in (self.gamma, self.beta):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, x, context):
        return x + self.gamma(context) * self.norm(x) + self.beta(context)


def _mlp(channels, ratio):
    return nn.Sequential(nn.Linear(channels, ratio * channels), nn.GELU(),
                         nn.Linear(ratio * channels, channels))


class RegionInjection(nn.Module):
    """Pool anchors into region tokens, exchange them under the adjacency mask,
    broadcast back and FiLM-modulate both anchor streams."""

    def __init__(self, channels: int, n_regions: int, mask_mode: str = ADDITIVE,
                 identity: bool = False):
        super().__init__()
        self.n_regions = n_regions
        self.attn = SyncAttention(channels, 1, identity=identity, mask_mode=mask_mode)
        self.film0 = FiLM(channels)
        self.filmT = FiLM(channels)

    def forward(self, x0, xT, region_ids, adjacency):
        r0 = pool_region_tokens(x0, region_ids, self.n_regions)
        rT = None if xT is None else pool_region_tokens(xT, region_ids, self.n_regions)
        a0, aT, w = self.attn(r0, rT, adjacency)
        x0 = self.film0(x0, (r0 + a0)[..., region_ids, :])
        if xT is not None:
            xT = self.filmT(xT, (rT + aT)[..., region_ids, :])
        return x0, xT, w


class AttentionLayer(nn.Module):
    """One trunk/decoder layer.

    Optional self-attention + MLP on the shape stream, then a SyncAttention
    block updating both streams with shared routing, then an MLP on the motion
    stream. Pre-norm residual throughout.
    """

    def __init__(self, channels: int, n_heads: int, mlp_ratio: int = 2,
                 self_attention: bool = True):
        super().__init__()
        self.self_attention = self_attention
        if self_attention:
            self.norm_sa = nn.LayerNorm(channels)
            self.sa = SelfAttention(channels, n_heads)
            self.norm_mlp0 = nn.LayerNorm(channels)
            self.mlp0 = _mlp(channels, mlp_ratio)
        self.norm_s0 = nn.LayerNorm(channels)
        self.norm_sT = nn.LayerNorm(channels)
        self.sync = SyncAttention(channels, n_heads)
        self.norm_mlpT = nn.LayerNorm(channels)
        self.mlpT = _mlp(channels, mlp_ratio)

    def forward(self, x0, xT=None):
        if self.self_attention:
            x0 = x0 + self.sa(self.norm_sa(x0))
            x0 = x0 + self.mlp0(self.norm_mlp0(x0))
        a0, aT, _ = self.sync(self.norm_s0(x0), None if xT is None else self.norm_sT(xT))
        x0 = x0 + a0
        if xT is not None:
            xT = xT + aT
            xT = xT + self.mlpT(self.norm_mlpT(xT))
        return x0, xT
