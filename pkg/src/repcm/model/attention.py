"""Region pooling and (masked) synchronised attention.

Synchronised attention computes one routing matrix from the shape stream and
applies it to both the shape and the motion stream.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

ADDITIVE = "additive"
LITERAL_HADAMARD = "literal"
MASK_MODES = (ADDITIVE, LITERAL_HADAMARD)


def routing_weights(q: torch.Tensor, k: torch.Tensor, mask: torch.Tensor | None = None,
                    mask_mode: str = ADDITIVE) -> torch.Tensor:
    """softmax(q k^T / sqrt(d_k)), optionally restricted by a binary mask.

    ``additive`` sets disallowed logits to -inf, so their weight is exactly 0.
    ``literal`` multiplies the logits by the mask, which only zeroes the logit.
    """
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        if mask.shape[-2:] != logits.shape[-2:]:
            raise ValueError(f"mask {tuple(mask.shape)} does not match logits {tuple(logits.shape)}")
        if mask_mode == ADDITIVE:
            logits = logits.masked_fill(mask == 0, float("-inf"))
        elif mask_mode == LITERAL_HADAMARD:
            logits = logits * mask.to(logits.dtype)
        else:
            raise ValueError(f"unknown mask mode {mask_mode!r}")
    return torch.softmax(logits, dim=-1)


def masked_sync_attention(r0: torch.Tensor, rT: torch.Tensor, adjacency: torch.Tensor,
                          mask_mode: str = ADDITIVE):
    """Region-level exchange with identity projections.

    Returns ``(W r0 + r0, W rT + rT, W)`` where ``W`` is routed from ``r0``.
    """
    r = r0.shape[-2]
    if adjacency.shape != (r, r):
        raise ValueError(f"adjacency must be {r}x{r}, got {tuple(adjacency.shape)}")
    w = routing_weights(r0, r0, adjacency, mask_mode)
    return w @ r0 + r0, w @ rT + rT, w


def pool_region_tokens(x: torch.Tensor, region_ids: torch.Tensor, n_regions: int) -> torch.Tensor:
    """Mean of the anchor rows belonging to each region: (..., K, C) -> (..., R, C)."""
    counts = torch.bincount(region_ids, minlength=n_regions)
    if counts.numel() > n_regions:
        raise ValueError(f"region id {int(region_ids.max())} outside [0, {n_regions})")
    empty = torch.nonzero(counts == 0)
    if len(empty):
        raise ValueError(f"region {int(empty[0])} has no anchors")
    onehot = F.one_hot(region_ids, n_regions).to(x.dtype)  # (K, R)
    return (onehot.T / counts.to(x.dtype)[:, None]) @ x


class SyncAttention(nn.Module):
    """Multi-head attention whose weights come from the shape stream only.

    Args:
        channels: token width.
        n_heads: heads; each head routes both streams with the same weights.
        identity: skip all projections (single head), for closed-form checks.
        mask_mode: how a binary mask enters the logits.
    """

    def __init__(self, channels: int, n_heads: int = 1, identity: bool = False,
                 mask_mode: str = ADDITIVE):
        super().__init__()
        if mask_mode not in MASK_MODES:
            raise ValueError(f"unknown mask mode {mask_mode!r}")
        if identity and n_heads != 1:
            raise ValueError("identity projections require a single head")
        if channels % n_heads:
            raise ValueError(f"{channels} channels do not split into {n_heads} heads")
        self.n_heads = n_heads
        self.identity = identity
        self.mask_mode = mask_mode
        if not identity:
            self.qk = nn.Linear(channels, 2 * channels)
            self.v0 = nn.Linear(channels, channels)
            self.vT = nn.Linear(channels, channels)
            self.out0 = nn.Linear(channels, channels)
            self.outT = nn.Linear(channels, channels)

    def _split(self, x):
        *lead, k, c = x.shape
        return x.reshape(*lead, k, self.n_heads, c // self.n_heads).transpose(-2, -3)

    def _merge(self, x):
        *lead, h, k, d = x.shape
        return x.transpose(-2, -3).reshape(*lead, k, h * d)

    def forward(self, x0, xT=None, mask=None):
        """Returns the attention updates (no residual) for both streams and the weights."""
        if self.identity:
            w = routing_weights(x0, x0, mask, self.mask_mode)
            return w @ x0, (None if xT is None else w @ xT), w
        q, k = self.qk(x0).chunk(2, dim=-1)
        w = routing_weights(self._split(q), self._split(k), mask, self.mask_mode)
        a0 = self.out0(self._merge(w @ self._split(self.v0(x0))))
        aT = None if xT is None else self.outT(self._merge(w @ self._split(self.vT(xT))))
        return a0, aT, w


class SelfAttention(nn.Module):
    def __init__(self, channels: int, n_heads: int = 1):
        super().__init__()
        if channels % n_heads:
            raise ValueError(f"{channels} channels do not split into {n_heads} heads")
        self.n_heads = n_heads
        self.qkv = nn.Linear(channels, 3 * channels)
        self.out = nn.Linear(channels, channels)

    def forward(self, x):
        *lead, k, c = x.shape
        qkv = self.qkv(x).reshape(*lead, k, 3, self.n_heads, c // self.n_heads)
        q, kk, v = qkv.unbind(-3)
        q, kk, v = (t.transpose(-2, -3) for t in (q, kk, v))
        w = routing_weights(q, kk)
        return self.out((w @ v).transpose(-2, -3).reshape(*lead, k, c))
