import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from repcm.model import (
    ADDITIVE,
    LITERAL_HADAMARD,
    SyncAttention,
    masked_sync_attention,
    pool_region_tokens,
    routing_weights,
)


def random_adjacency(r, gen):
    a = (torch.rand(r, r, generator=gen) < 0.5).double()
    a = torch.maximum(a, a.T)
    a.fill_diagonal_(1.0)
    return a


def test_identity_adjacency_doubles_tokens():
    r0, rT = torch.randn(5, 4), torch.randn(5, 4)
    o0, oT, w = masked_sync_attention(r0, rT, torch.eye(5))
    assert torch.equal(w, torch.eye(5))
    assert torch.equal(o0, 2 * r0) and torch.equal(oT, 2 * rT)


def test_equal_tokens_all_ones():
    v = torch.randn(1, 6)
    o0, oT, _ = masked_sync_attention(v.repeat(4, 1), v.repeat(4, 1), torch.ones(4, 4))
    torch.testing.assert_close(o0, 2 * v.repeat(4, 1))
    torch.testing.assert_close(oT, 2 * v.repeat(4, 1))


def test_two_region_closed_form():
    r0 = torch.eye(2, dtype=torch.float64)
    _, _, w = masked_sync_attention(r0, r0.clone(), torch.ones(2, 2))
    s = 1 / math.sqrt(2)
    row0 = np.exp([s, 0]) / np.exp([s, 0]).sum()
    np.testing.assert_allclose(w.numpy(), [row0, row0[::-1]], rtol=1e-12)


@given(st.integers(1, 12), st.integers(1, 16), st.integers(0, 2**31 - 1))
def test_additive_mask_blocks_exactly(r, c, seed):
    gen = torch.Generator().manual_seed(seed)
    a = random_adjacency(r, gen)
    r0 = torch.randn(3, r, c, generator=gen, dtype=torch.float64) * 10
    w = routing_weights(r0, r0, a, ADDITIVE)
    assert torch.all(w[:, a == 0] == 0)
    torch.testing.assert_close(w.sum(-1), torch.ones(3, r, dtype=torch.float64), atol=1e-12, rtol=0)


def test_literal_mode_leaks_through_zero_logits():
    a = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    r0 = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    w = routing_weights(r0, r0, a, LITERAL_HADAMARD)
    assert torch.all(w > 0)  # logit 0, not -inf


def test_mask_shape_and_mode_validation():
    with pytest.raises(ValueError):
        masked_sync_attention(torch.randn(3, 2), torch.randn(3, 2), torch.ones(2, 2))
    with pytest.raises(ValueError):
        routing_weights(torch.randn(2, 2), torch.randn(2, 2), torch.ones(2, 2), "multiply")
    with pytest.raises(ValueError):
        SyncAttention(8, mask_mode="bogus")


def test_motion_values_do_not_touch_routing_or_shape_stream():
    torch.manual_seed(0)
    attn = SyncAttention(8, n_heads=2).double()
    x0 = torch.randn(2, 5, 8, dtype=torch.float64)
    xa, xb = torch.randn(2, 5, 8, dtype=torch.float64), torch.randn(2, 5, 8, dtype=torch.float64)
    mask = torch.ones(5, 5)
    a0, aT, w = attn(x0, xa, mask)
    b0, bT, v = attn(x0, xb, mask)
    assert torch.equal(w, v) and torch.equal(a0, b0)
    assert not torch.allclose(aT, bT)


def test_sync_attention_identity_matches_functional():
    r0, rT = torch.randn(4, 3), torch.randn(4, 3)
    adj = torch.tensor([[1, 1, 0, 0], [1, 1, 1, 0], [0, 1, 1, 1], [0, 0, 1, 1]])
    a0, aT, w = SyncAttention(3, identity=True)(r0, rT, adj)
    o0, oT, w2 = masked_sync_attention(r0, rT, adj)
    assert torch.equal(w, w2)
    torch.testing.assert_close(a0 + r0, o0)
    torch.testing.assert_close(aT + rT, oT)


def test_pool_region_tokens_examples():
    x = torch.tensor([[1.0, 0, 0], [0, 1, 0], [5, 5, 5]])
    ids = torch.tensor([0, 0, 1])
    torch.testing.assert_close(pool_region_tokens(x, ids, 2), torch.tensor([[0.5, 0.5, 0], [5, 5, 5]]))
    # one anchor per region: identity
    y = torch.randn(4, 3)
    torch.testing.assert_close(pool_region_tokens(y, torch.tensor([2, 0, 3, 1]), 4), y[[1, 3, 0, 2]])
    # shared token
    v = torch.randn(1, 3).repeat(3, 1)
    torch.testing.assert_close(pool_region_tokens(v, torch.zeros(3, dtype=torch.long), 1), v[:1])


def test_pool_region_tokens_names_empty_region():
    with pytest.raises(ValueError, match="region 1 has no anchors"):
        pool_region_tokens(torch.randn(3, 2), torch.tensor([0, 2, 2]), 3)
