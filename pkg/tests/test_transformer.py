import math

import pytest
import torch

from almtok.config import StackConfig
from almtok.transformer import (
    DepthAR,
    FeedForward,
    SlidingAttention,
    TransformerStack,
    rope_rotate,
    sliding_causal_attention,
    sliding_causal_mask,
)

from conftest import FD_TOL


def dense_reference_attention(x, attn: SlidingAttention, window):
    """Per-row loop over the visible span; no masking tricks."""
    t, dim = x.shape
    h = attn.n_heads
    hd = dim // h
    qkv = attn.qkv(x).reshape(t, 3, h, hd)
    rows = []
    for i in range(t):
        heads = []
        for head in range(h):
            q = qkv[i, 0, head]
            lo = max(0, i - window + 1)
            scores, values = [], []
            for j in range(lo, i + 1):
                k = qkv[j, 1, head]
                if attn.rope:
                    q_r = rope_rotate(q[None], q[None], torch.tensor([i]))[0][0]
                    k_r = rope_rotate(k[None], k[None], torch.tensor([j]))[0][0]
                else:
                    q_r, k_r = q, k
                scores.append((q_r @ k_r) / math.sqrt(hd))
                values.append(qkv[j, 2, head])
            weights = torch.softmax(torch.stack(scores), 0)
            heads.append((weights[:, None] * torch.stack(values)).sum(0))
        rows.append(torch.cat(heads))
    return attn.out(torch.stack(rows))


# ----------------------------------------------------------------- rope


def test_rope_position_zero_is_identity():
    q, k = torch.randn(3, 8, dtype=torch.float64), torch.randn(3, 8, dtype=torch.float64)
    q2, k2 = rope_rotate(q, k, torch.zeros(3, dtype=torch.long))
    assert torch.equal(q2, q) and torch.equal(k2, k)


def test_rope_relative_position():
    gen = torch.Generator().manual_seed(0)
    q = torch.randn(1, 16, dtype=torch.float64, generator=gen)
    k = torch.randn(1, 16, dtype=torch.float64, generator=gen)
    for _ in range(20):
        p1, p2 = torch.randint(0, 500, (2,), generator=gen).tolist()
        shift = int(torch.randint(0, 500, (1,), generator=gen))
        a = rope_rotate(q, q, [p1])[0] @ rope_rotate(k, k, [p2])[0].T
        b = rope_rotate(q, q, [p1 + shift])[0] @ rope_rotate(k, k, [p2 + shift])[0].T
        assert torch.allclose(a, b, rtol=0, atol=1e-10)


def test_rope_norm_preserved():
    q = torch.randn(10, 8, dtype=torch.float64)
    q2, _ = rope_rotate(q, q, torch.arange(10) * 37)
    assert torch.allclose(q2.norm(dim=-1), q.norm(dim=-1), rtol=0, atol=1e-10)


def test_rope_odd_dim_rejected():
    with pytest.raises(ValueError):
        rope_rotate(torch.randn(2, 5), torch.randn(2, 5), [0, 1])


# ----------------------------------------------------------------- attention


def test_mask_band():
    m = sliding_causal_mask(5, 2)
    assert m.tolist()[3] == [False, False, True, True, False]


def test_single_step_attention_is_value_projection():
    torch.manual_seed(0)
    attn = SlidingAttention(8, 2, 4).double()
    x = torch.randn(1, 8, dtype=torch.float64)
    v = attn.qkv(x)[:, 16:]
    torch.testing.assert_close(attn(x), attn.out(v))


@pytest.mark.parametrize("window,rope", [(3, True), (12, True), (5, False)])
def test_attention_matches_loop_reference(window, rope):
    torch.manual_seed(1)
    attn = SlidingAttention(8, 2, window, rope).double()
    x = torch.randn(12, 8, dtype=torch.float64)
    torch.testing.assert_close(attn(x), dense_reference_attention(x, attn, window), rtol=1e-10, atol=1e-12)


def test_full_window_equals_dense_causal():
    torch.manual_seed(2)
    t = 10
    attn = SlidingAttention(8, 1, t, rope=False).double()
    x = torch.randn(t, 8, dtype=torch.float64)
    q, k, v = attn.qkv(x).chunk(3, -1)
    scores = (q @ k.T) / math.sqrt(8)
    scores = scores.masked_fill(torch.triu(torch.ones(t, t, dtype=torch.bool), 1), float("-inf"))
    ref = attn.out(torch.softmax(scores, -1) @ v)
    torch.testing.assert_close(attn(x), ref)


def test_functional_attention_and_nonfinite():
    cfg = StackConfig(1, 8, 2, 4)
    x = torch.randn(5, 8)
    assert sliding_causal_attention(x, cfg).shape == (5, 8)
    with pytest.raises(ValueError):
        sliding_causal_attention(torch.full((3, 8), float("nan")), cfg)


def test_causality_bit_exact():
    torch.manual_seed(3)
    stack = TransformerStack(StackConfig(2, 16, 2, 6)).double()
    x = torch.randn(20, 16, dtype=torch.float64)
    base = stack(x)
    for t in range(19):
        y = x.clone()
        y[t + 1 :] += torch.randn_like(y[t + 1 :])
        assert torch.equal(stack(y)[: t + 1], base[: t + 1])


def test_single_layer_receptive_field():
    torch.manual_seed(4)
    w = 4
    stack = TransformerStack(StackConfig(1, 8, 2, w)).double()
    x = torch.randn(32, 8, dtype=torch.float64)
    base = stack(x)
    for t in range(32):
        y = x.clone()
        if t - w + 1 > 0:
            y[: t - w + 1] += 1.0
        assert torch.equal(stack(y)[t], base[t])


def test_stack_shape_and_batch():
    stack = TransformerStack(StackConfig(2, 16, 4, 8))
    for shape in [(1, 16), (7, 16), (3, 9, 16)]:
        assert stack(torch.randn(*shape)).shape == shape


def test_determinism_same_seed():
    outs = []
    for _ in range(2):
        torch.manual_seed(11)
        stack = TransformerStack(StackConfig(2, 16, 2, 8))
        outs.append(stack(torch.ones(5, 16)))
    assert torch.equal(*outs)


# ----------------------------------------------------------------- depth AR


def test_depth_ar_shapes_and_l2():
    torch.manual_seed(5)
    ar = DepthAR(4, 2, StackConfig(1, 8, 2, 4)).double()
    x = torch.randn(6, 2, 4, dtype=torch.float64)
    out = ar(x)
    assert out.shape == (6, 1, 4)
    y = x.clone()
    y[:, 1] += 5.0  # the only target layer; not an input for L=2
    assert torch.equal(ar(y), out)
    with pytest.raises(ValueError):
        DepthAR(4, 1, StackConfig(1, 8, 2, 4))


def test_depth_ar_vq_axis_causality():
    torch.manual_seed(6)
    L = 4
    ar = DepthAR(4, L, StackConfig(2, 8, 2, L)).double()
    x = torch.randn(5, L, 4, dtype=torch.float64)
    base = ar(x)
    for layer in range(L):
        y = x.clone()
        y[:, layer:] += torch.randn_like(y[:, layer:])
        # predictions for layers 2..layer (1-based) depend only on inputs < layer
        assert torch.equal(ar(y)[:, : layer], base[:, : layer])


def test_depth_ar_positions_independent():
    torch.manual_seed(7)
    ar = DepthAR(4, 3, StackConfig(1, 8, 2, 3)).double()
    x = torch.randn(2, 6, 3, 4, dtype=torch.float64)
    base = ar(x)
    y = x.clone()
    y[0, 2] += 3.0
    out = ar(y)
    others = [i for i in range(6) if i != 2]
    assert torch.equal(out[0, others], base[0, others])
    assert torch.equal(out[1], base[1])


# ----------------------------------------------------------------- gradients


def _params(module):
    return [p for p in module.parameters()]


def test_gradient_attention(fd_check):
    torch.manual_seed(8)
    attn = SlidingAttention(8, 2, 3).double()
    x = torch.randn(6, 8, dtype=torch.float64, requires_grad=True)
    target = torch.randn(6, 8, dtype=torch.float64)
    fn = lambda: ((attn(x) - target) ** 2).sum()  # noqa: E731
    assert fd_check(fn, [x, *_params(attn)]) < FD_TOL


def test_gradient_rope(fd_check):
    q = torch.randn(5, 8, dtype=torch.float64, requires_grad=True)
    k = torch.randn(5, 8, dtype=torch.float64, requires_grad=True)
    w = torch.randn(5, 5, dtype=torch.float64)
    fn = lambda: ((lambda a, b: (a @ b.T * w).sum())(*rope_rotate(q, k, torch.arange(5))))  # noqa: E731
    assert fd_check(fn, [q, k]) < FD_TOL


def test_gradient_feed_forward(fd_check):
    torch.manual_seed(9)
    ff = FeedForward(6, 2.0).double()
    x = torch.randn(4, 6, dtype=torch.float64, requires_grad=True)
    fn = lambda: (ff(x) ** 2).sum()  # noqa: E731
    assert fd_check(fn, [x, *_params(ff)]) < FD_TOL


def test_gradient_encoder_stack(fd_check):
    torch.manual_seed(10)
    stack = TransformerStack(StackConfig(2, 8, 2, 4)).double()
    x = torch.randn(7, 8, dtype=torch.float64, requires_grad=True)
    target = torch.randn(7, 8, dtype=torch.float64)
    fn = lambda: ((stack(x) - target) ** 2).mean()  # noqa: E731
    assert fd_check(fn, [x, *_params(stack)], max_entries=12) < FD_TOL


def test_gradient_depth_ar(fd_check):
    torch.manual_seed(11)
    ar = DepthAR(4, 3, StackConfig(1, 8, 2, 3)).double()
    x = torch.randn(5, 3, 4, dtype=torch.float64, requires_grad=True)
    target = torch.randn(5, 2, 4, dtype=torch.float64)
    fn = lambda: ((ar(x) - target) ** 2).mean()  # noqa: E731
    assert fd_check(fn, [x, *_params(ar)], max_entries=12) < FD_TOL
