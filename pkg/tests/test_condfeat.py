import math

import pytest
import torch

from retinaregen.condfeat import (
    EXTRACTOR_KINDS,
    AttentionConfig,
    ChannelCompressor,
    ConditionalFeatureExtractor,
    MultiHeadSelfAttention,
    build_static_condition,
    make_backbone,
)


def test_attention_config_divisibility():
    with pytest.raises(ValueError):
        AttentionConfig(embed_dim=30, heads=8)


def test_backbone_deterministic():
    torch.manual_seed(0)
    net = make_backbone("res18", 32)
    x = torch.rand(1, 3, 32, 32)
    with torch.no_grad():
        assert torch.equal(net(x), net(x))


@pytest.mark.parametrize("kind", EXTRACTOR_KINDS)
def test_backbone_total_stride_4(kind):
    torch.manual_seed(0)
    net = make_backbone(kind, 32)
    x = torch.rand(1, 3, 32, 32)
    with torch.no_grad():
        out = net(x)
    assert out.shape[-2:] == (8, 8), kind
    assert out.shape[1] == 32


def test_unknown_backbone_kind():
    with pytest.raises(ValueError):
        make_backbone("transformer", 32)


def test_zero_conv_with_bias_gives_constant_map():
    # one conv layer, zero weights, bias b, ReLU -> constant max(b, 0)
    conv = torch.nn.Conv2d(3, 4, 3, padding=1)
    with torch.no_grad():
        conv.weight.zero_()
        conv.bias.copy_(torch.tensor([0.5, -1.0, 2.0, 0.0]))
    out = torch.relu(conv(torch.zeros(1, 3, 8, 8)))
    for c, b in enumerate([0.5, -1.0, 2.0, 0.0]):
        assert torch.allclose(out[0, c], torch.full((8, 8), max(b, 0.0)))


def test_compressor_output_channels_and_relu():
    torch.manual_seed(1)
    comp = ChannelCompressor(in_channels=256, embed_dim=256)
    out = comp(torch.randn(2, 256, 4, 4))
    assert out.shape[1] == 256
    assert torch.all(out >= 0)


def test_compressor_rejects_upsampling_channels():
    with pytest.raises(ValueError):
        ChannelCompressor(in_channels=16, embed_dim=32)


def test_compressor_identity_kernel_is_normalization_only():
    comp = ChannelCompressor(in_channels=2, embed_dim=2).double()
    with torch.no_grad():
        comp.proj.weight.zero_()
        comp.proj.weight[0, 0, 0, 0] = 1.0
        comp.proj.weight[1, 1, 0, 0] = 1.0
        comp.proj.bias.zero_()
    g = torch.Generator().manual_seed(2)
    x = torch.randn(1, 2, 3, 3, generator=g, dtype=torch.float64)
    out = comp(x)
    # scalar oracle: standardize each channel over its 9 positions, ReLU
    for c in range(2):
        vals = x[0, c].reshape(-1)
        mu = vals.mean().item()
        var = ((vals - mu) ** 2).mean().item()
        for i in range(3):
            for j in range(3):
                expected = max((x[0, c, i, j].item() - mu) / math.sqrt(var + 1e-5), 0.0)
                assert abs(out[0, c, i, j].item() - expected) < 1e-9


def test_attention_rows_sum_to_one():
    torch.manual_seed(3)
    attn = MultiHeadSelfAttention(AttentionConfig(embed_dim=16, heads=4))
    x = torch.randn(2, 16, 3, 3)
    w = attn.attention_weights(x)
    assert w.shape == (2, 4, 9, 9)
    assert torch.allclose(w.sum(dim=-1), torch.ones(2, 4, 9), atol=1e-6)


def test_attention_uniform_for_identical_tokens():
    torch.manual_seed(4)
    attn = MultiHeadSelfAttention(AttentionConfig(embed_dim=8, heads=2))
    x = torch.randn(1, 8, 1, 1).expand(1, 8, 2, 3).contiguous()
    w = attn.attention_weights(x)
    assert torch.allclose(w, torch.full_like(w, 1.0 / 6.0), atol=1e-6)


def test_attention_two_token_closed_form():
    cfg = AttentionConfig(embed_dim=2, heads=1)
    attn = MultiHeadSelfAttention(cfg).double()
    with torch.no_grad():
        attn.q.weight.copy_(torch.tensor([[1.0, 0.0], [0.0, 1.0]]))
        attn.k.weight.copy_(torch.tensor([[0.0, 1.0], [1.0, 0.0]]))
        attn.v.weight.copy_(torch.tensor([[2.0, 0.0], [0.0, 3.0]]))
        attn.out.weight.copy_(torch.eye(2))
        for lin in (attn.q, attn.k, attn.v, attn.out):
            lin.bias.zero_()
    # two tokens arranged as a 1x2 map
    t0, t1 = [0.5, -1.0], [1.5, 0.25]
    x = torch.tensor([[[t0[0], t1[0]]], [[t0[1], t1[1]]]], dtype=torch.float64).reshape(1, 2, 1, 2)

    def oracle():
        import numpy as np

        toks = np.array([t0, t1])
        q = toks @ np.array([[1.0, 0.0], [0.0, 1.0]]).T
        k = toks @ np.array([[0.0, 1.0], [1.0, 0.0]]).T
        v = toks @ np.array([[2.0, 0.0], [0.0, 3.0]]).T
        scores = q @ k.T / math.sqrt(2.0)
        w = np.exp(scores)
        w /= w.sum(axis=1, keepdims=True)
        return toks + w @ v  # residual + identity out-projection

    expected = oracle()
    with torch.no_grad():
        out = attn(x)[0].reshape(2, 2).T.numpy()  # back to (token, channel)
    assert abs(out - expected).max() < 1e-9


def test_attention_invariant_to_head_permutation():
    torch.manual_seed(5)
    cfg = AttentionConfig(embed_dim=8, heads=2)
    attn = MultiHeadSelfAttention(cfg).double()
    x = torch.randn(1, 8, 2, 2, dtype=torch.float64)
    with torch.no_grad():
        before = attn(x)
    # swap the two heads' parameter blocks in q/k/v and the matching
    # input columns of the output projection
    d_head = cfg.embed_dim // cfg.heads
    perm = torch.cat([torch.arange(d_head, 2 * d_head), torch.arange(0, d_head)])
    with torch.no_grad():
        for lin in (attn.q, attn.k, attn.v):
            lin.weight.copy_(lin.weight[perm])
            lin.bias.copy_(lin.bias[perm])
        attn.out.weight.copy_(attn.out.weight[:, perm])
        after = attn(x)
    assert torch.allclose(before, after, atol=1e-10)


def test_extractor_shapes_and_pooling():
    torch.manual_seed(6)
    cfg = AttentionConfig(embed_dim=16, heads=4)
    ext = ConditionalFeatureExtractor(kind="res18", attention=cfg)
    ext.eval()
    imgs = torch.rand(3, 3, 32, 32)
    with torch.no_grad():
        maps = ext(imgs)
    assert maps.shape == (3, 16, 8, 8)
    cond = build_static_condition(ext, imgs)
    assert cond.n_sources == 3
    assert torch.allclose(cond.map.tensor, maps.mean(dim=0), atol=1e-6)


def test_condition_single_image_and_mean():
    torch.manual_seed(7)
    ext = ConditionalFeatureExtractor(kind="self_attention_only",
                                      attention=AttentionConfig(16, 4))
    ext.eval()
    imgs = torch.rand(2, 3, 32, 32)
    with torch.no_grad():
        single = build_static_condition(ext, imgs[:1])
        both = build_static_condition(ext, imgs)
        maps = ext(imgs)
    assert single.n_sources == 1
    assert torch.allclose(single.map.tensor, maps[0], atol=1e-6)
    assert torch.allclose(both.map.tensor, (maps[0] + maps[1]) / 2, atol=1e-6)


def test_condition_permutation_invariant():
    torch.manual_seed(8)
    ext = ConditionalFeatureExtractor(kind="res18", attention=AttentionConfig(16, 4)).double()
    ext.eval()
    imgs = torch.rand(10, 3, 32, 32, dtype=torch.float64)
    with torch.no_grad():
        a = build_static_condition(ext, imgs)
        b = build_static_condition(ext, imgs[torch.randperm(10)])
    assert torch.allclose(a.map.tensor, b.map.tensor, atol=1e-12)


def test_condition_empty_error():
    ext = ConditionalFeatureExtractor(kind="res18", attention=AttentionConfig(16, 4))
    with pytest.raises(ValueError):
        build_static_condition(ext, torch.zeros(0, 3, 32, 32))
