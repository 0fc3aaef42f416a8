import math

import numpy as np
import pytest

from velora import tensor as T
from velora.errors import ConfigError, ShapeError
from velora.nn import (
    Attention,
    Init,
    LinearLayer,
    TransformerBlock,
    ViTBackbone,
    ViTConfig,
    backbone_param_count,
    classification_head,
    patch_embed,
)
from velora.rng import make_rng
from velora.tensor import Tensor


def scalar_attention(x, wqkv, bqkv, wproj, bproj, heads):
    """Token-by-token, head-by-head reference with explicit loops."""
    n, d = x.shape
    dh = d // heads
    qkv = [[sum(x[i, k] * wqkv[o, k] for k in range(d)) + bqkv[o] for o in range(3 * d)] for i in range(n)]
    out = np.zeros((n, d))
    for h in range(heads):
        lo = h * dh
        for i in range(n):
            q = [qkv[i][lo + c] for c in range(dh)]
            scores = []
            for j in range(n):
                k = [qkv[j][d + lo + c] for c in range(dh)]
                scores.append(sum(a * b for a, b in zip(q, k)) / math.sqrt(dh))
            m = max(scores)
            e = [math.exp(s - m) for s in scores]
            z = sum(e)
            for c in range(dh):
                out[i, lo + c] = sum(e[j] / z * qkv[j][2 * d + lo + c] for j in range(n))
    return np.array([[sum(out[i, k] * wproj[o, k] for k in range(d)) + bproj[o] for o in range(d)] for i in range(n)])


@pytest.mark.parametrize("heads", [1, 2])
def test_attention_matches_scalar_loop_two_tokens(heads):
    cfg = ViTConfig(image_size=8, patch_size=4, dim=4, depth=1, heads=heads, mlp_ratio=2, num_classes=2)
    with T.default_dtype(np.float64):
        attn = Attention(cfg, Init(np.random.default_rng(5), std=0.5))
        attn.qkv.bias.data = np.random.default_rng(6).normal(size=12)
        x = np.random.default_rng(7).normal(size=(2, 4))
        got = attn(Tensor(x)).data
    ref = scalar_attention(x, attn.qkv.weight.data, attn.qkv.bias.data, attn.proj.weight.data, attn.proj.bias.data, heads)
    np.testing.assert_allclose(got, ref, atol=1e-6)
    np.testing.assert_allclose(attn.last_weights.sum(-1), 1.0, atol=1e-12)


def test_attention_batched_equals_per_sample():
    cfg = ViTConfig(image_size=8, patch_size=4, dim=8, depth=1, heads=2, mlp_ratio=2)
    with T.default_dtype(np.float64):
        attn = Attention(cfg, Init(np.random.default_rng(1), std=0.3))
        x = np.random.default_rng(2).normal(size=(3, 5, 8))
        full = attn(Tensor(x)).data
        for b in range(3):
            np.testing.assert_allclose(attn(Tensor(x[b])).data, full[b], atol=1e-12)


def test_patch_embed_layout():
    cfg = ViTConfig(image_size=8, patch_size=4, dim=6, depth=1, heads=2, mlp_ratio=2)
    with T.default_dtype(np.float64):
        bb = ViTBackbone(cfg, Init(np.random.default_rng(0)))
        img = np.random.default_rng(1).random((8, 8, 3))
        tok = patch_embed(img, cfg, bb.embed).data
    assert tok.shape == (cfg.token_count, 6)
    # patch (row 1, col 0) covers pixel rows 4..7, cols 0..3, flattened (py, px, ch)
    patch = img[4:8, 0:4, :].reshape(-1)
    e = bb.embed
    expect = e.proj.weight.data @ patch + e.proj.bias.data + e.pos_embed.data[1 + 2]
    np.testing.assert_allclose(tok[1 + 2], expect, atol=1e-12)
    np.testing.assert_allclose(tok[0], e.cls_token.data + e.pos_embed.data[0], atol=1e-12)


def test_patch_embed_rejects_wrong_size():
    cfg = ViTConfig(image_size=8, patch_size=4, dim=4, depth=1, heads=1)
    bb = ViTBackbone(cfg, Init(np.random.default_rng(0)))
    with pytest.raises(ShapeError):
        bb(np.zeros((12, 12, 3)))


@pytest.mark.parametrize(
    "kwargs",
    [dict(image_size=10, patch_size=4), dict(dim=10, heads=4), dict(depth=0), dict(patch_size=0)],
)
def test_vit_config_validation(kwargs):
    with pytest.raises(ConfigError):
        ViTConfig(**kwargs)


def test_backbone_census_matches_closed_form():
    cfg = ViTConfig(image_size=16, patch_size=4, dim=12, depth=3, heads=3, mlp_ratio=3)
    bb = ViTBackbone(cfg, Init(np.random.default_rng(0)))
    assert sum(p.size for p in bb.parameters()) == backbone_param_count(cfg)
    assert all(p.frozen for p in bb.parameters())


def test_vit_base_meta_census():
    cfg = ViTConfig.vit_base()
    bb = ViTBackbone(cfg, Init(meta=True))
    n = sum(p.size for p in bb.parameters())
    assert n == backbone_param_count(cfg)
    # 12 blocks of 7,087,872 plus patch/cls/pos embeddings
    assert n == 12 * 7_087_872 + (768 * 768 + 768) + 768 + 197 * 768


def test_block_is_residual_prenorm():
    cfg = ViTConfig(image_size=8, patch_size=4, dim=8, depth=1, heads=2, mlp_ratio=2)
    with T.default_dtype(np.float64):
        blk = TransformerBlock(cfg, Init(np.random.default_rng(3), std=0.2))
        x = Tensor(np.random.default_rng(4).normal(size=(5, 8)))
        y = blk(x).data
        h = x.data + blk.attn(blk.norm1(x)).data
        mlp = blk.mlp_fc2(T.gelu(blk.mlp_fc1(blk.norm2(Tensor(h))))).data
    np.testing.assert_allclose(y, h + mlp, atol=1e-12)


def test_state_dict_round_trip():
    cfg = ViTConfig(image_size=8, patch_size=4, dim=4, depth=2, heads=1)
    a = ViTBackbone(cfg, Init(make_rng(0, "a")))
    b = ViTBackbone(cfg, Init(make_rng(0, "b")))
    b.load_state_dict(a.state_dict())
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)
    bad = a.state_dict()
    bad["embed.pos_embed"] = np.zeros((1, 1), dtype=np.float32)
    with pytest.raises(ShapeError):
        b.load_state_dict(bad)


def test_classification_head_width_check():
    head = LinearLayer(8, 3, "head", Init(np.random.default_rng(0)), frozen=False)
    assert classification_head(np.zeros((2, 8)), head).shape == (2, 3)
    with pytest.raises(ShapeError):
        classification_head(np.zeros((2, 7)), head)


def test_linear_layer_unknown_attach_point():
    with pytest.raises(ConfigError):
        LinearLayer(2, 2, "nowhere", Init(np.random.default_rng(0)))


def test_seeded_init_is_deterministic():
    cfg = ViTConfig(image_size=8, patch_size=4, dim=4, depth=1, heads=1)
    a = ViTBackbone(cfg, Init(make_rng(9, "x")))
    b = ViTBackbone(cfg, Init(make_rng(9, "x")))
    c = ViTBackbone(cfg, Init(make_rng(9, "y")))
    assert np.array_equal(a.embed.pos_embed.data, b.embed.pos_embed.data)
    assert not np.array_equal(a.embed.pos_embed.data, c.embed.pos_embed.data)
    assert abs(np.std(ViTBackbone(ViTConfig(), Init(make_rng(0))).blocks[0].mlp_fc1.weight.data) - 0.02) < 1e-3
