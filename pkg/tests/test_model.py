from dataclasses import replace

import numpy as np
import pytest

from velora import tensor as T
from velora.errors import ConfigError, ContractError
from velora.lora import iter_adapters, lora_param_count, trainable_param_count
from velora.model import (
    COMPONENT_ROWS,
    ModelConfig,
    VeloraModel,
    component_toggles,
    prepare,
    reconstruction_losses,
)
from velora.nn import ViTConfig, adapters_disabled, backbone_param_count
from velora.tensor import Tensor

VIT = ViTConfig(image_size=16, patch_size=4, dim=16, depth=3, heads=2, mlp_ratio=2, num_classes=4)


def cfg(**kw):
    return ModelConfig(**{"vit": VIT, "frames": 4, **kw})


@pytest.fixture(scope="module")
def batch(tiny_clips):
    return prepare(tiny_clips)


def test_forward_shapes(batch):
    m = VeloraModel(cfg())
    out = m.forward(batch)
    n = VIT.token_count
    assert out.logits.shape == (8, 4)
    assert out.F_v.shape == out.F_e.shape == out.F_d.shape == (8, n, 16)
    assert out.recon_rgb.shape == out.recon_event.shape == (8, n, 16)
    assert set(out.losses) == {"ce", "rte", "etr", "total"}
    l = {k: v.item() for k, v in out.losses.items()}
    assert abs(l["total"] - (l["ce"] + l["rte"] + l["etr"])) < 1e-5


def test_zero_init_equals_adapter_free_model(batch):
    full = VeloraModel(cfg())
    bare = VeloraModel(cfg(lora_specific=False, lora_shared=False, reconstruction=False))
    assert next(iter_adapters(bare), None) is None
    a = full.forward(batch, with_loss=False).logits.data
    with adapters_disabled():
        b = full.forward(batch, with_loss=False).logits.data
    c = bare.forward(batch, with_loss=False).logits.data
    np.testing.assert_allclose(a, b, atol=1e-6)
    np.testing.assert_allclose(a, c, atol=1e-6)


def test_adapters_change_output_once_trained(batch):
    m = VeloraModel(cfg())
    rng = np.random.default_rng(0)
    for ad in iter_adapters(m):
        for _, p in ad.named_parameters():
            p.data = rng.normal(0, 0.1, p.shape).astype(np.float32)
    a = m.forward(batch, with_loss=False).logits.data
    with adapters_disabled():
        b = m.forward(batch, with_loss=False).logits.data
    assert np.abs(a - b).max() > 1e-4


def test_frozen_structure():
    m = VeloraModel(cfg())
    for name in ("rgb", "event", "diff"):
        br = m.branch(name)
        assert all(p.frozen for _, p in br.embed.named_parameters())
        assert set(br.blocks[0].adapters) == {"mlp_fc1", "mlp_fc2"}
        assert br.blocks[-1].adapters == {}
        for blk in br.blocks:
            assert all(lin.frozen for lin in blk.linears().values())
    assert not m.head.frozen
    assert m.fuse_attn is m.branch_rgb.blocks[-1].attn


def test_branches_do_not_share_parameters():
    m = VeloraModel(cfg())
    a = m.branch_rgb.blocks[0].mlp_fc1.weight
    b = m.branch_event.blocks[0].mlp_fc1.weight
    assert a is not b and not np.array_equal(a.data, b.data)


def test_full_finetune_all_trainable():
    m = VeloraModel(cfg(mode="full_finetune"))
    t, f = trainable_param_count(m)
    assert f == 0 and t > 0


def test_frame_count_checked(batch):
    m = VeloraModel(replace(cfg(), frames=5))
    with pytest.raises(ContractError):
        m.forward(batch)


@pytest.mark.parametrize("kw", [dict(mode="partial"), dict(diff_source="event"), dict(frames=1), dict(variant="x")])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        cfg(**kw)
    with pytest.raises(ConfigError):
        ModelConfig(vit=replace(VIT, depth=1))


def test_component_rows():
    assert len(COMPONENT_ROWS) == 6
    base = cfg()
    row1 = component_toggles(base, 1)
    assert (row1.frame_diff, row1.reconstruction, row1.lora_specific, row1.lora_shared) == (True, False, False, False)
    row6 = component_toggles(base, 6)
    assert (row6.frame_diff, row6.reconstruction, row6.lora_specific, row6.lora_shared) == (True, True, True, True)
    with pytest.raises(ConfigError):
        component_toggles(base, 7)


def test_rows_without_reconstruction_report_zero(batch):
    m = VeloraModel(component_toggles(cfg(), 1))
    out = m.forward(batch)
    assert out.recon_rgb is None and out.losses["rte"].item() == 0.0
    assert m.recon_r2e is None


def test_frame_diff_off_feeds_zeros(batch):
    m = VeloraModel(component_toggles(cfg(), 2))
    out = m.forward(batch)
    assert not out.F_d.data.any()


def test_reconstruction_ignores_class_token():
    rng = np.random.default_rng(0)
    fv, fe = rng.normal(size=(2, 5, 3)), rng.normal(size=(2, 5, 3))
    pe, pr = fe.copy(), fv.copy()
    pe[:, 0] += 100.0
    pr[:, 0] -= 100.0
    rte, etr = reconstruction_losses(Tensor(fv), Tensor(fe), Tensor(pe), Tensor(pr))
    assert rte.item() == 0.0 and etr.item() == 0.0
    pe[:, 1:] += 1.0
    rte, _ = reconstruction_losses(Tensor(fv), Tensor(fe), Tensor(pe), Tensor(pr))
    assert abs(rte.item() - 1.0) < 1e-6


def test_seeded_construction_is_reproducible(batch):
    a = VeloraModel(cfg(seed=4)).forward(batch).losses["total"].item()
    b = VeloraModel(cfg(seed=4)).forward(batch).losses["total"].item()
    c = VeloraModel(cfg(seed=5)).forward(batch).losses["total"].item()
    assert a == b and a != c


def test_forward_clip(tiny_clips):
    out = VeloraModel(cfg()).forward_clip(tiny_clips[0])
    assert out.logits.shape == (4,)


def test_gradients_reach_every_trainable_group(batch):
    m = VeloraModel(cfg())
    rng = np.random.default_rng(2)
    for _, p in m.named_parameters():
        if p.requires_grad:
            p.data = p.data + rng.normal(0, 0.02, p.shape).astype(np.float32)
    T.backward(m.forward(batch).losses["total"])
    for name, p in m.named_parameters():
        if p.requires_grad:
            assert p.grad is not None and np.abs(p.grad).sum() > 0, name
        else:
            assert p.grad is None, name


def vit_b_census(classes, rank=4):
    """Independent closed form for the ViT-B mlp-only trainable/total census."""
    d, hid, depth = 768, 3072, 12
    mlp_pair = lora_param_count(d, hid, rank) + lora_param_count(hid, d, rank)
    specific = 3 * (depth - 1) * mlp_pair
    recon = 2 * mlp_pair
    shared = 3 * lora_param_count(d, d, rank)
    norms = 2 * 2 * d
    head = 2 * d * classes + classes
    trainable = specific + recon + shared + norms + head
    block = 4 * d * d + 4 * d + 2 * d * hid + hid + d + 4 * d
    frozen = 3 * backbone_param_count(ViTConfig.vit_base(classes)) + 2 * block
    return trainable, frozen


@pytest.mark.parametrize("classes", [4, 114])
def test_vit_b_meta_census(classes):
    config = ModelConfig(vit=ViTConfig.vit_base(classes), frames=8, rank=4, locations="mlp")
    m = VeloraModel(config, meta=True)
    assert trainable_param_count(m) == vit_b_census(classes)
    t, f = vit_b_census(classes)
    assert t / (t + f) <= 0.01
