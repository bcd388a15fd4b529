"""Bi-temporal encoder tests: shapes, weight sharing, fusion, pooling."""

import pytest
import torch

from changecap.encoder import ChangeEncoder, EncoderConfig, HSALayer, cosine_mask
from changecap.errors import ConfigurationError

CFG = EncoderConfig(image_size=32, dim=16, num_heads=2, hsa_layers=1,
                    backbone_channels=(8, 8, 16))


def _images(b=2, size=32, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(b, size, size, 3, generator=g)


def test_config_validates_channel_dim_match():
    with pytest.raises(ConfigurationError):
        EncoderConfig(image_size=32, dim=16, backbone_channels=(8, 8, 8))


def test_config_validates_stride_divisibility():
    with pytest.raises(ConfigurationError):
        EncoderConfig(image_size=33, dim=16, backbone_channels=(8, 8, 16))


def test_backbone_token_shape():
    enc = ChangeEncoder(CFG)
    tokens = enc.backbone_forward(_images())
    assert tokens.shape == (2, CFG.grid_size**2, 16)
    assert CFG.grid_size == 4


def test_backbone_rejects_wrong_size():
    enc = ChangeEncoder(CFG)
    with pytest.raises(ConfigurationError):
        enc.backbone_forward(torch.rand(1, 16, 16, 3))


def test_forward_output_shapes():
    enc = ChangeEncoder(CFG)
    e_cap, e_con = enc(_images(3), _images(3, seed=1))
    assert e_cap.shape == (3, 16, 16)
    assert e_con.shape == (3, 16)


def test_siamese_backbone_is_shared():
    """Both time steps run through the same backbone instance/weights."""
    enc = ChangeEncoder(CFG)
    x = _images()
    torch.testing.assert_close(enc.backbone_forward(x), enc.backbone_forward(x))
    assert len(list(enc.backbone.parameters())) == len(
        [p for p in enc.backbone.parameters()]
    )


def test_hsa_layer_swap_equivariance():
    """Shared weights make the layer symmetric: swapping inputs swaps outputs."""
    torch.manual_seed(0)
    layer = HSALayer(16, 2)
    f1, f2 = torch.randn(2, 9, 16), torch.randn(2, 9, 16)
    o1, o2 = layer(f1, f2)
    s2, s1 = layer(f2, f1)
    torch.testing.assert_close(o1, s1, atol=1e-6, rtol=0)
    torch.testing.assert_close(o2, s2, atol=1e-6, rtol=0)


def test_encoder_sensitive_to_pair_order():
    torch.manual_seed(0)
    enc = ChangeEncoder(CFG)
    a, b = _images(seed=2), _images(seed=3)
    _, con_ab = enc(a, b)
    _, con_ba = enc(b, a)
    assert not torch.allclose(con_ab, con_ba)


def test_cosine_mask_bounds_and_special_cases():
    v = torch.randn(4, 7, 8)
    cos = cosine_mask(v, v)
    torch.testing.assert_close(cos, torch.ones(4, 7), atol=1e-6, rtol=0)
    cos2 = cosine_mask(v, -v)
    torch.testing.assert_close(cos2, -torch.ones(4, 7), atol=1e-6, rtol=0)
    zeros = torch.zeros_like(v)
    torch.testing.assert_close(cosine_mask(v, zeros), torch.zeros(4, 7))
    mixed = cosine_mask(torch.randn(2, 5, 8), torch.randn(2, 5, 8))
    assert mixed.abs().max() <= 1.0 + 1e-6


def test_cosine_mask_hand_computed():
    a = torch.tensor([[[1.0, 0.0], [1.0, 1.0]]])
    b = torch.tensor([[[0.0, 1.0], [1.0, 0.0]]])
    cos = cosine_mask(a, b)
    torch.testing.assert_close(cos, torch.tensor([[0.0, 0.5**0.5]]), atol=1e-6, rtol=0)


def test_fuse_concat_plus_cosine():
    enc = ChangeEncoder(CFG)
    i1 = torch.randn(1, 16, 16)
    i2 = torch.randn(1, 16, 16)
    fused = enc.fuse(i1, i2)
    assert fused.shape == (1, 16, 32)
    cos = cosine_mask(i1, i2)
    torch.testing.assert_close(fused[..., :16], i1 + cos.unsqueeze(-1))
    torch.testing.assert_close(fused[..., 16:], i2 + cos.unsqueeze(-1))


def test_project_residual_with_zeroed_residual_branch():
    """Zero the last conv of the residual block: output must equal relu(C)."""
    enc = ChangeEncoder(CFG)
    with torch.no_grad():
        enc.res_block[-1].weight.zero_()
        enc.res_block[-1].bias.zero_()
    f_fus = torch.randn(2, 16, 32)
    out = enc.project_residual(f_fus)
    g = CFG.grid_size
    c = enc.reduce(f_fus.transpose(1, 2).reshape(2, 32, g, g))
    expected = torch.relu(c).flatten(2).transpose(1, 2)
    torch.testing.assert_close(out, expected, atol=1e-6, rtol=0)


def test_attentive_pool_uniform_attention_is_token_mean():
    enc = ChangeEncoder(CFG)
    with torch.no_grad():
        enc.pool_attn.q_proj.weight.zero_()
        enc.pool_attn.q_proj.bias.zero_()
        enc.pool_attn.k_proj.weight.zero_()
        enc.pool_attn.k_proj.bias.zero_()
        enc.pool_attn.v_proj.weight.copy_(torch.eye(16))
        enc.pool_attn.v_proj.bias.zero_()
        enc.pool_attn.out_proj.weight.copy_(torch.eye(16))
        enc.pool_attn.out_proj.bias.zero_()
    tokens = torch.randn(3, 16, 16)
    pooled = enc.attentive_pool(tokens)
    torch.testing.assert_close(pooled, tokens.mean(dim=1), atol=1e-6, rtol=0)


def test_finetune_policies():
    enc = ChangeEncoder(CFG)
    enc.backbone.set_finetune("frozen")
    assert all(not p.requires_grad for p in enc.backbone.parameters())
    enc.backbone.set_finetune("last2")
    flags = [all(p.requires_grad for p in s.parameters()) for s in enc.backbone.stages]
    assert flags == [False, True, True]
    enc.backbone.set_finetune("full")
    assert all(p.requires_grad for p in enc.backbone.parameters())
    with pytest.raises(ConfigurationError):
        enc.backbone.set_finetune("half")


def test_forward_outputs_finite_fuzz():
    torch.manual_seed(4)
    enc = ChangeEncoder(CFG)
    for seed in range(5):
        e_cap, e_con = enc(_images(2, seed=seed), _images(2, seed=seed + 100))
        assert torch.isfinite(e_cap).all()
        assert torch.isfinite(e_con).all()
