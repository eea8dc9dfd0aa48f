import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from deglass.netarch import (
    ArcFaceHead,
    DiscriminatorConfig,
    EmbedderConfig,
    GeneratorConfig,
    IdentityEmbedder,
    PatchDiscriminator,
    ShapeError,
    arcface_logits,
    build_generator,
    discriminator_forward,
    generator_forward,
    identity_embed,
    patch_output_size,
)


def small(depth=3, size=32, **kw):
    kw.setdefault("base_channels", 8)
    return GeneratorConfig(depth=depth, input_size=size, **kw)


@pytest.mark.parametrize("depth,size", [(3, 32), (4, 64), (5, 64), (3, 64)])
def test_generator_shapes_and_ranges(depth, size):
    torch.manual_seed(0)
    gen = build_generator(small(depth, size))
    x = torch.rand(2, 3, size, size) * 2 - 1
    out = generator_forward(gen, x)
    assert out.y_hat.shape == (2, 3, size, size)
    assert out.m_hat.shape == (2, 2, size, size)
    assert out.y_hat.abs().max() <= 1 and out.m_hat.min() >= 0 and out.m_hat.max() <= 1


def test_bottleneck_at_depth5_256():
    gen = build_generator(GeneratorConfig(depth=5, input_size=256, base_channels=4))
    skips = gen.encode(torch.zeros(1, 3, 256, 256))
    assert skips[-1].shape[-2:] == (8, 8)


def test_single_image_forward():
    gen = build_generator(small())
    out = generator_forward(gen, torch.zeros(3, 32, 32))
    assert out.y_hat.shape == (3, 32, 32) and out.m_hat.shape == (2, 32, 32)


def test_wrong_input_shape_rejected():
    gen = build_generator(small())
    with pytest.raises(ShapeError):
        gen(torch.zeros(1, 3, 30, 30))
    with pytest.raises(ValueError):
        GeneratorConfig(depth=5, input_size=48)


def test_skip_wiring_counts():
    cfg = small(4, 64)
    gen = build_generator(cfg)
    up = [cfg.channels(max(4 - j, 1)) for j in range(1, 5)]
    for j in range(2, 5):
        expected = up[j - 2] + cfg.channels(4 - j + 1) + up[j - 2]
        assert gen.face_decoder.block_inputs[j - 1] == expected
        assert gen.seg_decoder.block_inputs[j - 1] == up[j - 2] + cfg.channels(4 - j + 1)


def _param_count(m):
    return sum(p.numel() for p in m.parameters())


def test_ablation_structures():
    full = build_generator(small(4, 64))
    exp_b = build_generator(small(4, 64, sd_fd_skips=False))
    exp_a = build_generator(small(4, 64, sd_fd_skips=False, seg_channels=1))
    # B: the face decoder loses exactly the SD feature channels, SD unchanged
    assert _param_count(exp_b.seg_decoder) == _param_count(full.seg_decoder)
    assert _param_count(exp_b.face_decoder) < _param_count(full.face_decoder)
    assert exp_b.face_decoder.block_inputs[1:] == exp_b.seg_decoder.block_inputs[1:]
    # A: additionally a single-channel mask head
    assert exp_a.seg_decoder.out.out_channels == 1
    assert _param_count(exp_a.face_decoder) == _param_count(exp_b.face_decoder)
    out = generator_forward(exp_a, torch.zeros(1, 3, 64, 64))
    assert out.m_hat.shape == (1, 1, 64, 64)


def test_identical_batch_items_identical_outputs():
    torch.manual_seed(1)
    gen = build_generator(small())
    x = torch.rand(1, 3, 32, 32).repeat(2, 1, 1, 1)
    out = generator_forward(gen, x)
    assert torch.equal(out.y_hat[0], out.y_hat[1]) and torch.equal(out.m_hat[0], out.m_hat[1])


def test_forward_deterministic():
    gen = build_generator(small())
    x = torch.zeros(1, 3, 32, 32)
    a, b = generator_forward(gen, x), generator_forward(gen, x)
    assert torch.equal(a.y_hat, b.y_hat) and torch.equal(a.m_hat, b.m_hat)


@settings(max_examples=10)
@given(seed=st.integers(0, 1000), scale=st.floats(0.1, 50))
def test_output_ranges_random_weights(seed, scale):
    torch.manual_seed(seed)
    gen = build_generator(small(3, 32))
    with torch.no_grad():
        for p in gen.parameters():
            p.mul_(scale)
    out = gen(torch.randn(2, 3, 32, 32) * scale)
    assert out.y_hat.abs().max() <= 1 and out.m_hat.min() >= 0 and out.m_hat.max() <= 1


@pytest.mark.parametrize("guidance", [0.0, 0.03, 1.0])
def test_gradient_flow(guidance):
    torch.manual_seed(0)
    gen = build_generator(small(3, 32, sd_guidance_grad=guidance))
    x = torch.rand(2, 3, 32, 32) * 2 - 1
    gen(x).y_hat.sum().backward()
    for name, p in list(gen.encoder.named_parameters()) + list(gen.face_decoder.named_parameters()):
        assert p.grad is not None and p.grad.abs().sum() > 0, name
    gen.zero_grad(set_to_none=True)
    gen(x).m_hat.sum().backward()
    for name, p in list(gen.encoder.named_parameters()) + list(gen.seg_decoder.named_parameters()):
        assert p.grad is not None and p.grad.abs().sum() > 0, name


def test_guidance_scale_forward_unchanged():
    torch.manual_seed(0)
    a = build_generator(small(sd_guidance_grad=0.0))
    b = build_generator(small(sd_guidance_grad=1.0))
    b.load_state_dict(a.state_dict())
    x = torch.rand(1, 3, 32, 32)
    assert torch.equal(a(x).y_hat, b(x).y_hat)


# -- discriminator -------------------------------------------------------------------------


def test_patch_map_size():
    assert patch_output_size(256) == 30
    d = PatchDiscriminator(DiscriminatorConfig(base_channels=4))
    assert discriminator_forward(d, torch.zeros(1, 3, 256, 256)).shape == (1, 1, 30, 30)
    assert discriminator_forward(d, torch.zeros(2, 3, 64, 64)).shape == (2, 1, patch_output_size(64), 6)


def test_zero_final_layer_gives_zero_map():
    d = PatchDiscriminator(DiscriminatorConfig(base_channels=4))
    with torch.no_grad():
        d.final_layer.weight.zero_()
        d.final_layer.bias.zero_()
    assert torch.equal(discriminator_forward(d, torch.zeros(3, 64, 64)), torch.zeros(6, 6))


def test_local_input_with_empty_mask_is_black():
    from deglass.losses import masked

    img = torch.rand(2, 3, 8, 8)
    assert torch.equal(masked(img, torch.zeros(2, 1, 8, 8)), torch.zeros_like(img))


# -- identity extractor and ArcFace ----------------------------------------------------------


def test_identity_embed_shape():
    ie = IdentityEmbedder(EmbedderConfig(input_size=32, widths=(8, 8, 16, 16)))
    assert identity_embed(ie, torch.zeros(3, 32, 32)).shape == (512,)
    assert identity_embed(ie, torch.zeros(4, 3, 32, 32)).shape == (4, 512)
    ie.freeze()
    assert all(not p.requires_grad for p in ie.parameters())


def test_arcface_zero_margin_is_cosine():
    torch.manual_seed(0)
    e, w = torch.randn(3, 16, dtype=torch.float64), torch.randn(5, 16, dtype=torch.float64)
    cos = torch.nn.functional.normalize(e, dim=1) @ torch.nn.functional.normalize(w, dim=1).T
    torch.testing.assert_close(arcface_logits(e, w, torch.tensor([0, 1, 2]), margin=0.0, scale=1.0), cos)


def test_arcface_parallel_target():
    w = torch.eye(4, dtype=torch.float64)
    e = torch.tensor([0.0, 3.0, 0.0, 0.0], dtype=torch.float64)
    logits = arcface_logits(e, w, 1, margin=0.5, scale=10.0)
    assert logits[1].item() == pytest.approx(10 * math.cos(0.5), abs=1e-12)
    assert logits[0].item() == pytest.approx(0.0, abs=1e-12)


def test_arcface_scalar_oracle():
    g = torch.Generator().manual_seed(3)
    e = torch.randn(6, 8, generator=g, dtype=torch.float64)
    w = torch.randn(4, 8, generator=g, dtype=torch.float64)
    t = torch.tensor([0, 1, 2, 3, 1, 0])
    got = arcface_logits(e, w, t, margin=0.3, scale=16.0)
    for i in range(6):
        for c in range(4):
            dot = sum(float(e[i, k]) * float(w[c, k]) for k in range(8))
            cos = dot / (math.sqrt(sum(float(v) ** 2 for v in e[i])) * math.sqrt(sum(float(v) ** 2 for v in w[c])))
            want = 16.0 * (math.cos(math.acos(cos) + 0.3) if c == int(t[i]) else cos)
            assert got[i, c].item() == pytest.approx(want, abs=1e-6)


def test_arcface_zero_norm_rejected():
    with pytest.raises(ValueError):
        arcface_logits(torch.zeros(4), torch.eye(4))
    head = ArcFaceHead(3, embed_dim=4)
    assert head(torch.ones(2, 4), torch.tensor([0, 1])).shape == (2, 3)
