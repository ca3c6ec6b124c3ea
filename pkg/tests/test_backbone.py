import pytest
import torch

from saccader.backbone import BackboneConfig, StageFeatures, parameter_count, reference_backbone
from saccader.numerics import module_gradient_check


def test_stage_shapes_halve():
    cfg = BackboneConfig(channels=(32, 64, 128, 256), input_side=224, patch=4)
    assert cfg.stage_shapes() == [(56, 56), (28, 28), (14, 14), (7, 7)]
    assert BackboneConfig().stages == 4


def test_encode_shapes_and_token_count():
    cfg = BackboneConfig(channels=(4, 6, 8), input_side=32, patch=4)
    net = reference_backbone(cfg, seed=1)
    feats = net(torch.rand(2, 3, 32, 32))
    assert len(feats) == 3
    for s, f in enumerate(feats):
        assert isinstance(f, StageFeatures)
        assert f.stage_index == s
        h, w = f.spatial
        assert f.tokens.shape == (2, h * w, cfg.channels[s])
    assert [f.spatial for f in feats] == [(8, 8), (4, 4), (2, 2)]


def test_final_width():
    net = reference_backbone(BackboneConfig(channels=(32, 64, 128, 256), input_side=64, patch=4))
    assert net(torch.zeros(1, 3, 64, 64))[-1].tokens.shape[-1] == 256


def test_zero_final_projection_gives_zero_tokens():
    net = reference_backbone(BackboneConfig(channels=(4, 8), input_side=16, patch=4))
    with torch.no_grad():
        net.final_projection().weight.zero_()
        net.final_projection().bias.zero_()
    assert torch.equal(net(torch.zeros(1, 3, 16, 16))[-1].tokens, torch.zeros(1, 4, 8))


def test_seeded_weights_bit_identical():
    cfg = BackboneConfig(channels=(4, 8), input_side=16, patch=4)
    a, b = reference_backbone(cfg, 0), reference_backbone(cfg, 0)
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb and torch.equal(pa, pb)
    c = reference_backbone(cfg, 1)
    assert not torch.equal(a.stem.linear.weight, c.stem.linear.weight)


def test_seeding_leaves_global_rng_alone():
    torch.manual_seed(5)
    expect = torch.rand(3)
    torch.manual_seed(5)
    reference_backbone(BackboneConfig(channels=(4, 8), input_side=16, patch=4), seed=9)
    assert torch.equal(torch.rand(3), expect)


def test_deterministic_encode():
    net = reference_backbone(BackboneConfig(channels=(4, 8), input_side=16, patch=4))
    x = torch.rand(2, 3, 16, 16)
    out1, out2 = net(x), net(x.clone())
    for a, b in zip(out1, out2):
        assert torch.equal(a.tokens, b.tokens)


def test_default_is_small():
    assert parameter_count(reference_backbone(BackboneConfig())) <= 2_000_000


@pytest.mark.parametrize("shape", [(1, 3, 15, 16), (1, 1, 16, 16), (3, 16, 16)])
def test_wrong_geometry(shape):
    net = reference_backbone(BackboneConfig(channels=(4, 8), input_side=16, patch=4))
    with pytest.raises(ValueError):
        net(torch.zeros(shape))


@pytest.mark.parametrize("kw", [dict(channels=()), dict(channels=(4, 0)), dict(patch=0), dict(input_side=2, patch=4)])
def test_bad_config(kw):
    with pytest.raises(ValueError):
        BackboneConfig(**kw)


def test_too_many_stages():
    with pytest.raises(ValueError):
        BackboneConfig(channels=(2, 2, 2, 2), input_side=8, patch=4).stage_shapes()


def test_gradient_check_toy():
    # 4x4 tokens at stage 0, 2x2 after one merge
    cfg = BackboneConfig(channels=(3, 4), input_side=8, patch=2)
    net = reference_backbone(cfg, seed=2).double()
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    w = torch.randn(4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    report = module_gradient_check(net, lambda: (net(x)[-1].tokens[0] * w).sum())
    assert len(report) == len(list(net.parameters()))
    assert max(report.values()) < 1e-3
