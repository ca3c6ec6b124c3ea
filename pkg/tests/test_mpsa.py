import math
import warnings

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from saccader.backbone import BackboneConfig, StageFeatures, reference_backbone
from saccader.mpsa import (
    DegenerateMapWarning,
    Mpsa,
    MpsaConfig,
    PsaStage,
    fuse_logits,
    fuse_scalar_fields,
    resample_tokens,
)
from saccader.numerics import gelu, module_gradient_check

D = torch.float64


def _stage(c=4, spatial=(2, 4), parts=3, qc=None, seed=0, **kw) -> PsaStage:
    torch.manual_seed(seed)
    return PsaStage(c, spatial, parts, qc or c, **kw).double()


def _zero_compression(st_: PsaStage):
    with torch.no_grad():
        st_.compress.weight.zero_()
        st_.compress.bias.zero_()


def test_parts_must_be_fewer_than_channels():
    with pytest.raises(ValueError):
        PsaStage(4, (2, 2), 4, 4)


def test_uniform_weights_give_spatial_mean():
    s = _stage()
    _zero_compression(s)
    tok = torch.randn(2, 8, 4, dtype=D)
    parts = s.part_sampling(tok)
    assert parts.shape == (2, 3, 4)
    assert torch.allclose(parts, tok.mean(1, keepdim=True).expand(2, 3, 4), atol=1e-14)


def test_saturated_bias_selects_token():
    s = _stage()
    _zero_compression(s)
    with torch.no_grad():
        s.spatial_bias[5, 1] = 1e4
    tok = torch.randn(1, 8, 4, dtype=D)
    assert torch.allclose(s.part_sampling(tok)[0, 1], tok[0, 5], atol=1e-12)


def test_constant_tokens_constant_parts():
    s = _stage()
    tok = torch.full((1, 8, 4), 2.5, dtype=D)
    assert torch.allclose(s.part_sampling(tok), torch.full((1, 3, 4), 2.5, dtype=D), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_part_convexity(seed):
    s = _stage(seed=seed % 7)
    with torch.no_grad():
        s.spatial_bias.normal_(0, 3.0)
    tok = torch.rand(2, 8, 4, dtype=D, generator=torch.Generator().manual_seed(seed)) * 5
    parts = s.part_sampling(tok)
    lo, hi = tok.min(1, keepdim=True).values, tok.max(1, keepdim=True).values
    assert (parts >= lo - 1e-12).all() and (parts <= hi + 1e-12).all()
    w = s.part_weights(tok)
    assert torch.allclose(w.sum(1), torch.ones(2, 3, dtype=D), atol=1e-6)


def test_single_part_broadcasts_value():
    s = _stage(c=3, parts=1)
    parts = torch.randn(1, 1, 3, dtype=D)
    _, att = s.cross_attention(torch.randn(1, 8, 3, dtype=D), parts)
    assert torch.allclose(att, s.value(parts).expand(1, 8, 3), atol=1e-14)


def test_identical_parts_split_evenly():
    s = _stage()
    part = torch.randn(1, 1, 4, dtype=D)
    scores, _ = s.cross_attention(torch.randn(1, 8, 4, dtype=D), part.expand(1, 3, 4))
    attn = torch.softmax(scores, -1)
    assert torch.allclose(attn, torch.full_like(attn, 1 / 3), atol=1e-14)


def test_attention_rows_sum_to_one():
    s = _stage()
    with torch.no_grad():
        s.attn_bias.normal_()
    scores, _ = s.cross_attention(torch.randn(2, 8, 4, dtype=D), torch.randn(2, 3, 4, dtype=D))
    assert scores.shape == (2, 4, 8, 3)
    assert torch.allclose(torch.softmax(scores, -1).sum(-1), torch.ones(2, 4, 8, dtype=D), atol=1e-6)


def test_query_width_mismatch():
    s = _stage(qc=5)
    with pytest.raises(RuntimeError):
        s.cross_attention(torch.randn(1, 8, 4, dtype=D), torch.randn(1, 3, 4, dtype=D))


def test_scalar_field_uniform_and_zero():
    s = _stage()
    scores = torch.zeros(1, 4, 8, 3, dtype=D)
    parts = torch.randn(1, 3, 4, dtype=D)
    with torch.no_grad():
        s.se_fc2.weight.zero_()
        s.se_fc2.bias.fill_(50.0)  # gate saturates at one
    field = s.scalar_field(scores, parts)
    assert torch.allclose(field, torch.full((1, 8), 3 / 8, dtype=D), atol=1e-12)
    with torch.no_grad():
        s.se_fc2.bias.fill_(-1e4)
    assert torch.equal(s.scalar_field(scores, parts), torch.zeros(1, 8, dtype=D))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_scalar_field_nonnegative(seed):
    g = torch.Generator().manual_seed(seed)
    s = _stage(seed=seed % 5)
    field = s.scalar_field(torch.randn(1, 4, 8, 3, dtype=D, generator=g) * 10, torch.randn(1, 3, 4, dtype=D, generator=g))
    assert (field >= 0).all()


def test_refine_features_examples():
    s = _stage()
    att = torch.randn(1, 8, 4, dtype=D)
    assert torch.equal(s.refine_features(att, torch.zeros(1, 8, dtype=D)), s.refine(att))
    with torch.no_grad():
        s.refine.weight.copy_(torch.eye(4))
        s.refine.bias.zero_()
    out = s.refine_features(torch.zeros(1, 8, 4, dtype=D), torch.ones(1, 8, dtype=D))
    assert torch.allclose(out, torch.full((1, 8, 4), 0.1, dtype=D), atol=1e-15)


def test_refine_is_affine():
    s = _stage()
    a, b = torch.randn(1, 8, 4, dtype=D), torch.randn(1, 8, 4, dtype=D)
    f = torch.rand(1, 8, dtype=D)
    z = torch.zeros_like(a)
    lhs = s.refine_features(a + b, f)
    rhs = s.refine_features(a, f) + s.refine_features(b, f) - s.refine_features(z, f)
    assert torch.allclose(lhs, rhs, atol=1e-12)


def test_damping_is_not_trainable():
    s = _stage()
    assert "damping" not in dict(s.named_parameters())
    assert s.damping.item() == pytest.approx(0.1)


def test_fuse_fields_examples():
    f = torch.rand(1, 3, 3, dtype=D) + 0.1
    assert torch.allclose(fuse_scalar_fields([f], torch.ones(1, dtype=D), (3, 3)), f / f.sum())
    u = torch.ones(1, 2, 2, dtype=D)
    out = fuse_scalar_fields([u, u], torch.ones(2, dtype=D), (2, 2))
    assert torch.allclose(out, torch.full((1, 2, 2), 0.25, dtype=D))
    g = torch.tensor([2.0, 0.0], dtype=D)
    a = fuse_scalar_fields([f, torch.rand(1, 3, 3, dtype=D)], g, (3, 3))
    b = fuse_scalar_fields([f, torch.rand(1, 3, 3, dtype=D) * 100], g, (3, 3))
    assert torch.equal(a, b)


def test_fuse_fields_degenerate_mass():
    f = torch.rand(1, 2, 2, dtype=D)
    with pytest.warns(DegenerateMapWarning):
        out = fuse_scalar_fields([f], torch.tensor([-1.0], dtype=D), (2, 2))
    assert torch.allclose(out, torch.full((1, 2, 2), 0.25, dtype=D))
    with pytest.raises(ValueError):
        fuse_scalar_fields([f], torch.ones(2, dtype=D), (2, 2))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_fused_priority_unit_mass(seed, stages):
    g = torch.Generator().manual_seed(seed)
    fields = [torch.rand(2, 2 * (stages - s) + 1, 2 * (stages - s) + 1, dtype=D, generator=g) for s in range(stages)]
    gamma = torch.randn(stages, dtype=D, generator=g).abs() + 0.01
    out = fuse_scalar_fields(fields, gamma, (3, 3))
    assert out.shape == (2, 3, 3)
    assert (out >= 0).all()
    assert torch.allclose(out.sum((-2, -1)), torch.ones(2, dtype=D), atol=1e-6)


def test_fuse_logits_examples():
    head = torch.nn.Linear(5, 2).double()
    r1, r2 = torch.randn(1, 4, 2, dtype=D), torch.randn(1, 1, 3, dtype=D)
    spatial = [(2, 2), (1, 1)]
    concat = gelu(torch.cat([r1, resample_tokens(r2, (1, 1), (2, 2))], -1))
    one_hot = torch.zeros(1, 2, 2, dtype=D)
    one_hot[0, 1, 0] = 1.0
    assert torch.allclose(fuse_logits([r1, r2], spatial, one_hot, head), head(concat[:, 2]))
    uniform = torch.full((1, 2, 2), 0.25, dtype=D)
    assert torch.allclose(fuse_logits([r1, r2], spatial, uniform, head), head(concat.mean(1)))
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()
    assert torch.equal(fuse_logits([r1, r2], spatial, uniform, head), torch.zeros(1, 2, dtype=D))
    with pytest.raises(ValueError):
        fuse_logits([r1], spatial[:1], uniform, head)


def _toy_mpsa(position_bias=True):
    cfg = BackboneConfig(channels=(4, 4), input_side=8, patch=2)
    shapes = cfg.stage_shapes()  # 4x4 then 2x2
    torch.manual_seed(0)
    m = Mpsa(cfg.channels, shapes, 3, MpsaConfig(parts=3, disable_position_bias=not position_bias)).double()
    return cfg, m


def test_mpsa_forward_contract():
    cfg, m = _toy_mpsa()
    net = reference_backbone(cfg).double()
    out = m(net(torch.rand(2, 3, 8, 8, dtype=D)))
    assert out.priority.shape == (2, 2, 2)
    assert torch.allclose(out.priority.sum((1, 2)), torch.ones(2, dtype=D), atol=1e-6)
    assert out.logits.shape == (2, 3)
    assert [f.shape for f in out.fields] == [(2, 4, 4), (2, 2, 2)]


def test_position_bias_switch():
    _, m = _toy_mpsa(position_bias=False)
    trainable = {n for n, p in m.named_parameters() if p.requires_grad}
    assert not any("spatial_bias" in n for n in trainable)
    assert all(torch.equal(b.spatial_bias, torch.zeros_like(b.spatial_bias)) for b in m.blocks)


def test_mpsa_gradient_check():
    # 2 stages, 8 tokens, 3 parts, 4 channels
    torch.manual_seed(1)
    m = Mpsa((4, 4), [(2, 4), (1, 2)], 2, MpsaConfig(parts=3)).double()
    with torch.no_grad():
        for p in m.parameters():
            p.add_(0.1 * torch.randn_like(p))
    g = torch.Generator().manual_seed(2)
    feats = [
        StageFeatures(torch.randn(1, 8, 4, dtype=D, generator=g), (2, 4), 0),
        StageFeatures(torch.randn(1, 2, 4, dtype=D, generator=g), (1, 2), 1),
    ]
    w = torch.randn(2, dtype=D, generator=g)
    wp = torch.randn(1, 2, dtype=D, generator=g)

    def loss():
        out = m(feats)
        return (out.logits[0] * w).sum() + (out.priority.reshape(1, -1) * wp).sum()

    report = module_gradient_check(m, loss)
    assert set(report) == {n for n, _ in m.named_parameters()}
    bad = {k: v for k, v in report.items() if v >= 1e-3}
    assert not bad, bad


def test_parts_per_stage_config():
    assert MpsaConfig(parts=(2, 3)).parts_for(2) == [2, 3]
    with pytest.raises(ValueError):
        MpsaConfig(parts=(2, 3)).parts_for(3)


def test_resample_identity():
    t = torch.randn(1, 6, 2, dtype=D)
    assert resample_tokens(t, (2, 3), (2, 3)) is t
    assert resample_tokens(t, (2, 3), (4, 6)).shape == (1, 24, 2)


def test_no_degenerate_warning_in_normal_use():
    cfg, m = _toy_mpsa()
    with warnings.catch_warnings():
        warnings.simplefilter("error", DegenerateMapWarning)
        m(reference_backbone(cfg).double()(torch.rand(1, 3, 8, 8, dtype=D)))
    assert math.isfinite(m.gamma.sum().item())
