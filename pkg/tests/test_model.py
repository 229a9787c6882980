import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vprdistill.errors import FormatError, LoadError, ModelError
from vprdistill.model import (
    Backbone,
    BackboneConfig,
    ConcatFeatNet,
    DescriptorNet,
    descriptor_dim,
    gmp,
    load_checkpoint,
    mc_aggregate,
    model_digest,
    read_checkpoint_header,
    save_checkpoint,
    transform,
)


def _pyramid(seed, batch=2, widths=(4, 5, 6, 7, 8), size=16):
    g = torch.Generator().manual_seed(seed)
    out, s = [], size
    for w in widths:
        s = max(1, s // 2)
        out.append(torch.rand(batch, w, s, s, generator=g, dtype=torch.float64) + 0.01)
    return out


def test_default_dims():
    assert descriptor_dim(BackboneConfig.rgb_like()) == 448
    assert descriptor_dim(BackboneConfig.seg_light()) == 480
    net = ConcatFeatNet(BackboneConfig.rgb_like(), BackboneConfig.seg_light())
    assert net.dim == 928
    assert DescriptorNet(BackboneConfig.rgb_like(9), ("rgb", "seg")).backbone.cfg.input_channels == 9


def test_backbone_pyramid_shapes():
    bb = Backbone(BackboneConfig.rgb_like())
    pyr = bb(torch.zeros(1, 3, 64, 64))
    assert [p.shape[1] for p in pyr] == [16, 24, 32, 96, 320]
    assert [p.shape[-1] for p in pyr] == [32, 16, 8, 4, 2]
    with pytest.raises(ModelError):
        bb(torch.zeros(1, 4, 64, 64))


def test_zero_input_zero_bias_gives_zero_pyramid():
    bb = Backbone(BackboneConfig.rgb_like(extra_blocks=1))
    for m in bb.modules():
        if isinstance(m, torch.nn.Conv2d):
            torch.nn.init.zeros_(m.bias)
    assert all(float(p.abs().max()) == 0.0 for p in bb(torch.zeros(2, 3, 32, 32)))


def test_gmp_is_channel_max():
    x = torch.zeros(1, 2, 3, 3)
    x[0, 0, 1, 2] = 5.0
    x[0, 1, 0, 0] = -1.0
    x[0, 1, 2, 2] = 0.5
    assert gmp(x).tolist() == [[5.0, 0.5]]


def test_levels_validated():
    with pytest.raises(ModelError):
        mc_aggregate(_pyramid(0), levels=(4, 6))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.floats(1e-3, 1e3), min_size=3, max_size=3))
def test_unit_norm_and_per_level_scale_invariance(seed, scales):
    pyr = _pyramid(seed)
    d = mc_aggregate(pyr)
    assert torch.allclose(d.norm(dim=-1), torch.ones(2, dtype=torch.float64), atol=1e-6)
    scaled = list(pyr)
    for lvl, c in zip((3, 4, 5), scales):
        scaled[lvl - 1] = pyr[lvl - 1] * c
    assert torch.allclose(mc_aggregate(scaled), d, atol=1e-6)


def test_concat_feat_unit_norm_and_needs_seg():
    net = ConcatFeatNet(BackboneConfig.rgb_like(), BackboneConfig.seg_light())
    out = net({"rgb": torch.randn(2, 3, 32, 32), "seg": torch.rand(2, 6, 32, 32)})
    assert out.shape == (2, 928)
    assert torch.allclose(out.norm(dim=-1), torch.ones(2), atol=1e-6)
    with pytest.raises(ModelError, match="seg"):
        net({"rgb": torch.randn(1, 3, 32, 32)})


def test_transform_checks_dim_and_does_not_renormalize():
    net = DescriptorNet(BackboneConfig.rgb_like(), transform_dim=480)
    x = net({"rgb": torch.randn(2, 3, 32, 32)})
    y = transform(net.transform, x)
    assert y.shape == (2, 480)
    assert not torch.allclose(y.norm(dim=-1), torch.ones(2))
    with pytest.raises(ModelError):
        transform(net.transform, torch.zeros(1, 10))


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    nets = [
        DescriptorNet(BackboneConfig.seg_light(), ("seg",), branch="seg"),
        DescriptorNet(BackboneConfig.rgb_like(activation="elu"), transform_dim=480, transform_bias=False),
        ConcatFeatNet(BackboneConfig.rgb_like(), BackboneConfig.seg_light()),
    ]
    for i, net in enumerate(nets):
        path = tmp_path / f"m{i}.ckpt"
        digest = save_checkpoint(net, path, {"note": i})
        back = load_checkpoint(path)
        assert back.config() == net.config()
        assert back.checkpoint_digest == digest
        assert back.checkpoint_meta == {"note": i}
        for (k, a), (_, b) in zip(net.state_dict().items(), back.state_dict().items()):
            assert torch.equal(a, b), k
        assert model_digest(back) == digest


def test_checkpoint_errors(tmp_path):
    net = DescriptorNet(BackboneConfig.rgb_like())
    path = tmp_path / "m.ckpt"
    save_checkpoint(net, path)
    with pytest.raises(ModelError):
        load_checkpoint(path, expected=BackboneConfig.seg_light())
    header, _ = read_checkpoint_header(path)
    assert header["format_version"] == 1
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    with pytest.raises(FormatError):
        load_checkpoint(bad)
    with pytest.raises(LoadError):
        load_checkpoint(tmp_path / "missing.ckpt")
    data = bytearray(path.read_bytes())
    text = data.decode("latin-1").replace('"format_version": 1', '"format_version": 9')
    (tmp_path / "v9.ckpt").write_bytes(text.encode("latin-1"))
    with pytest.raises(LoadError, match="version"):
        load_checkpoint(tmp_path / "v9.ckpt")


def test_config_validation():
    with pytest.raises(ModelError):
        BackboneConfig(3, (1, 2, 3))
    with pytest.raises(ModelError):
        BackboneConfig(3, activation="swish")
    cfg = BackboneConfig.seg_light(extra_blocks=2)
    assert BackboneConfig.from_dict(cfg.to_dict()) == cfg
