import csv
import json

import numpy as np
import pytest
import torch

from gradcheck import relative_gradient_error, tiny_setup
from vprdistill.dataset import mine_positives
from vprdistill.errors import ConfigError, TrainingError
from vprdistill.model import BackboneConfig, DescriptorNet, load_checkpoint
from vprdistill.training import (
    StageConfig,
    TeacherCache,
    WeightScheme,
    train_baseline,
    train_stage1,
    train_stage2,
    weight_table,
)

SMALL = dict(epochs=2, batch_size=4, neg_pool=8, eval_batch=16)


def _pairs(data):
    return mine_positives(data.records, data.gt_config, gt=data.gt)


@pytest.mark.parametrize("which", ["triplet", "kd", "total"])
def test_gradients_match_finite_differences(which):
    student, imgs, teacher, phi = tiny_setup(0, "tanh")
    assert relative_gradient_error(which, student, imgs, teacher, phi) < 1e-4


def test_stage1_deterministic_and_logs(tiny_data, tmp_path):
    cfg = StageConfig(seed=4, **SMALL)
    a = train_stage1("rgb", tiny_data["train"], tiny_data["val"], cfg)
    b = train_stage1("rgb", tiny_data["train"], tiny_data["val"], cfg)
    assert np.allclose(a.losses, b.losses, rtol=0, atol=1e-6)
    assert len(a.epochs) == 2
    path = a.save(tmp_path / "run")
    snap = json.loads((tmp_path / "run" / "config.json").read_text())
    assert snap["config"]["seed"] == 4 and snap["branch"] == "rgb" and snap["stage"] == "stage1"
    rows = list(csv.DictReader(open(tmp_path / "run" / "metrics.csv")))
    assert len(rows) == len(a.steps)
    assert sum(1 for r in rows if r["val_recall"]) == 2
    back = load_checkpoint(path)
    x = {"rgb": tiny_data["val"].tensor("rgb")[:2]}
    assert torch.allclose(back(x), a.model(x), atol=1e-6)


def test_zero_lr_leaves_parameters(tiny_data):
    cfg = StageConfig(lr=0.0, seed=1, **SMALL)
    torch.manual_seed(1)
    fresh = DescriptorNet(BackboneConfig.seg_light(), ("seg",), branch="seg")
    res = train_stage1("seg", tiny_data["train"], tiny_data["val"], cfg)
    for a, b in zip(fresh.state_dict().values(), res.model.state_dict().values()):
        assert torch.equal(a, b)


def test_stage1_reduces_loss(tiny_data):
    # median over three seeds of (first-epoch mean loss - last-epoch mean loss)
    gains = []
    for seed in range(3):
        res = train_stage1("rgb", tiny_data["train"], tiny_data["val"], StageConfig(seed=seed, epochs=4, lr=3e-3,
                                                                                   batch_size=4, neg_pool=8))
        gains.append(res.epochs[0]["mean_loss"] - res.epochs[-1]["mean_loss"])
    assert np.median(gains) > 0


def test_empty_validation_is_config_error(tiny_data):
    from vprdistill.inputs import VPRData

    db_only = VPRData([r for r in tiny_data["val"].records if not r.is_query], (32, 32))
    with pytest.raises(ConfigError):
        train_stage1("rgb", tiny_data["train"], db_only, StageConfig(**SMALL))
    with pytest.raises(ConfigError):
        train_stage1("depth", tiny_data["train"], tiny_data["val"], StageConfig(**SMALL))


def test_stage2_none_reproduces_stage1(tiny_data):
    cfg = StageConfig(seed=7, **SMALL)
    s1 = train_stage1("rgb", tiny_data["train"], tiny_data["val"], cfg)
    teacher = DescriptorNet(BackboneConfig.seg_light(), ("seg",), branch="seg")
    w = {p: 0.0 for p in _pairs(tiny_data["train"])}
    s2 = train_stage2(tiny_data["train"], tiny_data["val"], teacher, w, cfg)
    assert np.allclose(s1.losses, s2.losses, rtol=0, atol=1e-6)
    assert all(s["kd"] == 0.0 for s in s2.steps)


def test_teacher_cached_and_untouched(tiny_data):
    teacher = DescriptorNet(BackboneConfig.seg_light(), ("seg",), branch="seg")
    before = {k: v.clone() for k, v in teacher.state_dict().items()}
    cache = TeacherCache(teacher, tiny_data["train"])
    w = {p: 1.0 for p in _pairs(tiny_data["train"])}
    res = train_stage2(tiny_data["train"], tiny_data["val"], cache, w, StageConfig(**{**SMALL, "epochs": 3}))
    assert cache.forward_calls == 1
    assert res.info["teacher_forward_calls"] == 1
    for k, v in teacher.state_dict().items():
        assert torch.equal(v, before[k])
    assert any(s["kd"] > 0 for s in res.steps)


def test_stage2_errors(tiny_data):
    teacher = DescriptorNet(BackboneConfig.seg_light(), ("seg",), branch="seg")
    pairs = _pairs(tiny_data["train"])
    with pytest.raises(TrainingError, match="no distillation weight"):
        train_stage2(tiny_data["train"], tiny_data["val"], teacher, {pairs[0]: 1.0}, StageConfig(**SMALL))
    with pytest.raises(ConfigError):
        train_stage2(tiny_data["train"], tiny_data["val"], teacher, {p: 1.0 for p in pairs},
                     StageConfig(init="rgb", **SMALL))


def test_stage2_rgb_init_copies_backbone(tiny_data):
    cfg = StageConfig(lr=0.0, init="rgb", **SMALL)
    rgb = DescriptorNet(BackboneConfig.rgb_like())
    teacher = DescriptorNet(BackboneConfig.seg_light(), ("seg",), branch="seg")
    res = train_stage2(tiny_data["train"], tiny_data["val"], teacher, {p: 1.0 for p in _pairs(tiny_data["train"])},
                       cfg, init_model=rgb)
    for a, b in zip(rgb.backbone.state_dict().values(), res.model.backbone.state_dict().values()):
        assert torch.equal(a, b)


def test_weight_table_checks_thresholds(tiny_data):
    from vprdistill.partition import PartitionConfig, RecallRanking, partition

    pairs = _pairs(tiny_data["train"])
    table = partition(RecallRanking({p: 1 for p in pairs}, "seg"), RecallRanking({p: 2 for p in pairs}, "rgb"))
    assert set(weight_table(table, WeightScheme("eq4")).values()) == {1 + 1 / (5 * np.log(2))}
    with pytest.raises(ConfigError):
        weight_table(table, WeightScheme("eq4", partition=PartitionConfig(5, 20)))


@pytest.mark.parametrize("mode,dim", [("concat_input", 448), ("concat_feat", 928)])
def test_baselines(tiny_data, mode, dim):
    res = train_baseline(mode, tiny_data["train"], tiny_data["val"], StageConfig(**{**SMALL, "epochs": 1}))
    assert res.model.dim == dim
    assert set(res.model.inputs) == {"rgb", "seg"}
    with pytest.raises(ConfigError):
        train_baseline("late", tiny_data["train"], tiny_data["val"], StageConfig(**SMALL))


def test_stage_config_validation():
    for bad in ({"epochs": 0}, {"schedule": "step"}, {"init": "seg"}, {"neg_pool": 0}):
        with pytest.raises(ConfigError):
            StageConfig(**bad)
    with pytest.raises(ConfigError):
        StageConfig.from_dict({"lrate": 1})
