"""Stage-I branch training, stage-II weighted distillation, fusion baselines."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
from torch import nn

from ..dataset.mining import SamplePair, mine_positives
from ..errors import ConfigError, TrainingError
from ..evalcli.retrieval import evaluate
from ..inputs import VPRData, extract_descriptors
from ..model import BackboneConfig, ConcatFeatNet, DescriptorNet, save_checkpoint
from .losses import kd_loss, triplet_loss

log = logging.getLogger(__name__)

BASELINE_MODES = ("concat_input", "concat_feat")


@dataclass
class StageConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int = 16  # triplets per step
    negatives: int = 1  # hard negatives per (query, positive)
    neg_pool: int = 64
    margin: float = 0.1
    schedule: str = "cosine"
    seed: int = 0
    select_metric: int = 5  # keep the epoch with the best val Recall@N
    positive_mining: str = "fov_best"
    # stage II only: "random" or "rgb" (continue from the stage-I rgb branch)
    init: str = "random"
    transform_bias: bool = True
    kd_renormalize: bool = False
    eval_batch: int = 128

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1 or self.negatives < 1 or self.neg_pool < self.negatives:
            raise ConfigError("need batch_size >= 1 and neg_pool >= negatives >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")
        if self.init not in ("random", "rgb"):
            raise ConfigError(f"stage-II init must be 'random' or 'rgb', got {self.init!r}")

    @classmethod
    def from_dict(cls, doc: Mapping) -> "StageConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown stage config field(s): {sorted(unknown)}")
        return cls(**doc)


@dataclass
class TrainResult:
    model: nn.Module
    steps: list[dict]
    epochs: list[dict]
    best_epoch: int
    config: StageConfig
    info: dict = field(default_factory=dict)

    @property
    def losses(self) -> list[float]:
        return [s["loss"] for s in self.steps]

    def save(self, run_dir: str | Path, name: str = "model.ckpt") -> Path:
        """Config snapshot, metrics CSV and best checkpoint under ``run_dir``."""
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        snapshot = {"config": asdict(self.config), "best_epoch": self.best_epoch, **self.info}
        (run_dir / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
        val = {e["last_step"]: e for e in self.epochs}
        with open(run_dir / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "epoch", "lr", "loss", "vpr", "kd", "val_recall"])
            for s in self.steps:
                e = val.get(s["step"])
                w.writerow(
                    [s["step"], s["epoch"], f"{s['lr']:.6g}", f"{s['loss']:.8f}", f"{s['vpr']:.8f}", f"{s['kd']:.8f}",
                     "" if e is None else f"{e['val_recall']:.6f}"]
                )
        path = run_dir / name
        save_checkpoint(self.model, path, {"best_epoch": self.best_epoch, "seed": self.config.seed})
        return path


class TeacherCache:
    """Frozen teacher descriptors for every record, computed on first use."""

    def __init__(self, teacher: nn.Module, data: VPRData):
        self.teacher = teacher
        self.data = data
        self.forward_calls = 0
        self._desc: torch.Tensor | None = None
        for p in teacher.parameters():
            p.requires_grad_(False)

    @property
    def dim(self) -> int:
        return self.teacher.dim

    def descriptors(self) -> torch.Tensor:
        if self._desc is None:
            self.forward_calls += 1
            self._desc = torch.from_numpy(extract_descriptors(self.teacher, self.data))
        return self._desc


def _lr_factor(schedule: str, step: int, total: int) -> float:
    if schedule == "constant" or total <= 1:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * step / total))


def _hard_negatives(
    q_desc: np.ndarray,
    db_desc: np.ndarray,
    valid: np.ndarray,
    k: int,
    pool: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Per query, the ``k`` nearest valid references within a random pool.

    Same selection rule as :func:`~vprdistill.dataset.mining.sample_negatives`;
    the database rows are id-sorted so stable sorting breaks ties by id.
    Queries with fewer than ``k`` candidates repeat their last negative.
    """
    out = np.empty((len(q_desc), k), dtype=np.int64)
    for i, q in enumerate(q_desc):
        cand = np.flatnonzero(valid[i])
        if len(cand) == 0:
            raise TrainingError("a training query has no valid negative")
        if len(cand) > pool:
            cand = cand[np.sort(rng.choice(len(cand), size=pool, replace=False))]
        dist = np.linalg.norm(db_desc[cand] - q, axis=1)
        picked = cand[np.argsort(dist, kind="stable")[:k]]
        out[i] = np.pad(picked, (0, k - len(picked)), mode="edge")
    return out


def fit(
    model: nn.Module,
    train: VPRData,
    val: VPRData,
    cfg: StageConfig,
    teacher: TeacherCache | None = None,
    weights: Mapping[SamplePair, float] | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Triplet training with optional weighted feature mimicking.

    Per epoch: refresh hard negatives with the current model, shuffle the
    (query, positive) pairs, take optimizer steps over batches, then
    evaluate Recall@N on ``val`` and keep the best epoch's parameters.
    """
    if val is None or not val.query_ids or not val.db_ids:
        raise ConfigError("validation split is empty")
    rng = np.random.default_rng(cfg.seed)
    pairs = mine_positives(train.records, train.gt_config, cfg.positive_mining, gt=train.gt)
    if not pairs:
        raise TrainingError("no training query has a ground-truth positive")
    q_rows = np.array(train.rows([p.query_id for p in pairs]))
    p_rows = np.array(train.rows([p.positive_id for p in pairs]))
    db_rows = np.array(train.rows(train.db_ids))
    db_pos = {rid: j for j, rid in enumerate(train.db_ids)}
    valid = np.ones((len(pairs), len(db_rows)), dtype=bool)
    for i, p in enumerate(pairs):
        for rid in train.gt[p.query_id]:
            valid[i, db_pos[rid]] = False

    phi = None
    if teacher is not None:
        if model.transform is None:
            raise ConfigError("distillation needs a model with a transformation T")
        if model.transform.out_features != teacher.dim:
            raise ConfigError(f"T maps to {model.transform.out_features} dims, teacher has {teacher.dim}")
        weights = weights or {}
        missing = [p for p in pairs if p not in weights]
        if missing:
            raise TrainingError(f"no distillation weight for pair {missing[0]}")
        phi = torch.tensor([weights[p] for p in pairs], dtype=next(model.parameters()).dtype)
        teacher_desc = teacher.descriptors()

    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(pairs) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    dtype = next(model.parameters()).dtype
    k = cfg.negatives

    steps, epochs = [], []
    best_score, best_state, best_epoch = -1.0, None, 0
    step = 0
    for epoch in range(cfg.epochs):
        desc = extract_descriptors(model, train, batch_size=cfg.eval_batch)
        negs = db_rows[_hard_negatives(desc[q_rows], desc[db_rows], valid, k, cfg.neg_pool, rng)]
        order = rng.permutation(len(pairs))
        model.train()
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            b = len(idx)
            rows = np.concatenate([q_rows[idx], p_rows[idx], negs[idx].reshape(-1)])
            batch = {m: v.to(dtype) for m, v in train.batch(rows, model.inputs).items()}
            out = model(batch)
            x_q, x_p, x_n = out[:b], out[b : 2 * b], out[2 * b :].reshape(b, k, -1)
            vpr = triplet_loss(x_q[:, None].expand_as(x_n), x_p[:, None].expand_as(x_n), x_n, cfg.margin).mean(1)
            loss = vpr
            kd = torch.zeros_like(vpr)
            if teacher is not None:
                t_out = teacher_desc[torch.as_tensor(rows)].to(dtype)
                w = phi[idx]
                kd_all = kd_loss(t_out, out, model.transform, torch.cat([w, w, w.repeat_interleave(k)]),
                                 cfg.kd_renormalize)
                kd = kd_all[:b] + kd_all[b : 2 * b] + kd_all[2 * b :].reshape(b, k).mean(1)
                loss = vpr + kd
            loss = loss.mean()
            factor = _lr_factor(cfg.schedule, step, total)
            for g in opt.param_groups:
                g["lr"] = cfg.lr * factor
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            rec = {
                "step": step,
                "epoch": epoch,
                "lr": cfg.lr * factor,
                "loss": float(loss.detach()),
                "vpr": float(vpr.detach().mean()),
                "kd": float(kd.detach().mean()),
            }
            steps.append(rec)
            if on_step is not None:
                on_step(rec)
            step += 1
        report = evaluate(model, val, (1, cfg.select_metric, 10), batch_size=cfg.eval_batch)
        score = report.recalls[cfg.select_metric]
        ep = {
            "epoch": epoch,
            "last_step": step - 1,
            "mean_loss": float(np.mean([s["loss"] for s in steps[-steps_per_epoch:]])),
            "val_recall": score,
            "val": report.to_dict()["recall"],
        }
        epochs.append(ep)
        log.info("epoch %d loss %.4f val R@%d %.3f", epoch, ep["mean_loss"], cfg.select_metric, score)
        if score > best_score:
            best_score, best_epoch = score, epoch
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, steps, epochs, best_epoch, cfg)


def _seeded(seed: int, build: Callable[[], nn.Module]) -> nn.Module:
    torch.manual_seed(seed)
    return build()


def default_backbone(branch: str, data: VPRData, **kw) -> BackboneConfig:
    if branch == "rgb":
        return BackboneConfig.rgb_like(3, **kw)
    if branch == "seg":
        return BackboneConfig.seg_light(data.scheme.n_classes, **kw)
    raise ConfigError(f"unknown branch {branch!r}")


def train_stage1(
    branch: str,
    train: VPRData,
    val: VPRData,
    cfg: StageConfig,
    backbone: BackboneConfig | None = None,
    dtype: torch.dtype = torch.float32,
    on_step=None,
) -> TrainResult:
    """Train the rgb or seg branch with the triplet loss alone."""
    if branch not in ("rgb", "seg"):
        raise ConfigError(f"stage-I branch must be 'rgb' or 'seg', got {branch!r}")
    backbone = backbone or default_backbone(branch, train)
    model = _seeded(cfg.seed, lambda: DescriptorNet(backbone, (branch,), branch=branch)).to(dtype)
    result = fit(model, train, val, cfg, on_step=on_step)
    result.info = {"stage": "stage1", "branch": branch}
    return result


def train_stage2(
    train: VPRData,
    val: VPRData,
    teacher: nn.Module | TeacherCache,
    weights: Mapping[SamplePair, float],
    cfg: StageConfig,
    backbone: BackboneConfig | None = None,
    init_model: nn.Module | None = None,
    dtype: torch.dtype = torch.float32,
    on_step=None,
) -> TrainResult:
    """Train an RGB-only student with triplet loss plus weighted mimicking.

    ``weights`` maps each training pair to its distillation weight. The
    teacher is frozen and its descriptors are computed once up front.
    """
    cache = teacher if isinstance(teacher, TeacherCache) else TeacherCache(teacher, train)
    backbone = backbone or default_backbone("rgb", train)

    def build():
        net = DescriptorNet(backbone, ("rgb",), branch="student")
        # T is created after the backbone so the backbone init matches stage I
        net.transform = nn.Linear(net.dim, cache.dim, bias=cfg.transform_bias)
        return net

    model = _seeded(cfg.seed, build).to(dtype)
    if cfg.init == "rgb":
        if init_model is None:
            raise ConfigError("init='rgb' needs the stage-I rgb model")
        model.backbone.load_state_dict(init_model.backbone.state_dict())
    result = fit(model, train, val, cfg, teacher=cache, weights=weights, on_step=on_step)
    result.info = {"stage": "stage2", "teacher_forward_calls": cache.forward_calls}
    return result


def train_baseline(
    mode: str,
    train: VPRData,
    val: VPRData,
    cfg: StageConfig,
    dtype: torch.dtype = torch.float32,
    on_step=None,
) -> TrainResult:
    """Fusion baselines that need segmentation at test time too."""
    c = train.scheme.n_classes
    if mode == "concat_input":
        build = lambda: DescriptorNet(BackboneConfig.rgb_like(3 + c), ("rgb", "seg"), branch="concat_input")
    elif mode == "concat_feat":
        build = lambda: ConcatFeatNet(BackboneConfig.rgb_like(3), BackboneConfig.seg_light(c))
    else:
        raise ConfigError(f"baseline mode must be one of {BASELINE_MODES}, got {mode!r}")
    model = _seeded(cfg.seed, build).to(dtype)
    result = fit(model, train, val, cfg, on_step=on_step)
    result.info = {"stage": "baseline", "mode": mode}
    return result
