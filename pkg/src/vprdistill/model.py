"""Toy 5-stage backbones, multi-level concatenation and checkpoints."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import FormatError, LoadError, ModelError

RGB_WIDTHS = (16, 24, 32, 96, 320)
SEG_WIDTHS = (8, 16, 24, 96, 360)
DEFAULT_LEVELS = (3, 4, 5)
NORM_EPS = 1e-12

CKPT_MAGIC = b"VPRCKPT\x00"
CKPT_VERSION = 1


@dataclass(frozen=True)
class BackboneConfig:
    input_channels: int
    stage_channels: tuple[int, ...] = RGB_WIDTHS
    stage_strides: tuple[int, ...] = (2, 2, 2, 2, 2)
    preset: str = "rgb_like"
    # extra stride-1 conv blocks after the strided conv of each stage
    extra_blocks: int = 0
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "stage_strides", tuple(int(s) for s in self.stage_strides))
        if len(self.stage_channels) != 5 or len(self.stage_strides) != 5:
            raise ModelError("a backbone has exactly 5 stages")
        if self.input_channels < 1 or min(self.stage_channels) < 1 or min(self.stage_strides) < 1:
            raise ModelError(f"invalid backbone config {self}")
        if self.activation not in _ACTIVATIONS:
            raise ModelError(f"unknown activation {self.activation!r}")

    @classmethod
    def rgb_like(cls, input_channels: int = 3, **kw) -> "BackboneConfig":
        return cls(input_channels, RGB_WIDTHS, preset="rgb_like", **kw)

    @classmethod
    def seg_light(cls, input_channels: int = 6, **kw) -> "BackboneConfig":
        return cls(input_channels, SEG_WIDTHS, preset="seg_light", **kw)

    @classmethod
    def from_dict(cls, doc: dict) -> "BackboneConfig":
        return cls(**doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["stage_strides"] = list(self.stage_strides)
        return d


_ACTIVATIONS = {"relu": nn.ReLU, "elu": nn.ELU, "tanh": nn.Tanh}


class Backbone(nn.Module):
    """Five stages of strided 3x3 conv + nonlinearity; returns every stage output."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        act = _ACTIVATIONS[cfg.activation]
        stages = []
        c_in = cfg.input_channels
        for width, stride in zip(cfg.stage_channels, cfg.stage_strides):
            layers = [nn.Conv2d(c_in, width, 3, stride, 1), act()]
            for _ in range(cfg.extra_blocks):
                layers += [nn.Conv2d(width, width, 3, 1, 1), act()]
            stages.append(nn.Sequential(*layers))
            c_in = width
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.ndim != 4 or x.shape[1] != self.cfg.input_channels:
            raise ModelError(
                f"backbone expects (B, {self.cfg.input_channels}, H, W) input, got {tuple(x.shape)}"
            )
        pyramid = []
        for stage in self.stages:
            x = stage(x)
            pyramid.append(x)
        return pyramid


def l2norm(v: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    return v / v.norm(dim=-1, keepdim=True).clamp_min(eps)


def gmp(feature_map: torch.Tensor) -> torch.Tensor:
    """Global max pooling over the spatial dims, per channel."""
    return feature_map.amax(dim=(-2, -1))


def mc_aggregate(pyramid: Sequence[torch.Tensor], levels: Sequence[int] = DEFAULT_LEVELS) -> torch.Tensor:
    """Per-level L2-normalised GMP vectors, concatenated and normalised again.

    ``levels`` are 1-based stage numbers. Output has shape ``(B, sum of widths)``.
    """
    if not levels or min(levels) < 1 or max(levels) > len(pyramid):
        raise ModelError(f"levels {tuple(levels)} not available in a {len(pyramid)}-level pyramid")
    parts = [l2norm(gmp(pyramid[i - 1])) for i in levels]
    return l2norm(torch.cat(parts, dim=-1))


def descriptor_dim(cfg: BackboneConfig, levels: Sequence[int] = DEFAULT_LEVELS) -> int:
    return sum(cfg.stage_channels[i - 1] for i in levels)


class Transformation(nn.Linear):
    """Affine map from student descriptor space into teacher descriptor space."""

    def __init__(self, student_dim: int, teacher_dim: int, bias: bool = True):
        super().__init__(student_dim, teacher_dim, bias=bias)


def transform(t: nn.Linear, x: torch.Tensor) -> torch.Tensor:
    """Apply ``t`` without re-normalising the result."""
    if x.shape[-1] != t.in_features:
        raise ModelError(f"transformation expects dim {t.in_features}, got {x.shape[-1]}")
    return t(x)


# Descriptor networks -------------------------------------------------------


class DescriptorNet(nn.Module):
    """A backbone plus multi-level aggregation.

    ``inputs`` names the modalities the network consumes, concatenated along
    channels in that order: ``("rgb",)``, ``("seg",)`` or ``("rgb", "seg")``.
    """

    def __init__(
        self,
        cfg: BackboneConfig,
        inputs: Sequence[str] = ("rgb",),
        levels: Sequence[int] = DEFAULT_LEVELS,
        branch: str = "rgb",
        transform_dim: int | None = None,
        transform_bias: bool = True,
    ):
        super().__init__()
        self.backbone = Backbone(cfg)
        self.inputs = tuple(inputs)
        self.levels = tuple(levels)
        self.branch = branch
        self.dim = descriptor_dim(cfg, self.levels)
        self.transform = None
        if transform_dim is not None:
            self.transform = Transformation(self.dim, transform_dim, bias=transform_bias)

    def forward(self, batch: dict[str, torch.Tensor]) -> torch.Tensor:
        try:
            x = torch.cat([batch[k] for k in self.inputs], dim=1) if len(self.inputs) > 1 else batch[self.inputs[0]]
        except KeyError as exc:
            raise ModelError(f"{self.branch} network needs input {exc.args[0]!r}") from None
        return mc_aggregate(self.backbone(x), self.levels)

    def config(self) -> dict:
        return {
            "kind": "descriptor_net",
            "backbone": self.backbone.cfg.to_dict(),
            "inputs": list(self.inputs),
            "levels": list(self.levels),
            "branch": self.branch,
            "transform": None
            if self.transform is None
            else {"dim": self.transform.out_features, "bias": self.transform.bias is not None},
        }


class ConcatFeatNet(nn.Module):
    """Two independent branches whose descriptors are concatenated and normalised."""

    def __init__(self, rgb_cfg: BackboneConfig, seg_cfg: BackboneConfig, levels: Sequence[int] = DEFAULT_LEVELS):
        super().__init__()
        self.rgb = DescriptorNet(rgb_cfg, ("rgb",), levels, "rgb")
        self.seg = DescriptorNet(seg_cfg, ("seg",), levels, "seg")
        self.inputs = ("rgb", "seg")
        self.levels = tuple(levels)
        self.branch = "concat_feat"
        self.dim = self.rgb.dim + self.seg.dim
        self.transform = None

    def forward(self, batch: dict[str, torch.Tensor]) -> torch.Tensor:
        return l2norm(torch.cat([self.rgb(batch), self.seg(batch)], dim=-1))

    def config(self) -> dict:
        return {
            "kind": "concat_feat",
            "rgb": self.rgb.backbone.cfg.to_dict(),
            "seg": self.seg.backbone.cfg.to_dict(),
            "levels": list(self.levels),
        }


def build_model(config: dict) -> nn.Module:
    kind = config.get("kind")
    if kind == "descriptor_net":
        t = config.get("transform")
        return DescriptorNet(
            BackboneConfig.from_dict(config["backbone"]),
            config["inputs"],
            config["levels"],
            config["branch"],
            transform_dim=None if t is None else t["dim"],
            transform_bias=True if t is None else t["bias"],
        )
    if kind == "concat_feat":
        return ConcatFeatNet(
            BackboneConfig.from_dict(config["rgb"]), BackboneConfig.from_dict(config["seg"]), config["levels"]
        )
    raise ModelError(f"unknown model kind {kind!r}")


# Checkpoints ---------------------------------------------------------------


def save_checkpoint(model: nn.Module, path: str | Path, meta: dict | None = None) -> str:
    """Write ``model`` as header JSON + little-endian float32 tensors.

    Returns the sha256 digest of the written file.
    """
    state = model.state_dict()
    index, blobs, offset = [], [], 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
        blob = arr.tobytes(order="C")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": CKPT_VERSION,
        "model": model.config(),
        "tensors": index,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)
    return file_digest(path)


def read_checkpoint_header(path: str | Path) -> tuple[dict, int]:
    try:
        with open(path, "rb") as fh:
            magic = fh.read(len(CKPT_MAGIC))
            if magic != CKPT_MAGIC:
                raise FormatError(f"{path}: not a checkpoint file")
            (hlen,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(hlen).decode("utf-8"))
    except (OSError, struct.error) as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint header ({exc})") from exc
    return header, len(CKPT_MAGIC) + 8 + hlen


def load_checkpoint(
    path: str | Path,
    expected: BackboneConfig | dict | None = None,
    dtype: torch.dtype = torch.float32,
) -> nn.Module:
    """Rebuild the model stored at ``path``.

    ``expected`` optionally pins the backbone config (or full model config);
    a mismatch raises :class:`ModelError`.
    """
    header, body_start = read_checkpoint_header(path)
    version = header.get("format_version")
    if version != CKPT_VERSION:
        raise LoadError(f"{path}: checkpoint format version {version}, expected {CKPT_VERSION}")
    config = header["model"]
    if expected is not None:
        if isinstance(expected, BackboneConfig):
            stored = config.get("backbone")
            if stored is None or BackboneConfig.from_dict(stored) != expected:
                raise ModelError(f"{path}: stored backbone {stored} does not match expected {expected}")
        elif expected != config:
            raise ModelError(f"{path}: stored model config does not match expected config")
    model = build_model(config)
    raw = Path(path).read_bytes()[body_start:]
    state = {}
    for entry in header["tensors"]:
        chunk = raw[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise FormatError(f"{path}: truncated tensor {entry['name']}")
        arr = np.frombuffer(chunk, dtype="<f4").reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise ModelError(f"{path}: {exc}") from exc
    model.checkpoint_meta = header.get("meta", {})
    model.checkpoint_digest = file_digest(path)
    return model.to(dtype).eval()


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def model_digest(model: nn.Module) -> str:
    """Digest of parameters and config, for models not loaded from disk."""
    if getattr(model, "checkpoint_digest", None):
        return model.checkpoint_digest
    h = hashlib.sha256(json.dumps(model.config(), sort_keys=True).encode())
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().astype("<f4").tobytes())
    return h.hexdigest()
