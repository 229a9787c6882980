"""Segmentation label map encoding.

A raw class-index label map is turned into the seg-branch input in three
steps: raw classes are clustered into ``C`` coarse classes, the clustered map
is expanded into a ``C x H x W`` one-hot tensor, and the positive entries of
each channel carry a per-class prior weight instead of 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import DecodeError, EncodeError, SchemaError

# Fixed channel order of the default 6-class scheme.
DEFAULT_CLASSES = ("vegetation", "dynamic", "sky", "ground", "building", "other")
DEFAULT_WEIGHTS = (0.5, 0.5, 1.0, 1.0, 2.0, 2.0)
# Ablation preset: static/other down-weighted, dynamic/vegetation up-weighted.
OPPOSITE_WEIGHTS = (2.0, 2.0, 1.0, 1.0, 0.5, 0.5)

VEGETATION, DYNAMIC, SKY, GROUND, BUILDING, OTHER = range(6)


@dataclass(frozen=True)
class ClusterMap:
    """Total mapping from raw class indices to clustered indices in ``[0, C)``."""

    mapping: np.ndarray
    n_clusters: int

    def __post_init__(self):
        mapping = np.asarray(self.mapping, dtype=np.int64)
        if mapping.ndim != 1 or mapping.size == 0:
            raise SchemaError("cluster mapping must be a non-empty 1-D array")
        if self.n_clusters < 1:
            raise SchemaError(f"n_clusters must be >= 1, got {self.n_clusters}")
        bad = np.flatnonzero((mapping < 0) | (mapping >= self.n_clusters))
        if bad.size:
            i = int(bad[0])
            raise SchemaError(
                f"raw class {i} maps to {int(mapping[i])}, outside [0, {self.n_clusters})"
            )
        mapping.setflags(write=False)
        object.__setattr__(self, "mapping", mapping)

    @property
    def n_raw(self) -> int:
        return int(self.mapping.size)

    def __eq__(self, other):
        if not isinstance(other, ClusterMap):
            return NotImplemented
        return self.n_clusters == other.n_clusters and np.array_equal(self.mapping, other.mapping)

    __hash__ = None


@dataclass(frozen=True)
class ClassWeights:
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise SchemaError("class weights must be a non-empty 1-D array")
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise SchemaError(f"class weights must be finite and > 0, got {values.tolist()}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.values.size)

    def __eq__(self, other):
        if not isinstance(other, ClassWeights):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    __hash__ = None


@dataclass(frozen=True)
class SLMEScheme:
    """A cluster map, its class names and the per-class encoding weights."""

    names: tuple[str, ...]
    cluster_map: ClusterMap
    weights: ClassWeights

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        c = self.cluster_map.n_clusters
        if len(self.weights) != c:
            raise SchemaError(f"{len(self.weights)} weights given for {c} clustered classes")
        if len(self.names) != c:
            raise SchemaError(f"{len(self.names)} names given for {c} clustered classes")

    @property
    def n_classes(self) -> int:
        return self.cluster_map.n_clusters

    def to_dict(self) -> dict:
        return {
            "C": self.n_classes,
            "names": list(self.names),
            "mapping": self.cluster_map.mapping.tolist(),
            "weights": self.weights.values.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SLMEScheme":
        missing = {"C", "names", "mapping", "weights"} - set(doc)
        if missing:
            raise SchemaError(f"SLME scheme is missing field(s): {sorted(missing)}")
        try:
            cm = ClusterMap(np.asarray(doc["mapping"], dtype=np.int64), int(doc["C"]))
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"SLME scheme field 'mapping': {exc}") from exc
        try:
            weights = ClassWeights(np.asarray(doc["weights"], dtype=np.float64))
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"SLME scheme field 'weights': {exc}") from exc
        return cls(tuple(str(n) for n in doc["names"]), cm, weights)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SLMEScheme":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)

    def encode(self, labelmap: np.ndarray, size: tuple[int, int] | None = None) -> np.ndarray:
        """Full pipeline: optional nearest resize, clustering, weighted one-hot."""
        if size is not None:
            labelmap = resize_labelmap(labelmap, size)
        return encode(cluster_labels(labelmap, self.cluster_map), self.weights)


def default_scheme() -> SLMEScheme:
    """The 6-class scheme with weights (0.5, 0.5, 1, 1, 2, 2).

    Raw indices are assumed to already be the 6 clustered classes, so the
    cluster map is the identity over 6 entries.
    """
    return SLMEScheme(DEFAULT_CLASSES, ClusterMap(np.arange(6), 6), ClassWeights(DEFAULT_WEIGHTS))


def opposite_scheme() -> SLMEScheme:
    return SLMEScheme(DEFAULT_CLASSES, ClusterMap(np.arange(6), 6), ClassWeights(OPPOSITE_WEIGHTS))


def unweighted_scheme() -> SLMEScheme:
    return SLMEScheme(DEFAULT_CLASSES, ClusterMap(np.arange(6), 6), ClassWeights(np.ones(6)))


def three_class_scheme() -> SLMEScheme:
    """Coarser variant over the 6 default classes: sky&ground, dynamic, static."""
    mapping = np.empty(6, dtype=np.int64)
    mapping[[SKY, GROUND]] = 0
    mapping[DYNAMIC] = 1
    mapping[[VEGETATION, BUILDING, OTHER]] = 2
    return SLMEScheme(
        ("sky_ground", "dynamic", "static"), ClusterMap(mapping, 3), ClassWeights((1.0, 0.5, 2.0))
    )


def identity_scheme(n_classes: int = 150) -> SLMEScheme:
    """No clustering: every raw class keeps its own channel, unit weights."""
    names = tuple(f"class{i}" for i in range(n_classes))
    return SLMEScheme(names, ClusterMap(np.arange(n_classes), n_classes), ClassWeights(np.ones(n_classes)))


PRESETS = {
    "default": default_scheme,
    "opposite": opposite_scheme,
    "unweighted": unweighted_scheme,
    "three": three_class_scheme,
    "identity150": identity_scheme,
}


def get_scheme(spec: str | dict | SLMEScheme | None) -> SLMEScheme:
    """Resolve a preset name, a path to a scheme JSON, or an inline dict."""
    if spec is None:
        return default_scheme()
    if isinstance(spec, SLMEScheme):
        return spec
    if isinstance(spec, dict):
        if "preset" in spec:
            return get_scheme(spec["preset"])
        return SLMEScheme.from_dict(spec)
    if spec in PRESETS:
        return PRESETS[spec]()
    path = Path(spec)
    if path.suffix == ".json" or path.exists():
        return SLMEScheme.load(path)
    raise SchemaError(f"unknown SLME scheme {spec!r}; presets are {sorted(PRESETS)}")


def _first_bad_pixel(mask: np.ndarray) -> tuple[int, int]:
    i, j = np.argwhere(mask)[0]
    return int(i), int(j)


def cluster_labels(labelmap: np.ndarray, cm: ClusterMap) -> np.ndarray:
    labelmap = np.asarray(labelmap)
    if labelmap.ndim != 2:
        raise EncodeError(f"label map must be H x W, got shape {labelmap.shape}")
    bad = (labelmap < 0) | (labelmap >= cm.n_raw)
    if bad.any():
        i, j = _first_bad_pixel(bad)
        raise EncodeError(
            f"pixel ({i}, {j}) has raw class {int(labelmap[i, j])}, mapping covers 0..{cm.n_raw - 1}"
        )
    return cm.mapping[labelmap.astype(np.int64)]


def encode(labelmap: np.ndarray, weights: ClassWeights | Sequence[float], dtype=np.float32) -> np.ndarray:
    """Weighted one-hot: ``out[c, i, j] = w[c]`` where ``labelmap[i, j] == c``, else 0."""
    if not isinstance(weights, ClassWeights):
        weights = ClassWeights(weights)
    labelmap = np.asarray(labelmap)
    if labelmap.ndim != 2:
        raise EncodeError(f"label map must be H x W, got shape {labelmap.shape}")
    c = len(weights)
    bad = (labelmap < 0) | (labelmap >= c)
    if bad.any():
        i, j = _first_bad_pixel(bad)
        raise EncodeError(f"pixel ({i}, {j}) has class {int(labelmap[i, j])}, expected 0..{c - 1}")
    onehot = labelmap[None, :, :] == np.arange(c)[:, None, None]
    return (onehot * weights.values[:, None, None]).astype(dtype)


def decode_argmax(tensor: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode` for any positive weights."""
    tensor = np.asarray(tensor)
    if tensor.ndim != 3:
        raise DecodeError(f"expected C x H x W tensor, got shape {tensor.shape}")
    nonzero = tensor != 0
    count = nonzero.sum(axis=0)
    if (count == 0).any():
        i, j = _first_bad_pixel(count == 0)
        raise DecodeError(f"pixel ({i}, {j}) has no nonzero channel")
    if (count > 1).any():
        i, j = _first_bad_pixel(count > 1)
        raise DecodeError(f"pixel ({i}, {j}) has {int(count[i, j])} nonzero channels")
    return np.argmax(nonzero, axis=0)


def resize_labelmap(labelmap: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize to ``(H, W)``; never mixes classes."""
    labelmap = np.asarray(labelmap)
    h, w = size
    if labelmap.shape == (h, w):
        return labelmap
    if labelmap.max(initial=0) < 256 and labelmap.min(initial=0) >= 0:
        img = Image.fromarray(labelmap.astype(np.uint8), mode="L")
    else:
        img = Image.fromarray(labelmap.astype(np.int32), mode="I")
    return np.asarray(img.resize((w, h), Image.NEAREST)).astype(labelmap.dtype)
