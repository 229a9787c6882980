"""Lazy, cached image and label-map access for manifest records."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from ..errors import LoadError
from .records import PlaceRecord


def read_rgb(path: str | Path, size: tuple[int, int] | None = None) -> np.ndarray:
    """``H x W x 3`` uint8 image, bilinearly resized to ``(H, W)`` if given."""
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if size is not None and img.size != (size[1], size[0]):
                img = img.resize((size[1], size[0]), Image.BILINEAR)
            return np.asarray(img, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot read image {path}: {exc}") from exc


def read_labelmap(path: str | Path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Class-index map from an 8- or 16-bit single-channel image, nearest resize."""
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "P", "I", "I;16", "I;16B", "I;16L"):
                raise ValueError(f"label map must be single-channel, got mode {img.mode}")
            if size is not None and img.size != (size[1], size[0]):
                img = img.resize((size[1], size[0]), Image.NEAREST)
            return np.asarray(img).astype(np.int64)
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot read label map {path}: {exc}") from exc


def write_labelmap(labelmap: np.ndarray, path: str | Path) -> None:
    labelmap = np.asarray(labelmap)
    if labelmap.max(initial=0) < 256:
        Image.fromarray(labelmap.astype(np.uint8), mode="L").save(path, format="PNG")
    else:
        Image.fromarray(labelmap.astype(np.uint16)).save(path, format="PNG")


class ImageStore:
    """Reads RGB images and label maps on first access and keeps them.

    Nothing is opened at construction, so records whose files are never
    requested (e.g. segmentation maps during RGB-only evaluation) are never
    touched.
    """

    def __init__(self, records: Iterable[PlaceRecord], size: tuple[int, int] | None = None):
        self.records = {r.id: r for r in records}
        self.size = None if size is None else (int(size[0]), int(size[1]))
        self._rgb: dict[str, np.ndarray] = {}
        self._labels: dict[str, np.ndarray] = {}
        self.reads = {"rgb": 0, "seg": 0}

    def _record(self, rid: str) -> PlaceRecord:
        try:
            return self.records[rid]
        except KeyError:
            raise LoadError(f"unknown record id {rid!r}") from None

    def rgb(self, rid: str) -> np.ndarray:
        if rid not in self._rgb:
            rec = self._record(rid)
            try:
                self._rgb[rid] = read_rgb(rec.rgb_path, self.size)
            except LoadError as exc:
                raise LoadError(f"record {rid}: {exc}") from exc
            self.reads["rgb"] += 1
        return self._rgb[rid]

    def labels(self, rid: str) -> np.ndarray:
        if rid not in self._labels:
            rec = self._record(rid)
            if not rec.seg_path:
                raise LoadError(f"record {rid} has no segmentation label map")
            try:
                self._labels[rid] = read_labelmap(rec.seg_path, self.size)
            except LoadError as exc:
                raise LoadError(f"record {rid}: {exc}") from exc
            self.reads["seg"] += 1
        return self._labels[rid]
