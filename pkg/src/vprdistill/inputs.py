"""Network inputs for a set of records and batched descriptor extraction."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .dataset.groundtruth import GroundTruthConfig, ground_truth_sets
from .dataset.images import ImageStore
from .dataset.records import PlaceRecord, split_records
from .errors import ConfigError, LoadError
from .slme import SLMEScheme, default_scheme

RGB_MEAN = 0.5
RGB_STD = 0.25


class VPRData:
    """Records of one manifest together with their network inputs.

    Inputs are built lazily per modality: RGB images are scaled and
    normalised, label maps are resized (nearest) and SLME-encoded. A
    modality is only read from disk when a model asks for it.
    """

    def __init__(
        self,
        records: Iterable[PlaceRecord],
        image_size: tuple[int, int] = (64, 64),
        scheme: SLMEScheme | None = None,
        gt_config: GroundTruthConfig | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        self.records = sorted(records, key=lambda r: r.id)
        if len({r.id for r in self.records}) != len(self.records):
            raise ConfigError("duplicate record ids")
        self.ids = [r.id for r in self.records]
        self.index = {rid: i for i, rid in enumerate(self.ids)}
        self.image_size = (int(image_size[0]), int(image_size[1]))
        self.scheme = scheme or default_scheme()
        self.gt_config = gt_config or GroundTruthConfig()
        self.dtype = dtype
        self.store = ImageStore(self.records, self.image_size)
        self.database, self.queries = split_records(self.records)
        self._cache: dict[str, torch.Tensor] = {}
        self._gt = None

    @property
    def db_ids(self) -> list[str]:
        return [r.id for r in self.database]

    @property
    def query_ids(self) -> list[str]:
        return [r.id for r in self.queries]

    @property
    def gt(self) -> dict[str, set[str]]:
        if self._gt is None:
            self._gt = ground_truth_sets(self.records, self.gt_config)
        return self._gt

    def channels(self, modality: str) -> int:
        return 3 if modality == "rgb" else self.scheme.n_classes

    def _load(self, modality: str) -> torch.Tensor:
        if modality == "rgb":
            arr = np.stack([self.store.rgb(rid) for rid in self.ids]).astype(np.float32)
            arr = (arr / 255.0 - RGB_MEAN) / RGB_STD
            arr = arr.transpose(0, 3, 1, 2)
        elif modality == "seg":
            arr = np.stack([self.scheme.encode(self.store.labels(rid)) for rid in self.ids])
        else:
            raise ConfigError(f"unknown input modality {modality!r}")
        return torch.from_numpy(np.ascontiguousarray(arr)).to(self.dtype)

    def tensor(self, modality: str) -> torch.Tensor:
        if modality not in self._cache:
            self._cache[modality] = self._load(modality)
        return self._cache[modality]

    def batch(self, rows: Sequence[int] | torch.Tensor, modalities: Sequence[str]) -> dict[str, torch.Tensor]:
        rows = torch.as_tensor(rows, dtype=torch.long)
        return {m: self.tensor(m).index_select(0, rows) for m in modalities}

    def rows(self, ids: Sequence[str]) -> list[int]:
        try:
            return [self.index[i] for i in ids]
        except KeyError as exc:
            raise LoadError(f"unknown record id {exc.args[0]!r}") from None


@torch.no_grad()
def extract_descriptors(
    model: nn.Module, data: VPRData, ids: Sequence[str] | None = None, batch_size: int = 128
) -> np.ndarray:
    """Descriptors for ``ids`` (default: all records) as a float64 array."""
    model.eval()
    rows = list(range(len(data.ids))) if ids is None else data.rows(ids)
    dtype = next(model.parameters()).dtype
    out = []
    for start in range(0, len(rows), batch_size):
        batch = data.batch(rows[start : start + batch_size], model.inputs)
        out.append(model({k: v.to(dtype) for k, v in batch.items()}).double().numpy())
    dim = getattr(model, "dim", 0)
    return np.concatenate(out) if out else np.zeros((0, dim))


def descriptor_provider(model: nn.Module, data: VPRData):
    """Provider callback computing all descriptors once, then serving lookups."""
    table = extract_descriptors(model, data)

    def provide(ids: Sequence[str]) -> np.ndarray:
        return table[data.rows(ids)]

    return provide
