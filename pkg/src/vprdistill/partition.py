"""Recall rankings of training pairs and the D1-D4 group partition."""

from __future__ import annotations

import csv
import json
import os
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .dataset.mining import DescriptorProvider, SamplePair, as_provider
from .dataset.records import PlaceRecord, split_records
from .errors import ConfigError, DataError, ProvenanceError, SchemaError


class Group(str, Enum):
    D1 = "D1"  # seg-branch finds the positive, rgb-branch does not
    D2 = "D2"  # both find it, seg ranks it at least as high
    D3 = "D3"  # both find it, rgb ranks it higher
    D4 = "D4"  # seg-branch misses it


# Unions used by the single-branch partition strategies.
DERIVED = {
    "S1": {Group.D1, Group.D2, Group.D3},
    "S2": {Group.D4},
}
# Which pairs take part in selective distillation under each strategy.
STRATEGIES = {"GP-D": ("D1", "D2", "D3"), "GP-S": ("S1",), "GP-R": ("R1",)}


@dataclass(frozen=True)
class PartitionConfig:
    n_t: int = 10
    n_m: int = 20

    def __post_init__(self):
        if not 1 <= self.n_t <= self.n_m:
            raise ConfigError(f"need 1 <= N_t <= N_m, got N_t={self.n_t}, N_m={self.n_m}")


@dataclass
class RecallRanking:
    ranks: dict[SamplePair, int]
    branch: str

    def __len__(self) -> int:
        return len(self.ranks)


def rank_positive(dist: np.ndarray, db_ids: list[str], positive_index: int) -> int:
    """1 + number of references strictly ahead of the positive (ties by id)."""
    d_pos = dist[positive_index]
    pid = db_ids[positive_index]
    ahead = np.count_nonzero(dist < d_pos)
    ahead += sum(1 for j in np.flatnonzero(dist == d_pos) if db_ids[j] < pid)
    return int(ahead) + 1


def compute_rankings(
    provider: DescriptorProvider | Mapping,
    records: Iterable[PlaceRecord],
    pairs: Iterable[SamplePair],
    branch: str = "seg",
) -> RecallRanking:
    """Rank of each pair's positive in its query's list over the full database."""
    provider = as_provider(provider)
    database, _ = split_records(records)
    db_ids = [r.id for r in database]
    db_index = {rid: j for j, rid in enumerate(db_ids)}
    pairs = list(pairs)
    for pair in pairs:
        if pair.positive_id not in db_index:
            raise DataError(f"pair {pair}: positive is not in the database split")
    # all descriptors at once, then ranking is pure array work
    query_ids = sorted({p.query_id for p in pairs})
    q_desc = np.asarray(provider(query_ids), dtype=np.float64) if query_ids else np.zeros((0, 1))
    d_desc = np.asarray(provider(db_ids), dtype=np.float64)
    q_row = {qid: i for i, qid in enumerate(query_ids)}
    ranks = {}
    for pair in pairs:
        dist = np.linalg.norm(d_desc - q_desc[q_row[pair.query_id]], axis=1)
        ranks[pair] = rank_positive(dist, db_ids, db_index[pair.positive_id])
    return RecallRanking(ranks, branch)


def assign_group(x: int, y: int, cfg: PartitionConfig = PartitionConfig()) -> Group:
    """Group of a pair with seg rank ``x`` and rgb rank ``y``."""
    if x > cfg.n_t:
        return Group.D4
    if y > cfg.n_t:
        return Group.D1
    return Group.D2 if x <= y else Group.D3


@dataclass(frozen=True)
class PartitionRow:
    query_id: str
    positive_id: str
    x: int
    y: int
    group: Group

    @property
    def pair(self) -> SamplePair:
        return SamplePair(self.query_id, self.positive_id)


@dataclass
class PartitionTable:
    rows: list[PartitionRow]
    config: PartitionConfig = field(default_factory=PartitionConfig)
    digests: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.digests = {"seg": self.digests.get("seg", ""), "rgb": self.digests.get("rgb", "")}

    def __len__(self) -> int:
        return len(self.rows)

    def __eq__(self, other):
        if not isinstance(other, PartitionTable):
            return NotImplemented
        return self.rows == other.rows and self.config == other.config and self.digests == other.digests

    def by_pair(self) -> dict[SamplePair, PartitionRow]:
        return {r.pair: r for r in self.rows}

    def counts(self) -> dict[str, int]:
        out = {g.value: 0 for g in Group}
        for r in self.rows:
            out[r.group.value] += 1
        return out

    def members(self, name: str) -> list[PartitionRow]:
        """Rows of a group (D1-D4) or a derived set (S1, S2, R1, R2)."""
        if name in Group.__members__:
            return [r for r in self.rows if r.group == Group(name)]
        if name in DERIVED:
            return [r for r in self.rows if r.group in DERIVED[name]]
        if name == "R1":
            return [r for r in self.rows if r.y <= self.config.n_t]
        if name == "R2":
            return [r for r in self.rows if r.y > self.config.n_t]
        raise KeyError(name)

    def ratios(self) -> dict[str, float]:
        n = len(self.rows)
        names = [g.value for g in Group] + ["S1", "S2", "R1", "R2"]
        return {k: (len(self.members(k)) / n if n else 0.0) for k in names}

    def strategy(self, name: str) -> list[PartitionRow]:
        """Pairs selected for distillation by GP-D, GP-S or GP-R."""
        try:
            sets = STRATEGIES[name]
        except KeyError:
            raise ConfigError(f"unknown partition strategy {name!r}; choose from {sorted(STRATEGIES)}") from None
        keep = {r.pair for s in sets for r in self.members(s)}
        return [r for r in self.rows if r.pair in keep]


def partition(
    seg: RecallRanking,
    rgb: RecallRanking,
    cfg: PartitionConfig = PartitionConfig(),
    digests: dict[str, str] | None = None,
) -> PartitionTable:
    seg_pairs, rgb_pairs = set(seg.ranks), set(rgb.ranks)
    if seg_pairs != rgb_pairs:
        diff = sorted(seg_pairs ^ rgb_pairs)
        raise DataError(f"seg and rgb rankings cover different pairs; symmetric difference: {diff[:10]}")
    rows = []
    for pair in sorted(seg_pairs):
        x, y = seg.ranks[pair], rgb.ranks[pair]
        rows.append(PartitionRow(pair.query_id, pair.positive_id, x, y, assign_group(x, y, cfg)))
    return PartitionTable(rows, cfg, dict(digests or {}))


# Persistence ---------------------------------------------------------------

PARTITION_FIELDS = ("query_id", "positive_id", "x", "y", "group")


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def save_partition(table: PartitionTable, path: str | Path) -> None:
    """CSV of rows plus a JSON sidecar with thresholds and checkpoint digests."""
    path = Path(path)
    lines = [",".join(PARTITION_FIELDS)]
    for r in table.rows:
        lines.append(f"{r.query_id},{r.positive_id},{r.x},{r.y},{r.group.value}")
    _atomic_write(path, "\n".join(lines) + "\n")
    sidecar = {
        "N_t": table.config.n_t,
        "N_m": table.config.n_m,
        "seg_ckpt_digest": table.digests.get("seg", ""),
        "rgb_ckpt_digest": table.digests.get("rgb", ""),
    }
    _atomic_write(sidecar_path(path), json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


class ProvenanceWarning(UserWarning):
    pass


def load_partition(
    path: str | Path, expected_digests: dict[str, str] | None = None, strict: bool = False
) -> PartitionTable:
    """Read a partition file; digest mismatches raise in strict mode, warn otherwise."""
    path = Path(path)
    try:
        side = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
        cfg = PartitionConfig(int(side["N_t"]), int(side["N_m"]))
    except (OSError, KeyError, ValueError) as exc:
        raise SchemaError(f"{sidecar_path(path)}: unreadable partition sidecar ({exc})") from exc
    digests = {"seg": side.get("seg_ckpt_digest", ""), "rgb": side.get("rgb_ckpt_digest", "")}
    for key, want in (expected_digests or {}).items():
        if digests.get(key) != want:
            msg = f"{path}: {key} checkpoint digest {digests.get(key)!r} != expected {want!r}"
            if strict:
                raise ProvenanceError(msg)
            warnings.warn(msg, ProvenanceWarning, stacklevel=2)
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != PARTITION_FIELDS:
            raise SchemaError(f"{path}, line 1: expected header {','.join(PARTITION_FIELDS)}")
        for line, row in enumerate(reader, start=2):
            try:
                rows.append(
                    PartitionRow(row["query_id"], row["positive_id"], int(row["x"]), int(row["y"]), Group(row["group"]))
                )
            except (ValueError, TypeError) as exc:
                raise SchemaError(f"{path}, line {line}: {exc}") from exc
    return PartitionTable(rows, cfg, digests)
