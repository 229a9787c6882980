"""Place records and the CSV manifest format."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from ..errors import SchemaError

MANIFEST_FIELDS = ("id", "rgb_path", "seg_path", "easting", "northing", "heading", "split", "seq_index")
SPLITS = ("database", "query")


@dataclass(frozen=True)
class Pose:
    """Planar position in meters and compass heading in degrees."""

    easting: float
    northing: float
    heading: float = 0.0

    def __post_init__(self):
        for name in ("easting", "northing", "heading"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise SchemaError(f"pose {name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        heading = self.heading % 360.0
        if heading >= 360.0:  # tiny negative inputs round up to 360.0
            heading = 0.0
        object.__setattr__(self, "heading", heading)


@dataclass(frozen=True)
class PlaceRecord:
    id: str
    rgb_path: str
    seg_path: str | None = None
    pose: Pose | None = None
    split: str = "database"
    seq_index: int | None = None

    def __post_init__(self):
        if not self.id:
            raise SchemaError("record id must be non-empty")
        if self.split not in SPLITS:
            raise SchemaError(f"record {self.id}: split must be one of {SPLITS}, got {self.split!r}")
        if self.seq_index is not None and self.seq_index < 0:
            raise SchemaError(f"record {self.id}: seq_index must be >= 0")

    @property
    def is_query(self) -> bool:
        return self.split == "query"


def split_records(records: Iterable[PlaceRecord]) -> tuple[list[PlaceRecord], list[PlaceRecord]]:
    """Return ``(database, queries)``, each sorted by id."""
    records = sorted(records, key=lambda r: r.id)
    return [r for r in records if not r.is_query], [r for r in records if r.is_query]


def _parse_float(value: str, line: int, field: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise SchemaError(f"line {line}, field {field!r}: not a number: {value!r}") from None


def _resolve(path: str, root: Path) -> str:
    if not path:
        return path
    p = Path(path)
    return str(p if p.is_absolute() else (root / p))


def load_manifest(path: str | Path) -> list[PlaceRecord]:
    """Parse a manifest CSV.

    Relative image paths are resolved against the manifest's directory.
    Image files are not touched here; a missing file surfaces when it is
    first read.
    """
    path = Path(path)
    root = path.resolve().parent
    records: list[PlaceRecord] = []
    seen: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty manifest")
        missing = [f for f in MANIFEST_FIELDS if f not in reader.fieldnames]
        if missing:
            raise SchemaError(f"{path}, line 1: header is missing field(s) {missing}")
        for line, row in enumerate(reader, start=2):
            if None in row or any(v is None for v in row.values()):
                raise SchemaError(f"{path}, line {line}: wrong number of columns")
            rid = row["id"].strip()
            if not rid:
                raise SchemaError(f"{path}, line {line}, field 'id': empty id")
            if rid in seen:
                raise SchemaError(
                    f"{path}, line {line}, field 'id': duplicate id {rid!r} (first on line {seen[rid]})"
                )
            seen[rid] = line
            if not row["rgb_path"]:
                raise SchemaError(f"{path}, line {line}, field 'rgb_path': empty")
            pose_fields = [row["easting"], row["northing"], row["heading"]]
            if all(pose_fields):
                pose = Pose(
                    _parse_float(row["easting"], line, "easting"),
                    _parse_float(row["northing"], line, "northing"),
                    _parse_float(row["heading"], line, "heading"),
                )
            elif any(pose_fields[:2]):
                raise SchemaError(f"{path}, line {line}, field 'easting': partial pose")
            else:
                pose = None
            seq = row["seq_index"].strip()
            if seq:
                try:
                    seq_index = int(seq)
                except ValueError:
                    raise SchemaError(f"{path}, line {line}, field 'seq_index': not an integer: {seq!r}") from None
            else:
                seq_index = None
            try:
                records.append(
                    PlaceRecord(
                        id=rid,
                        rgb_path=_resolve(row["rgb_path"], root),
                        seg_path=_resolve(row["seg_path"], root) or None,
                        pose=pose,
                        split=row["split"].strip(),
                        seq_index=seq_index,
                    )
                )
            except SchemaError as exc:
                raise SchemaError(f"{path}, line {line}: {exc}") from None
    return records


def _relative(path: str | None, root: Path) -> str:
    if not path:
        return ""
    try:
        return os.path.relpath(path, root)
    except ValueError:
        return path


def save_manifest(records: Iterable[PlaceRecord], path: str | Path) -> None:
    """Write records as CSV; image paths are stored relative to the manifest."""
    path = Path(path)
    root = path.resolve().parent
    ids = set()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for r in records:
            if r.id in ids:
                raise SchemaError(f"duplicate id {r.id!r}")
            ids.add(r.id)
            pose = r.pose
            writer.writerow(
                [
                    r.id,
                    _relative(r.rgb_path, root),
                    _relative(r.seg_path, root),
                    "" if pose is None else repr(pose.easting),
                    "" if pose is None else repr(pose.northing),
                    "" if pose is None else repr(pose.heading),
                    r.split,
                    "" if r.seq_index is None else str(r.seq_index),
                ]
            )
