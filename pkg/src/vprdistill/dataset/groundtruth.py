"""Pose and frame based ground truth."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigError
from .records import PlaceRecord, Pose, split_records

GT_MODES = ("radius", "radius_angle", "frame_window")


@dataclass(frozen=True)
class GroundTruthConfig:
    mode: str = "radius"
    radius_m: float = 25.0
    angle_deg: float = 40.0
    frame_tol: int = 2

    def __post_init__(self):
        if self.mode not in GT_MODES:
            raise ConfigError(f"ground-truth mode must be one of {GT_MODES}, got {self.mode!r}")
        if self.radius_m <= 0:
            raise ConfigError("radius_m must be > 0")
        if self.angle_deg <= 0:
            raise ConfigError("angle_deg must be > 0")
        if self.frame_tol < 0:
            raise ConfigError("frame_tol must be >= 0")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def angle_difference(a, b):
    """Absolute heading difference wrapped into [0, 180]."""
    d = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) % 360.0
    return np.minimum(d, 360.0 - d)


def fov_overlap_distance(q: Pose, p: Pose) -> float:
    """Field-of-view overlap distance; a pair overlaps iff the value is < 1."""
    dist = float(np.hypot(q.easting - p.easting, q.northing - p.northing))
    return dist / 25.0 + float(angle_difference(q.heading, p.heading)) / 40.0


def fov_overlaps(q: Pose, p: Pose) -> bool:
    return fov_overlap_distance(q, p) < 1.0


def _poses(records: list[PlaceRecord], mode: str) -> np.ndarray:
    missing = [r.id for r in records if r.pose is None]
    if missing:
        raise ConfigError(f"mode {mode!r} needs poses; missing for {missing[:5]}")
    return np.array([[r.pose.easting, r.pose.northing, r.pose.heading] for r in records])


def ground_truth_matrix(
    queries: list[PlaceRecord], database: list[PlaceRecord], cfg: GroundTruthConfig
) -> np.ndarray:
    """Boolean ``(n_queries, n_database)`` matrix of ground-truth matches."""
    if cfg.mode == "frame_window":
        missing = [r.id for r in queries + database if r.seq_index is None]
        if missing:
            raise ConfigError(f"mode 'frame_window' needs seq_index; missing for {missing[:5]}")
        qs = np.array([r.seq_index for r in queries], dtype=np.int64)
        ds = np.array([r.seq_index for r in database], dtype=np.int64)
        return np.abs(qs[:, None] - ds[None, :]) <= cfg.frame_tol
    qp = _poses(queries, cfg.mode)
    dp = _poses(database, cfg.mode)
    dist = np.hypot(qp[:, None, 0] - dp[None, :, 0], qp[:, None, 1] - dp[None, :, 1])
    match = dist <= cfg.radius_m
    if cfg.mode == "radius_angle":
        match &= angle_difference(qp[:, None, 2], dp[None, :, 2]) <= cfg.angle_deg
    return match


def ground_truth_sets(records: list[PlaceRecord], cfg: GroundTruthConfig) -> dict[str, set[str]]:
    """Map every query id to the set of database ids within tolerance."""
    database, queries = split_records(records)
    if not database or not queries:
        raise ConfigError("ground truth needs at least one query and one database record")
    match = ground_truth_matrix(queries, database, cfg)
    db_ids = [r.id for r in database]
    return {q.id: {db_ids[j] for j in np.flatnonzero(row)} for q, row in zip(queries, match)}
