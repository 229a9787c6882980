"""Single-image extraction latency and per-query matching time."""

from __future__ import annotations

import platform
import time
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from ..errors import EvaluationError
from ..inputs import VPRData, extract_descriptors
from .retrieval import RetrievalIndex


@dataclass
class LatencyReport:
    mean_ms: float
    p50_ms: float
    p95_ms: float
    match_s_per_query: float
    reps: int
    environment: str

    def __post_init__(self):
        if min(self.mean_ms, self.p50_ms, self.p95_ms, self.match_s_per_query) < 0:
            raise EvaluationError("durations must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


def environment_note() -> str:
    return (
        f"{platform.processor() or platform.machine()}; python {platform.python_version()}; "
        f"torch {torch.__version__}; threads {torch.get_num_threads()}"
    )


def latency_stats(samples_ms: Sequence[float]) -> tuple[float, float, float]:
    """Mean, median and 95th percentile (linear interpolation)."""
    arr = np.asarray(samples_ms, dtype=np.float64)
    if not arr.size:
        raise EvaluationError("no latency samples")
    return float(arr.mean()), float(np.percentile(arr, 50)), float(np.percentile(arr, 95))


@torch.no_grad()
def bench_latency(
    model: nn.Module,
    data: VPRData,
    warmup: int = 3,
    reps: int = 20,
    ids: Sequence[str] | None = None,
) -> LatencyReport:
    """Time one-image forward passes, then exact matching against the database.

    Images are taken from ``ids`` (default: the queries of ``data``) in
    turn. Matching time is the wall clock of ranking every query against
    the database index, divided by the number of queries.
    """
    if reps < 1:
        raise EvaluationError("reps must be >= 1")
    if warmup < 0:
        raise EvaluationError("warmup must be >= 0")
    ids = list(data.query_ids if ids is None else ids) or list(data.ids)
    if not ids:
        raise EvaluationError("no images to benchmark")
    model.eval()
    rows = data.rows(ids)
    dtype = next(model.parameters()).dtype
    batches = [
        {k: v.to(dtype) for k, v in data.batch([rows[i % len(rows)]], model.inputs).items()}
        for i in range(warmup + reps)
    ]
    samples = []
    for i, batch in enumerate(batches):
        t0 = time.perf_counter()
        model(batch)
        dt = (time.perf_counter() - t0) * 1e3
        if i >= warmup:
            samples.append(dt)
    mean, p50, p95 = latency_stats(samples)

    match = 0.0
    if data.db_ids and data.query_ids:
        index = RetrievalIndex(data.db_ids, extract_descriptors(model, data, data.db_ids))
        queries = extract_descriptors(model, data, data.query_ids)
        t0 = time.perf_counter()
        index.ranked(queries)
        match = (time.perf_counter() - t0) / len(queries)
    return LatencyReport(mean, p50, p95, match, reps, environment_note())
