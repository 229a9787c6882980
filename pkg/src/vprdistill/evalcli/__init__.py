"""Retrieval, Recall@N, latency benchmarking, descriptor files and the CLI.

The experiment runner and the CLI live in :mod:`.experiment` and
:mod:`.cli`; they import the training stack and are not re-exported here.
"""

from .bench import LatencyReport, bench_latency, latency_stats
from .descfile import load_descriptors, save_descriptors
from .retrieval import (
    DEFAULT_NS,
    RecallClampWarning,
    RecallReport,
    RetrievalIndex,
    build_index,
    evaluate,
    recall_at_n,
    retrieve,
)

__all__ = [
    "DEFAULT_NS",
    "LatencyReport",
    "RecallClampWarning",
    "RecallReport",
    "RetrievalIndex",
    "bench_latency",
    "build_index",
    "evaluate",
    "latency_stats",
    "load_descriptors",
    "recall_at_n",
    "retrieve",
    "save_descriptors",
]
