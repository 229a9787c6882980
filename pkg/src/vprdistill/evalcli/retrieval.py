"""Exact L2 retrieval and Recall@N."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from torch import nn

from ..errors import EvaluationError, QueryError
from ..inputs import VPRData, extract_descriptors
from ..model import model_digest

DEFAULT_NS = (1, 5, 10)


class RecallClampWarning(UserWarning):
    pass


@dataclass
class RetrievalIndex:
    ids: list[str]
    matrix: np.ndarray
    model_digest: str = ""

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.ids):
            raise QueryError(f"{len(self.ids)} ids but matrix of shape {self.matrix.shape}")
        if len(set(self.ids)) != len(self.ids):
            raise QueryError("index ids must be unique")
        if self.matrix.size and not np.allclose(np.linalg.norm(self.matrix, axis=1), 1.0, atol=1e-6):
            raise QueryError("index rows must be unit-norm")
        # rows are kept in id order so a stable sort breaks distance ties by id
        order = sorted(range(len(self.ids)), key=self.ids.__getitem__)
        if order != list(range(len(self.ids))):
            self.ids = [self.ids[i] for i in order]
            self.matrix = self.matrix[order]

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def distances(self, queries: np.ndarray) -> np.ndarray:
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if queries.shape[1] != self.dim:
            raise QueryError(f"query dim {queries.shape[1]} != index dim {self.dim}")
        if not len(queries):
            return np.zeros((0, len(self.ids)))
        # explicit differences, not the Gram expansion: exact zeros for identical rows
        return np.stack([np.linalg.norm(self.matrix - q, axis=1) for q in queries])

    def ranked(self, queries: np.ndarray, k: int | None = None) -> np.ndarray:
        """Row indices sorted by ascending distance, ties by id; shape ``(nq, k)``."""
        order = np.argsort(self.distances(queries), axis=1, kind="stable")
        return order if k is None else order[:, :k]


def build_index(model: nn.Module, data: VPRData, batch_size: int = 128) -> RetrievalIndex:
    """Descriptors of the database split of ``data``, one row per id."""
    ids = data.db_ids
    return RetrievalIndex(ids, extract_descriptors(model, data, ids, batch_size), model_digest(model))


def retrieve(index: RetrievalIndex, query: np.ndarray, k: int) -> list[str]:
    query = np.asarray(query, dtype=np.float64)
    if query.ndim != 1:
        raise QueryError("retrieve takes a single descriptor")
    if not 1 <= k <= len(index):
        raise QueryError(f"k={k} outside 1..{len(index)}")
    return [index.ids[j] for j in index.ranked(query[None], k)[0]]


@dataclass
class RecallReport:
    recalls: dict[int, float]
    n_queries: int
    n_excluded: int = 0
    gt_digest: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        ns = sorted(self.recalls)
        vals = [self.recalls[n] for n in ns]
        if any(b < a for a, b in zip(vals, vals[1:])):
            raise EvaluationError(f"recall must be non-decreasing in N, got {self.recalls}")

    def to_dict(self) -> dict:
        return {
            "recall": {f"R@{n}": self.recalls[n] for n in sorted(self.recalls)},
            "n_queries": self.n_queries,
            "n_excluded": self.n_excluded,
            "gt_digest": self.gt_digest,
            **self.extra,
        }

    def rows(self) -> list[tuple[int, float]]:
        return [(n, self.recalls[n]) for n in sorted(self.recalls)]


def recall_at_n(
    index: RetrievalIndex,
    query_ids: Sequence[str],
    query_desc: np.ndarray,
    gt: Mapping[str, set[str]],
    ns: Sequence[int] = DEFAULT_NS,
    gt_digest: str = "",
) -> RecallReport:
    """Fraction of queries with a ground-truth reference in their top N.

    Queries with empty ground truth are left out of the denominator and
    counted in ``n_excluded``. N above the database size is clamped.
    """
    ns = sorted({int(n) for n in ns})
    if not ns or ns[0] < 1:
        raise EvaluationError(f"N values must be >= 1, got {ns}")
    missing = [q for q in query_ids if q not in gt]
    if missing:
        raise EvaluationError(f"no ground-truth entry for queries {missing[:5]}")
    if ns[-1] > len(index):
        warnings.warn(f"N={ns[-1]} exceeds database size {len(index)}; clamped", RecallClampWarning, stacklevel=2)
    keep = [i for i, q in enumerate(query_ids) if gt[q]]
    n_excluded = len(query_ids) - len(keep)
    if not keep:
        return RecallReport({n: 0.0 for n in ns}, 0, n_excluded, gt_digest)
    kmax = min(ns[-1], len(index))
    top = index.ranked(np.asarray(query_desc)[keep], kmax)
    id_pos = {rid: j for j, rid in enumerate(index.ids)}
    # first rank (0-based) at which a ground-truth reference appears
    first_hit = np.full(len(keep), np.iinfo(np.int64).max)
    for row, qi in enumerate(keep):
        refs = {id_pos[r] for r in gt[query_ids[qi]] if r in id_pos}
        for rank, j in enumerate(top[row]):
            if j in refs:
                first_hit[row] = rank
                break
    recalls = {n: float(np.mean(first_hit < min(n, len(index)))) for n in ns}
    return RecallReport(recalls, len(keep), n_excluded, gt_digest)


def evaluate(
    model: nn.Module,
    data: VPRData,
    ns: Sequence[int] = DEFAULT_NS,
    query_ids: Sequence[str] | None = None,
    batch_size: int = 128,
) -> RecallReport:
    """Recall@N of ``model`` on the queries of ``data`` against its database."""
    index = build_index(model, data, batch_size)
    query_ids = list(data.query_ids if query_ids is None else query_ids)
    desc = extract_descriptors(model, data, query_ids, batch_size)
    return recall_at_n(index, query_ids, desc, data.gt, ns, data.gt_config.digest())
