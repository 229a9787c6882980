"""Positive and negative mining for triplet training."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from ..errors import ConfigError
from .groundtruth import GroundTruthConfig, fov_overlap_distance, ground_truth_sets
from .records import PlaceRecord, split_records

# Maps record ids to an ``(n, dim)`` array of descriptors, one row per id.
DescriptorProvider = Callable[[Sequence[str]], np.ndarray]


class ShortNegativesWarning(UserWarning):
    """Fewer valid negatives than requested were available."""


@dataclass(frozen=True, order=True)
class SamplePair:
    query_id: str
    positive_id: str


def as_provider(source) -> DescriptorProvider:
    """Accept a provider callable or an ``id -> vector`` mapping."""
    if isinstance(source, Mapping):
        return lambda ids: np.stack([np.asarray(source[i], dtype=np.float64) for i in ids])
    if callable(source):
        return source
    raise ConfigError(f"not a descriptor provider: {type(source).__name__}")


def mine_positives(
    records: list[PlaceRecord],
    cfg: GroundTruthConfig,
    mode: str = "fov_best",
    provider: DescriptorProvider | Mapping | None = None,
    gt: dict[str, set[str]] | None = None,
) -> list[SamplePair]:
    """One positive per query, chosen among its ground-truth references.

    ``fov_best`` picks the reference with the smallest field-of-view overlap
    distance (smallest frame offset when records carry no pose); ``weak``
    picks the reference closest in descriptor space. Ties go to the smaller
    id. Queries without ground truth are skipped.
    """
    if mode not in ("fov_best", "weak"):
        raise ConfigError(f"positive mining mode must be 'fov_best' or 'weak', got {mode!r}")
    if mode == "weak" and provider is None:
        raise ConfigError("weak positive mining needs a descriptor provider")
    if gt is None:
        gt = ground_truth_sets(records, cfg)
    by_id = {r.id: r for r in records}
    _, queries = split_records(records)
    provider = as_provider(provider) if provider is not None else None

    pairs = []
    for q in queries:
        refs = sorted(gt.get(q.id, ()))
        if not refs:
            continue
        if len(refs) == 1:
            pairs.append(SamplePair(q.id, refs[0]))
            continue
        if mode == "weak":
            desc = provider([q.id] + refs)
            scores = np.linalg.norm(desc[1:] - desc[0], axis=1)
        elif q.pose is not None and all(by_id[r].pose is not None for r in refs):
            scores = np.array([fov_overlap_distance(q.pose, by_id[r].pose) for r in refs])
        else:
            scores = np.array([abs(by_id[r].seq_index - q.seq_index) for r in refs], dtype=np.float64)
        # argmin returns the first minimum, and refs are id-sorted
        pairs.append(SamplePair(q.id, refs[int(np.argmin(scores))]))
    return pairs


def nearest_excluding(
    query: np.ndarray,
    candidates: np.ndarray,
    candidate_ids: Sequence[str],
    k: int,
) -> list[int]:
    """Indices of the ``k`` candidates nearest to ``query``; ties by id."""
    dist = np.linalg.norm(candidates.astype(np.float64) - query.astype(np.float64), axis=1)
    order = np.lexsort((np.asarray(candidate_ids), dist))
    return order[:k].tolist()


def sample_negatives(
    query_id: str,
    records: list[PlaceRecord],
    gt: dict[str, set[str]],
    k: int,
    provider: DescriptorProvider | Mapping,
    pool: int,
    rng: np.random.Generator | int | None = 0,
) -> list[str]:
    """Hard negatives: the ``k`` nearest non-ground-truth references drawn
    from a random candidate pool of size ``pool``.

    Warns with :class:`ShortNegativesWarning` and returns everything available
    when fewer than ``k`` valid negatives exist.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    if pool < k:
        raise ConfigError(f"pool ({pool}) must be >= k ({k})")
    rng = np.random.default_rng(rng)
    database, _ = split_records(records)
    positives = gt.get(query_id, set())
    candidates = [r.id for r in database if r.id not in positives and r.id != query_id]
    if len(candidates) > pool:
        picked = rng.choice(len(candidates), size=pool, replace=False)
        candidates = [candidates[i] for i in sorted(picked)]
    if len(candidates) < k:
        warnings.warn(
            f"query {query_id}: only {len(candidates)} negatives available, {k} requested",
            ShortNegativesWarning,
            stacklevel=2,
        )
    if not candidates:
        return []
    provider = as_provider(provider)
    desc = provider([query_id] + candidates)
    order = nearest_excluding(desc[0], desc[1:], candidates, k)
    return [candidates[i] for i in order]
