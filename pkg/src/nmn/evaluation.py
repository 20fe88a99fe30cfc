"""Two-stage alignment ranking, Hits@k and degree-gap bucketed accuracy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .encoder import encode
from .errors import IntegrityError
from .kg import KnowledgeGraph, MergedGraph
from .matching import MatchParams, pair_distances
from .model import ModelParams
from .neighborhood import random_table, sample_table

DEFAULT_BUCKETS = (0, 10, 20, 30)


@dataclass
class InferenceContext:
    """Frozen embeddings and sampled neighborhoods for ranking."""

    merged: MergedGraph
    h: torch.Tensor
    idx: np.ndarray
    mask: np.ndarray
    match: MatchParams
    matching: bool = True

    @classmethod
    def build(cls, model: ModelParams, merged: MergedGraph, K: int = 5, sampling: str = "learned",
              seed: int = 0, matching: bool = True) -> "InferenceContext":
        with torch.no_grad():
            h = encode(merged, model.encoder)
        if sampling == "random":
            idx, mask = random_table(merged, K, seed)
        else:
            idx, mask = sample_table(merged, h, model.sampler.W_s, K)
        return cls(merged, h, idx, mask, model.match, matching)


@dataclass
class AlignmentRanking:
    """Ranked G2 counterparts (entity ids) per G1 source entity id."""

    ranked: dict[int, np.ndarray]
    distances: dict[int, np.ndarray]
    rescreen_width: int
    extra: dict = field(default_factory=dict)

    def rank_of(self, source: int, target: int) -> int:
        """1-based rank of ``target``; ``len + 1`` when it is not in the list."""
        if source not in self.ranked:
            raise IntegrityError(f"source entity {source} has no ranking")
        hit = np.flatnonzero(self.ranked[source] == target)
        return int(hit[0]) + 1 if len(hit) else len(self.ranked[source]) + 1


def rank_nodes(ctx: InferenceContext, sources: Sequence[int], pool: Sequence[int],
               rescreen_width: int) -> tuple[np.ndarray, np.ndarray]:
    """Node-space two-stage ranking. Returns ``(order, distances)`` of shape (S, |pool|).

    Stage one sorts the pool by L1 distance between encoder outputs; stage two
    re-sorts the first ``rescreen_width`` entries by matching distance. Ties go
    to the smaller node index in both stages.
    """
    pool = np.sort(np.asarray(pool, dtype=np.int64))
    sources = np.asarray(sources, dtype=np.int64)
    C = len(pool) if rescreen_width <= 0 else min(rescreen_width, len(pool))
    order = np.zeros((len(sources), len(pool)), dtype=np.int64)
    dist = np.zeros((len(sources), len(pool)))
    if len(sources) == 0 or len(pool) == 0:
        return order, dist
    with torch.no_grad():
        hp = ctx.h[torch.from_numpy(pool)]
        for s in range(0, len(sources), 256):
            src = sources[s:s + 256]
            d1 = torch.cdist(ctx.h[torch.from_numpy(src)], hp, p=1).numpy()
            o1 = np.argsort(d1, axis=1, kind="stable")
            top = o1[:, :C]
            left = np.repeat(src, C)
            right = pool[top].reshape(-1)
            d2 = pair_distances(ctx.h, ctx.idx, ctx.mask, left, right, ctx.match, ctx.matching).numpy()
            d2 = d2.reshape(len(src), C)
            # stage-two ties fall back to the smaller node index
            o2 = _lexsort_rows(d2, pool[top])
            order[s:s + len(src), :C] = np.take_along_axis(pool[top], o2, 1)
            dist[s:s + len(src), :C] = np.take_along_axis(d2, o2, 1)
            order[s:s + len(src), C:] = pool[o1[:, C:]]
            dist[s:s + len(src), C:] = np.take_along_axis(d1, o1[:, C:], 1)
    return order, dist


def _lexsort_rows(primary: np.ndarray, secondary: np.ndarray) -> np.ndarray:
    first = np.argsort(secondary, axis=1, kind="stable")
    second = np.argsort(np.take_along_axis(primary, first, 1), axis=1, kind="stable")
    return np.take_along_axis(first, second, 1)


def rank_counterparts(source: int, ctx: InferenceContext, rescreen_width: int = 0,
                      pool: Sequence[int] | None = None) -> tuple[list[int], np.ndarray]:
    """Ranked G2 entity ids (and distances) for the G1 entity ``source``."""
    merged = ctx.merged
    pool = merged.side2_nodes if pool is None else merged.nodes(2, pool)
    order, dist = rank_nodes(ctx, [merged.node(1, source)], pool, rescreen_width)
    return [merged.entity(int(n))[1] for n in order[0]], dist[0]


def rank_all(ctx: InferenceContext, sources: Sequence[int], rescreen_width: int = 0,
             pool: Sequence[int] | None = None) -> AlignmentRanking:
    merged = ctx.merged
    pool_nodes = merged.side2_nodes if pool is None else merged.nodes(2, pool)
    src_nodes = merged.nodes(1, sources)
    order, dist = rank_nodes(ctx, src_nodes, pool_nodes, rescreen_width)
    ids = merged.ids2[order - merged.offset] if order.size else order
    C = len(pool_nodes) if rescreen_width <= 0 else min(rescreen_width, len(pool_nodes))
    return AlignmentRanking(
        ranked={int(s): ids[i] for i, s in enumerate(sources)},
        distances={int(s): dist[i] for i, s in enumerate(sources)},
        rescreen_width=C,
    )


def hits_at_k(rankings: AlignmentRanking, gold: Sequence[tuple[int, int]], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not gold:
        return 0.0
    hits = sum(rankings.rank_of(a, b) <= k for a, b in gold)
    return hits / len(gold)


def bucket_index(values: np.ndarray, edges: Sequence[float]) -> np.ndarray:
    edges = np.asarray(edges, dtype=np.float64)
    if len(edges) == 0 or np.any(np.diff(edges) <= 0):
        raise ValueError("bucket edges must be non-empty and strictly increasing")
    values = np.asarray(values, dtype=np.float64)
    if len(values) and values.min() < edges[0]:
        raise ValueError("first bucket edge must not exceed the smallest value")
    return np.searchsorted(edges, values, side="right") - 1


def bucket_labels(edges: Sequence[float]) -> list[tuple[float, float]]:
    edges = list(edges)
    return list(zip(edges, edges[1:] + [math.inf]))


def bucketed_hits(rankings: AlignmentRanking, gold: Sequence[tuple[int, int]], g1: KnowledgeGraph,
                  g2: KnowledgeGraph, bucket_edges: Sequence[float] = DEFAULT_BUCKETS) -> list[dict]:
    """Hits@1 per bucket of ``|deg_G1(e1) - deg_G2(e2)|``.

    Buckets are half-open ``[lo, hi)``; the last one is unbounded. Empty
    buckets report ``hits1 = None``.
    """
    diffs = np.array([abs(g1.degree(a) - g2.degree(b)) for a, b in gold])
    which = bucket_index(diffs, bucket_edges)
    correct = np.array([rankings.rank_of(a, b) == 1 for a, b in gold], dtype=bool)
    out = []
    for i, (lo, hi) in enumerate(bucket_labels(bucket_edges)):
        sel = which == i
        count = int(sel.sum())
        out.append({"lo": lo, "hi": hi, "count": count,
                    "hits1": float(correct[sel].mean()) if count else None})
    return out
