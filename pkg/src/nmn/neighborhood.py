"""Neighbor sampling and candidate pre-screening.

Both the per-entity functions (used for inspection and as test oracles) and
the table builders used during training live here. Tables are padded
``(n, K)`` index arrays plus a boolean mask; padded slots point at node 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import EmptyNeighborhoodError, DimensionError

MODES = ("deterministic", "stochastic")


@dataclass
class SamplerParams:
    W_s: torch.Tensor


@dataclass
class NeighborhoodSubgraph:
    center: int
    neighbor_ids: list[int]
    neighbor_embeddings: torch.Tensor
    sample_probs: torch.Tensor

    def __len__(self) -> int:
        return len(self.neighbor_ids)


@dataclass
class CandidateSet:
    source: int
    candidates: list[int]
    distances: np.ndarray


def _tensor(x, dtype=torch.float64) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def entity_seed(base_seed: int, entity: int) -> int:
    return int(base_seed) ^ int(entity)


def neighbor_sampling_probs(h_center, neighbor_embs, W_s) -> torch.Tensor:
    """Softmax of the bilinear scores ``h_center W_s h_j``."""
    h_center, neighbor_embs, W_s = _tensor(h_center), _tensor(neighbor_embs), _tensor(W_s)
    if neighbor_embs.ndim != 2 or neighbor_embs.shape[0] == 0:
        raise EmptyNeighborhoodError("cannot sample from an empty neighborhood")
    return torch.softmax(neighbor_embs @ (h_center @ W_s), dim=0)


def sample_neighborhood(center, graph, embeddings, W_s, K: int = 5, mode: str = "deterministic",
                        rng_seed: int = 0) -> NeighborhoodSubgraph:
    """Pick at most ``K`` one-hop neighbors of ``center``.

    ``graph`` is anything with ``neighbors(x)`` and ``row(x)`` (a
    KnowledgeGraph or a MergedGraph); ``embeddings`` is indexed by row.
    Deterministic mode keeps the ``K`` most probable neighbors, smaller id
    first on ties. Stochastic mode draws ``K`` without replacement.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if mode not in MODES:
        raise ValueError(f"unknown sampling mode {mode!r}")
    nbrs = graph.neighbors(center)
    embeddings = _tensor(embeddings)
    if not nbrs:
        empty = embeddings.new_zeros((0, embeddings.shape[1]))
        return NeighborhoodSubgraph(center, [], empty, embeddings.new_zeros(0))
    rows = [graph.row(j) for j in nbrs]
    embs = embeddings[rows]
    probs = neighbor_sampling_probs(embeddings[graph.row(center)], embs, W_s)
    if len(nbrs) <= K:
        pick = list(range(len(nbrs)))
    elif mode == "deterministic":
        logits = (embs @ (embeddings[graph.row(center)] @ _tensor(W_s))).detach().numpy()
        pick = sorted(np.lexsort((np.asarray(nbrs), -logits))[:K].tolist())
    else:
        rng = np.random.default_rng(entity_seed(rng_seed, center))
        p = probs.detach().numpy().astype(np.float64)
        pick = sorted(rng.choice(len(nbrs), size=K, replace=False, p=p / p.sum()).tolist())
    return NeighborhoodSubgraph(center, [nbrs[i] for i in pick], embs[pick], probs[pick])


def random_sample_neighborhood(center, graph, K: int = 5, rng_seed: int = 0, embeddings=None) -> NeighborhoodSubgraph:
    """Uniform ``K``-subset of the neighbors (the random-sampling baseline)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    nbrs = graph.neighbors(center)
    m = len(nbrs)
    if m <= K:
        pick = list(range(m))
    else:
        rng = np.random.default_rng(entity_seed(rng_seed, center))
        pick = sorted(rng.choice(m, size=K, replace=False).tolist())
    if embeddings is None:
        embs = torch.zeros((len(pick), 0), dtype=torch.float64)
    else:
        embeddings = _tensor(embeddings)
        embs = embeddings[[graph.row(nbrs[i]) for i in pick]]
    probs = torch.full((len(pick),), 1.0 / m if m else 0.0, dtype=torch.float64)
    return NeighborhoodSubgraph(center, [nbrs[i] for i in pick], embs, probs)


def select_candidates(source_emb, other_embeddings, other_ids: Sequence[int], t: int = 20,
                      source: int = -1) -> CandidateSet:
    """The ``t`` closest entities by L1 distance, ascending, smaller id on ties."""
    if t < 1:
        raise ValueError("t must be >= 1")
    other = np.asarray(_tensor(other_embeddings).detach())
    if other.shape[0] == 0:
        raise ValueError("the other KG has no entities")
    if other.shape[0] != len(other_ids):
        raise DimensionError("other_ids must align with other_embeddings rows")
    src = np.asarray(_tensor(source_emb).detach())
    dist = np.abs(other - src).sum(axis=1)
    ids = np.asarray(other_ids)
    order = np.lexsort((ids, dist))[:t]
    return CandidateSet(source=source, candidates=ids[order].tolist(), distances=dist[order])


# ---------------------------------------------------------------------------
# tables over a whole merged graph


def sample_table(merged, h: torch.Tensor, W_s: torch.Tensor, K: int, mode: str = "deterministic",
                 rng_seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Sampled neighbor table for every node (vectorised ``sample_neighborhood``)."""
    n = merged.num_nodes
    idx = np.zeros((n, K), dtype=np.int64)
    mask = np.zeros((n, K), dtype=bool)
    src = np.repeat(np.arange(n), np.diff(merged.indptr))
    dst = merged.indices
    if len(dst) == 0:
        return idx, mask
    with torch.no_grad():
        hd = h.detach()
        logits = ((hd[src] @ W_s.detach()) * hd[dst]).sum(dim=1).numpy()
    if mode == "deterministic":
        order = np.lexsort((dst, -logits, src))
        rank = np.arange(len(order)) - merged.indptr[src[order]]
        keep = order[rank < K]
        slot = rank[rank < K]
        idx[src[keep], slot] = dst[keep]
        mask[src[keep], slot] = True
        # slot order within a row follows probability; re-sort each row by id
        return _sort_rows(idx, mask)
    if mode != "stochastic":
        raise ValueError(f"unknown sampling mode {mode!r}")
    for node in range(n):
        a, b = merged.indptr[node], merged.indptr[node + 1]
        m = b - a
        if m == 0:
            continue
        if m <= K:
            pick = np.arange(m)
        else:
            z = logits[a:b] - logits[a:b].max()
            p = np.exp(z) / np.exp(z).sum()
            pick = np.sort(np.random.default_rng(entity_seed(rng_seed, node)).choice(m, size=K, replace=False, p=p))
        idx[node, : len(pick)] = dst[a + pick]
        mask[node, : len(pick)] = True
    return idx, mask


def random_table(merged, K: int, rng_seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    n = merged.num_nodes
    idx = np.zeros((n, K), dtype=np.int64)
    mask = np.zeros((n, K), dtype=bool)
    for node in range(n):
        sub = random_sample_neighborhood(node, merged, K, rng_seed)
        idx[node, : len(sub)] = sub.neighbor_ids
        mask[node, : len(sub)] = True
    return idx, mask


def full_table(merged) -> tuple[np.ndarray, np.ndarray]:
    """Every neighbor of every node, padded to the maximum degree."""
    deg = np.diff(merged.indptr)
    width = max(int(deg.max()) if len(deg) else 0, 1)
    idx = np.zeros((merged.num_nodes, width), dtype=np.int64)
    mask = np.arange(width)[None, :] < deg[:, None]
    idx[mask] = merged.indices
    return idx, mask


def _sort_rows(idx: np.ndarray, mask: np.ndarray):
    key = np.where(mask, idx, np.iinfo(np.int64).max)
    order = np.argsort(key, axis=1, kind="stable")
    return np.take_along_axis(idx, order, 1), np.take_along_axis(mask, order, 1)


def candidate_table(h: torch.Tensor, sources: np.ndarray, pool: np.ndarray, t: int,
                    chunk: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Top-``t`` L1-nearest pool nodes for each source node (``select_candidates`` in bulk)."""
    pool = np.sort(np.asarray(pool, dtype=np.int64))
    sources = np.asarray(sources, dtype=np.int64)
    t = min(t, len(pool))
    hd = h.detach()
    hp = hd[torch.from_numpy(pool)]
    out_idx = np.zeros((len(sources), t), dtype=np.int64)
    out_dist = np.zeros((len(sources), t))
    for s in range(0, len(sources), chunk):
        src = hd[torch.from_numpy(sources[s:s + chunk])]
        dist = torch.cdist(src, hp, p=1).numpy()
        # stable argsort keeps ascending pool order (smaller node) on ties
        order = np.argsort(dist, axis=1, kind="stable")[:, :t]
        out_idx[s:s + chunk] = pool[order]
        out_dist[s:s + chunk] = np.take_along_axis(dist, order, 1)
    return out_idx, out_dist
