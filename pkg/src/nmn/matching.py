"""Cross-graph neighborhood matching and gated aggregation.

The single-pair functions mirror the model one step at a time. The batched
``pair_representations`` computes the same quantities for many candidate
pairs at once and is what training and evaluation call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .encoder import glorot
from .errors import DimensionError
from .neighborhood import NeighborhoodSubgraph


@dataclass
class MatchParams:
    beta: float
    W_gate: torch.Tensor
    W_N: torch.Tensor

    @classmethod
    def init(cls, d: int = 300, d_g: int = 50, beta: float = 0.1, rng: np.random.Generator | None = None,
             dtype=torch.float64) -> "MatchParams":
        if beta < 0:
            raise ValueError("beta must be non-negative")
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(beta, glorot(rng, (2 * d, 2 * d), dtype), glorot(rng, (2 * d, d_g), dtype))

    @property
    def d_g(self) -> int:
        return self.W_N.shape[1]


@dataclass
class MatchedPair:
    left: NeighborhoodSubgraph
    right: NeighborhoodSubgraph
    attention_left_to_right: torch.Tensor
    attention_right_to_left: torch.Tensor
    matching_vectors_left: torch.Tensor
    matching_vectors_right: torch.Tensor
    distance: float | None = None


def _attend(h_a: torch.Tensor, h_b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    att = torch.softmax(h_a @ h_b.T, dim=1)
    # sum_q a_pq (h_p - h_q) == h_p - sum_q a_pq h_q since rows sum to one
    return att, h_a - att @ h_b


def cross_match(left: NeighborhoodSubgraph, right: NeighborhoodSubgraph) -> MatchedPair:
    hl, hr = left.neighbor_embeddings, right.neighbor_embeddings
    if len(left) == 0 or len(right) == 0:
        raise ValueError("cross_match needs two non-empty subgraphs")
    if hl.shape[1] != hr.shape[1]:
        raise DimensionError(f"embedding widths differ: {hl.shape[1]} vs {hr.shape[1]}")
    a_lr, m_l = _attend(hl, hr)
    a_rl, m_r = _attend(hr, hl)
    return MatchedPair(left, right, a_lr, a_rl, m_l, m_r)


def augment_neighbor(h_p, m_p, beta: float) -> torch.Tensor:
    h_p, m_p = torch.as_tensor(h_p, dtype=torch.float64), torch.as_tensor(m_p, dtype=torch.float64)
    if h_p.shape != m_p.shape:
        raise DimensionError("h_p and m_p must have equal length")
    return torch.cat([h_p, beta * m_p], dim=-1)


def _check_augmented(augmented: torch.Tensor, params: MatchParams):
    if augmented.ndim != 2 or augmented.shape[1] != params.W_gate.shape[0]:
        raise DimensionError(f"augmented rows must have width {params.W_gate.shape[0]}")


def aggregate_neighborhood(augmented, params: MatchParams) -> torch.Tensor:
    augmented = torch.as_tensor(augmented, dtype=params.W_gate.dtype)
    if augmented.numel() == 0:
        return params.W_N.new_zeros(params.d_g)
    _check_augmented(augmented, params)
    gated = torch.sigmoid(augmented @ params.W_gate) * augmented
    return gated.sum(dim=0) @ params.W_N


def soft_aggregate(all_augmented, alphas, params: MatchParams) -> torch.Tensor:
    """Probability-weighted version of ``aggregate_neighborhood`` over all neighbors."""
    all_augmented = torch.as_tensor(all_augmented, dtype=params.W_gate.dtype)
    alphas = torch.as_tensor(alphas, dtype=params.W_gate.dtype)
    if alphas.ndim != 1 or alphas.shape[0] != all_augmented.shape[0]:
        raise DimensionError("one weight per neighbor is required")
    if all_augmented.numel() == 0:
        return params.W_N.new_zeros(params.d_g)
    _check_augmented(all_augmented, params)
    gated = torch.sigmoid(all_augmented @ params.W_gate) * all_augmented
    return (alphas[:, None] * gated).sum(dim=0) @ params.W_N


def match_representation(g, h) -> torch.Tensor:
    return torch.cat([torch.as_tensor(g, dtype=torch.float64), torch.as_tensor(h, dtype=torch.float64)])


def pair_distance(a, b) -> torch.Tensor:
    a, b = torch.as_tensor(a, dtype=torch.float64), torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise DimensionError(f"representation lengths differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().sum(dim=-1)


def match_pair(h_left, h_right, left: NeighborhoodSubgraph, right: NeighborhoodSubgraph,
               params: MatchParams) -> tuple[torch.Tensor, torch.Tensor, MatchedPair | None]:
    """Matching-oriented representations of one entity pair, step by step.

    An empty subgraph on either side leaves the other side's matching
    vectors at zero; an empty side itself aggregates to the zero vector.
    """
    mp = None
    if len(left) and len(right):
        mp = cross_match(left, right)
        m_l, m_r = mp.matching_vectors_left, mp.matching_vectors_right
    else:
        m_l = torch.zeros_like(left.neighbor_embeddings)
        m_r = torch.zeros_like(right.neighbor_embeddings)
    aug_l = augment_neighbor(left.neighbor_embeddings, m_l, params.beta) if len(left) else torch.zeros(0)
    aug_r = augment_neighbor(right.neighbor_embeddings, m_r, params.beta) if len(right) else torch.zeros(0)
    rep_l = match_representation(aggregate_neighborhood(aug_l, params), h_left)
    rep_r = match_representation(aggregate_neighborhood(aug_r, params), h_right)
    if mp is not None:
        mp.distance = float(pair_distance(rep_l, rep_r).detach())
    return rep_l, rep_r, mp


# ---------------------------------------------------------------------------
# batched path


def _side(h, A, P, idx_self, mask_self, idx_other, mask_other, beta, W_N):
    H_s = h[idx_self]                                      # B,K,d
    H_o = h[idx_other]
    logits = H_s @ H_o.transpose(1, 2)                     # B,K,K
    logits = logits.masked_fill(~mask_other[:, None, :], float("-inf"))
    has_other = mask_other.any(dim=1)
    att = torch.softmax(logits.masked_fill(~has_other[:, None, None], 0.0), dim=2)
    att = att * has_other[:, None, None]
    m = H_s - att @ H_o                                    # zero where the other side is empty
    m = m * has_other[:, None, None]
    m_proj = (P[idx_self] - att @ P[idx_other]) * has_other[:, None, None]
    gate_logits = A[idx_self] + beta * m_proj
    gate = torch.sigmoid(gate_logits)
    d = h.shape[1]
    weight = mask_self[:, :, None].to(h.dtype)
    summed_h = (weight * gate[:, :, :d] * H_s).sum(dim=1)
    summed_m = (weight * gate[:, :, d:] * beta * m).sum(dim=1)
    return torch.cat([summed_h, summed_m], dim=1) @ W_N


def pair_representations(h: torch.Tensor, idx: np.ndarray, mask: np.ndarray, left_nodes, right_nodes,
                         params: MatchParams, matching: bool = True,
                         proj: tuple[torch.Tensor, torch.Tensor] | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Matching-oriented representations for pairs ``(left_nodes[b], right_nodes[b])``.

    ``idx``/``mask`` is a sampled-neighbor table over all nodes of the merged
    graph. With ``matching=False`` the neighborhood vector is the mean of the
    sampled neighbor embeddings projected by the first half of ``W_N``.
    ``proj`` may carry precomputed ``gate_projections(h, params)``.
    """
    left_nodes = torch.as_tensor(np.asarray(left_nodes), dtype=torch.long)
    right_nodes = torch.as_tensor(np.asarray(right_nodes), dtype=torch.long)
    il = torch.as_tensor(idx)[left_nodes]
    ir = torch.as_tensor(idx)[right_nodes]
    ml = torch.as_tensor(mask)[left_nodes]
    mr = torch.as_tensor(mask)[right_nodes]
    d = h.shape[1]
    if not matching:
        g_l = _mean_neighbors(h, il, ml) @ params.W_N[:d]
        g_r = _mean_neighbors(h, ir, mr) @ params.W_N[:d]
    else:
        A, P = proj if proj is not None else gate_projections(h, params)
        # P holds h W_bottom, so the gate sees beta * (h_p - sum_q a h_q) W_bottom
        g_l = _side(h, A, P, il, ml, ir, mr, params.beta, params.W_N)
        g_r = _side(h, A, P, ir, mr, il, ml, params.beta, params.W_N)
    return torch.cat([g_l, h[left_nodes]], dim=1), torch.cat([g_r, h[right_nodes]], dim=1)


def gate_projections(h: torch.Tensor, params: MatchParams) -> tuple[torch.Tensor, torch.Tensor]:
    d = h.shape[1]
    return h @ params.W_gate[:d], h @ params.W_gate[d:]


def _mean_neighbors(h, idx, mask):
    w = mask.to(h.dtype)
    count = w.sum(dim=1, keepdim=True).clamp(min=1.0)
    return (w[:, :, None] * h[idx]).sum(dim=1) / count


def pair_distances(h, idx, mask, left_nodes, right_nodes, params: MatchParams, matching: bool = True,
                   chunk: int = 4096) -> torch.Tensor:
    out = []
    left_nodes, right_nodes = np.asarray(left_nodes), np.asarray(right_nodes)
    proj = gate_projections(h, params) if matching and len(left_nodes) else None
    for s in range(0, len(left_nodes), chunk):
        rl, rr = pair_representations(h, idx, mask, left_nodes[s:s + chunk], right_nodes[s:s + chunk],
                                      params, matching, proj)
        out.append(pair_distance(rl, rr))
    if not out:
        return h.new_zeros(0)
    return torch.cat(out)
