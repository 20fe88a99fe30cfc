"""Objectives, negative generation and the two-phase training schedule.

Phase one trains the encoder alone on an L1 margin loss over nearest-neighbor
negatives until validation Hits@1 stops improving. Phase two trains the
encoder and the aggregation weights on matching distances against candidate
negatives, and every ``ws_interval`` epochs runs a short round that updates
only the sampler weight ``W_s``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .config import TrainConfig
from .encoder import encode
from .errors import DimensionError, TrainingError
from .evaluation import InferenceContext, rank_nodes
from .kg import Dataset, MergedGraph, split_alignments
from .matching import MatchParams, _attend, pair_distances
from .model import ModelParams
from .neighborhood import candidate_table, random_table, sample_table

logger = logging.getLogger(__name__)

Pairs = Sequence[tuple[int, int]]


# ---------------------------------------------------------------------------
# data


@dataclass
class TrainingData:
    """Node-index pairs for one run, plus the merged graph."""

    merged: MergedGraph
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray

    @classmethod
    def from_dataset(cls, ds: Dataset, config: TrainConfig, merged: MergedGraph | None = None) -> "TrainingData":
        merged = merged if merged is not None else ds.merged()
        split = split_alignments(ds.gold, config.split_fraction, config.seed)
        train = list(split.train_pairs)
        n_valid = int(math.floor(config.validation_fraction * len(train) + 1e-9))
        if config.validation_fraction > 0 and len(train) > 1:
            n_valid = max(n_valid, 1)
        valid, train = train[:n_valid], train[n_valid:]

        def nodes(pairs):
            if not pairs:
                return np.zeros((0, 2), dtype=np.int64)
            return np.array([(merged.node(1, a), merged.node(2, b)) for a, b in pairs], dtype=np.int64)

        return cls(merged, nodes(train), nodes(valid), nodes(split.test_pairs))


# ---------------------------------------------------------------------------
# pre-training objective


def pretrain_distance(h1, h2) -> torch.Tensor:
    h1, h2 = torch.as_tensor(h1, dtype=torch.float64), torch.as_tensor(h2, dtype=torch.float64)
    if h1.shape != h2.shape:
        raise DimensionError("embeddings must have equal length")
    return (h1 - h2).abs().sum(dim=-1)


def pretrain_loss(positives: Pairs, negatives: Pairs, embeddings, gamma: float) -> torch.Tensor:
    """Margin loss summed over every (positive, negative) combination."""
    if len(positives) == 0:
        raise ValueError("at least one positive pair is required")
    emb = torch.as_tensor(embeddings, dtype=torch.float64) if not isinstance(embeddings, torch.Tensor) else embeddings
    pos = np.asarray(positives, dtype=np.int64).reshape(-1, 2)
    neg = np.asarray(negatives, dtype=np.int64).reshape(-1, 2)
    d_pos = pretrain_distance(emb[pos[:, 0]], emb[pos[:, 1]])
    d_neg = pretrain_distance(emb[neg[:, 0]], emb[neg[:, 1]])
    return torch.relu(d_pos[:, None] - d_neg[None, :] + gamma).sum()


def _negative_arrays(positives: np.ndarray, h: torch.Tensor, merged: MergedGraph, n_neg: int):
    """Per positive: right substitutes (G2 nodes nearest the G1 entity) and left substitutes."""
    pos = np.asarray(positives, dtype=np.int64).reshape(-1, 2)

    def nearest(sources, exclude, pool):
        take = min(n_neg, len(pool) - 1)
        if take <= 0:
            return np.zeros((len(sources), 0), dtype=np.int64)
        cand, _ = candidate_table(h, sources, pool, take + 1)
        keep = cand != exclude[:, None]
        # drop the excluded node if present, otherwise the farthest candidate
        drop_last = keep.all(axis=1)
        keep[drop_last, -1] = False
        return cand[keep].reshape(len(sources), take)

    right = nearest(pos[:, 0], pos[:, 1], merged.side2_nodes)
    left = nearest(pos[:, 1], pos[:, 0], merged.side1_nodes)
    return right, left


def nearest_neighbor_negatives(positives: Pairs, embeddings, n_neg: int, merged: MergedGraph) -> list[tuple[int, int]]:
    """Nearest-neighbor corruptions of each positive node pair ``(i, j)``.

    For every positive, in order: ``(i, j')`` for the ``n_neg`` G2 nodes nearest
    to ``i`` other than ``j``, then ``(i', j)`` for the G1 nodes nearest to
    ``j`` other than ``i``. Distances are L1 on ``embeddings``; ties go to the
    smaller node index.
    """
    if n_neg < 1:
        raise ValueError("n_neg must be >= 1")
    emb = torch.as_tensor(embeddings, dtype=torch.float64) if not isinstance(embeddings, torch.Tensor) else embeddings
    pos = np.asarray(positives, dtype=np.int64).reshape(-1, 2)
    right, left = _negative_arrays(pos, emb, merged, n_neg)
    out = []
    for k, (i, j) in enumerate(pos):
        out.extend((int(i), int(jj)) for jj in right[k])
        out.extend((int(ii), int(j)) for ii in left[k])
    return out


def _grouped_margin(d_pos: torch.Tensor, d_neg: torch.Tensor, owner: np.ndarray, gamma: float) -> torch.Tensor:
    return torch.relu(d_pos[torch.from_numpy(owner)] - d_neg + gamma).sum()


def _pretrain_objective(h, positives, right, left, gamma):
    pos = torch.from_numpy(positives)
    d_pos = pretrain_distance(h[pos[:, 0]], h[pos[:, 1]])
    r = torch.from_numpy(right)
    l = torch.from_numpy(left)
    d_right = pretrain_distance(h[pos[:, 0]][:, None, :].expand(-1, r.shape[1], -1), h[r])
    d_left = pretrain_distance(h[l], h[pos[:, 1]][:, None, :].expand(-1, l.shape[1], -1))
    return (torch.relu(d_pos[:, None] - d_right + gamma).sum()
            + torch.relu(d_pos[:, None] - d_left + gamma).sum())


# ---------------------------------------------------------------------------
# main objective


def candidate_negatives(positives: np.ndarray, cand_right: np.ndarray, cand_left: np.ndarray):
    """Negative node pairs built from candidate sets, gold counterparts removed.

    ``cand_right[k]`` holds G2 candidates of the k-th positive's G1 entity and
    ``cand_left[k]`` the G1 candidates of its G2 entity. Returns
    ``(owner, left_nodes, right_nodes)``.
    """
    owner, lefts, rights = [], [], []
    for k, (r, t) in enumerate(np.asarray(positives).reshape(-1, 2)):
        c_r = [c for c in cand_right[k] if c != t]
        c_t = [c for c in cand_left[k] if c != r]
        if not c_r and not c_t:
            raise ValueError(f"empty candidate set for positive ({r}, {t})")
        for c in c_r:
            owner.append(k); lefts.append(r); rights.append(c)
        for c in c_t:
            owner.append(k); lefts.append(c); rights.append(t)
    return np.array(owner, dtype=np.int64), np.array(lefts, dtype=np.int64), np.array(rights, dtype=np.int64)


def main_loss(positives, model: ModelParams, merged: MergedGraph, candidate_sets, gamma: float,
              h: torch.Tensor | None = None, table=None, K: int = 5, matching: bool = True) -> torch.Tensor:
    """Margin loss on matching distances against candidate-set negatives.

    ``candidate_sets`` is ``(cand_right, cand_left)`` as for
    ``candidate_negatives``. ``h`` and the sampled-neighbor ``table`` are
    recomputed from ``model`` when omitted.
    """
    pos = np.asarray(positives, dtype=np.int64).reshape(-1, 2)
    if h is None:
        h = encode(merged, model.encoder)
    if table is None:
        table = sample_table(merged, h, model.sampler.W_s, K)
    owner, nl, nr = candidate_negatives(pos, *candidate_sets)
    d_pos = pair_distances(h, *table, pos[:, 0], pos[:, 1], model.match, matching)
    d_neg = pair_distances(h, *table, nl, nr, model.match, matching)
    return _grouped_margin(d_pos, d_neg, owner, gamma)


# ---------------------------------------------------------------------------
# sampler objective


def _soft_terms(h: torch.Tensor, merged: MergedGraph, positives: np.ndarray, match: MatchParams):
    """Per pair and side: (neighbor embeddings, gated projected neighbor rows).

    Everything here is independent of ``W_s``; the sampler objective only
    needs to re-weight the rows by the sampling probabilities.
    """
    terms = []
    with torch.no_grad():
        for r, t in np.asarray(positives).reshape(-1, 2):
            nr, nt = merged.neighbors(int(r)), merged.neighbors(int(t))
            hr, ht = h[nr], h[nt]
            if nr and nt:
                _, m_r = _attend(hr, ht)
                _, m_t = _attend(ht, hr)
            else:
                m_r, m_t = torch.zeros_like(hr), torch.zeros_like(ht)
            sides = []
            for emb, m in ((hr, m_r), (ht, m_t)):
                aug = torch.cat([emb, match.beta * m], dim=1)
                rows = (torch.sigmoid(aug @ match.W_gate) * aug) @ match.W_N
                sides.append((emb, rows))
            terms.append((int(r), int(t), sides))
    return terms


def _ws_objective(h: torch.Tensor, W_s: torch.Tensor, terms, d_g: int) -> torch.Tensor:
    total = W_s.new_zeros(())
    for r, t, ((emb_r, rows_r), (emb_t, rows_t)) in terms:
        g = []
        for center, emb, rows in ((r, emb_r, rows_r), (t, emb_t, rows_t)):
            if emb.shape[0] == 0:
                g.append(W_s.new_zeros(d_g))
            else:
                alpha = torch.softmax(emb @ (h[center] @ W_s), dim=0)
                g.append(alpha @ rows)
        total = total + (g[0] - g[1]).abs().sum()
    return total


def ws_loss(positives, model: ModelParams, merged: MergedGraph, h: torch.Tensor | None = None) -> torch.Tensor:
    """Sum over seed pairs of the L1 gap between probability-weighted neighborhood vectors.

    Uses every one-hop neighbor; only ``W_s`` receives a gradient.
    """
    if h is None:
        with torch.no_grad():
            h = encode(merged, model.encoder)
    h = h.detach()
    terms = _soft_terms(h, merged, np.asarray(positives), model.match)
    return _ws_objective(h, model.sampler.W_s, terms, model.match.d_g)


# ---------------------------------------------------------------------------
# schedule


def _optimizer(config: TrainConfig, tensors):
    if config.optimizer == "adam":
        return torch.optim.Adam(tensors, lr=config.lr)
    return torch.optim.SGD(tensors, lr=config.lr)


def _check_finite(loss: torch.Tensor, phase: str, epoch: int, batch: str = "all training pairs"):
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite {phase} loss at epoch {epoch}, batch {batch}: {float(loss.detach())}")


def _hits1_nodes(order: np.ndarray, pairs: np.ndarray) -> float:
    if len(pairs) == 0:
        return float("nan")
    return float(np.mean(order[:, 0] == pairs[:, 1]))


def _pretrain_hits(h: torch.Tensor, merged: MergedGraph, pairs: np.ndarray) -> float:
    if len(pairs) == 0:
        return float("nan")
    with torch.no_grad():
        cand, _ = candidate_table(h, pairs[:, 0], merged.side2_nodes, 1)
    return float(np.mean(cand[:, 0] == pairs[:, 1]))


def _table(config: TrainConfig, merged, h, model, epoch):
    if config.sampling == "random":
        return random_table(merged, config.K, config.seed * 1_000_003 + epoch)
    return sample_table(merged, h, model.sampler.W_s, config.K)


@dataclass
class TrainResult:
    model: ModelParams
    log: list[dict]


def run_training(config: TrainConfig, data: TrainingData | Dataset, model: ModelParams | None = None,
                 log_sink: Callable[[dict], None] | None = None, chunk_pairs: int = 256) -> TrainResult:
    """Pre-train, then train on the matching objective with periodic sampler rounds."""
    if isinstance(data, Dataset):
        data = TrainingData.from_dataset(data, config)
    merged = data.merged
    if model is None:
        model = ModelParams.init(config, merged.features.shape[1])
    log: list[dict] = []

    def emit(entry):
        logger.debug("%s", entry)
        log.append(entry)
        if log_sink is not None:
            log_sink(entry)

    if config.max_epochs == 0:
        return TrainResult(model, log)
    if len(data.train) == 0:
        raise ValueError("no training pairs")

    model.requires_grad_(True)
    feats = torch.as_tensor(merged.features, dtype=model.encoder.gcn_weights[0].dtype)

    # phase one
    enc_params = model.encoder_tensors()
    opt = _optimizer(config, enc_params)
    best, stale = -1.0, 0
    right = left = None
    for epoch in range(1, config.max_epochs + 1):
        if (epoch - 1) % config.negative_refresh_epochs == 0:
            with torch.no_grad():
                right, left = _negative_arrays(data.train, encode(merged, model.encoder, feats),
                                               merged, config.negatives_per_positive)
        h = encode(merged, model.encoder, feats)
        loss = _pretrain_objective(h, data.train, right, left, config.gamma)
        _check_finite(loss, "pretrain", epoch)
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            hits = _pretrain_hits(encode(merged, model.encoder, feats), merged, data.valid)
        emit({"epoch": epoch, "phase": "pretrain", "loss": float(loss.detach()), "hits1_val": _json_float(hits),
              "ws_round": False})
        if len(data.valid) == 0:
            continue
        if hits > best:
            best, stale = hits, 0
        else:
            stale += 1
            if stale >= config.pretrain_patience:
                break

    # phase two
    main_params = enc_params + [model.match.W_gate, model.match.W_N]
    opt = _optimizer(config, main_params)
    ws_opt = _optimizer(config, [model.sampler.W_s])
    for epoch in range(1, config.max_epochs + 1):
        with torch.no_grad():
            h0 = encode(merged, model.encoder, feats)
        table = _table(config, merged, h0, model, epoch)
        if (epoch - 1) % config.negative_refresh_epochs == 0:
            cr, _ = candidate_table(h0, data.train[:, 0], merged.side2_nodes, config.t)
            cl, _ = candidate_table(h0, data.train[:, 1], merged.side1_nodes, config.t)
            owner, nl, nr = candidate_negatives(data.train, cr, cl)
        opt.zero_grad()
        h = encode(merged, model.encoder, feats)
        h_leaf = h.detach().requires_grad_(True)
        total = 0.0
        for s in range(0, len(data.train), chunk_pairs):
            sel = (owner >= s) & (owner < s + chunk_pairs)
            pos = data.train[s:s + chunk_pairs]
            d_pos = pair_distances(h_leaf, *table, pos[:, 0], pos[:, 1], model.match, config.matching)
            d_neg = pair_distances(h_leaf, *table, nl[sel], nr[sel], model.match, config.matching)
            loss = _grouped_margin(d_pos, d_neg, owner[sel] - s, config.gamma)
            _check_finite(loss, "main", epoch, f"training pairs {s}..{s + len(pos) - 1}")
            loss.backward()
            total += float(loss.detach())
        h.backward(h_leaf.grad)
        opt.step()
        hits = _main_hits(model, merged, data.valid, config, feats, epoch)
        emit({"epoch": epoch, "phase": "main", "loss": total, "hits1_val": _json_float(hits), "ws_round": False})

        if epoch % config.ws_interval == 0:
            with torch.no_grad():
                h_ws = encode(merged, model.encoder, feats)
            terms = _soft_terms(h_ws, merged, data.train, model.match)
            ws_total = float("nan")
            for _ in range(config.ws_steps):
                ws_opt.zero_grad()
                lw = _ws_objective(h_ws, model.sampler.W_s, terms, model.match.d_g)
                _check_finite(lw, "sampler", epoch)
                lw.backward()
                ws_opt.step()
                ws_total = float(lw.detach())
            emit({"epoch": epoch, "phase": "ws", "loss": ws_total, "hits1_val": None, "ws_round": True})

    model.requires_grad_(False)
    return TrainResult(model, log)


def _main_hits(model, merged, pairs, config, feats, epoch) -> float:
    if len(pairs) == 0:
        return float("nan")
    with torch.no_grad():
        h = encode(merged, model.encoder, feats)
        table = _table(config, merged, h, model, epoch)
        ctx = InferenceContext(merged, h, table[0], table[1], model.match, config.matching)
        order, _ = rank_nodes(ctx, pairs[:, 0], merged.side2_nodes, config.t)
    return _hits1_nodes(order, pairs)


def _json_float(x: float):
    return None if x != x else x


def write_log(log: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for entry in log:
            fh.write(json.dumps(entry, sort_keys=False) + "\n")
