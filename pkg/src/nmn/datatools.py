"""Dataset utilities: sparsification, statistics, synthetic pairs, degree gaps."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, IntegrityError
from .evaluation import DEFAULT_BUCKETS, bucket_index, bucket_labels
from .kg import KnowledgeGraph, Pair, write_kg, write_pairs


def kg_stats(kg: KnowledgeGraph) -> tuple[int, int, int]:
    return len(kg.entity_ids), len(kg.relation_ids), len(kg.triples)


def sparsify(kg: KnowledgeGraph, keep_fraction: float, seed: int = 0) -> KnowledgeGraph:
    """Keep a seeded uniform ``floor(keep_fraction * |T|)`` subset of the triples.

    Entities and relation ids are retained even if no triple uses them.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ConfigError("keep_fraction must lie in (0, 1]")
    n_keep = math.floor(keep_fraction * len(kg.triples) + 1e-9)
    chosen = np.sort(np.random.default_rng(seed).choice(len(kg.triples), size=n_keep, replace=False))
    out = KnowledgeGraph.from_parts(kg.entity_names, [kg.triples[i] for i in chosen])
    out.relation_ids = set(kg.relation_ids)
    return out


def degree_diff_distribution(g1: KnowledgeGraph, g2: KnowledgeGraph, gold_pairs: Sequence[Pair],
                             bucket_edges: Sequence[float] = DEFAULT_BUCKETS) -> list[dict]:
    """Histogram of ``|deg(e1) - deg(e2)|`` over gold pairs, buckets ``[lo, hi)``."""
    diffs = []
    for a, b in gold_pairs:
        if a not in g1.entity_ids or b not in g2.entity_ids:
            raise IntegrityError(f"gold pair ({a}, {b}) references an unknown entity")
        diffs.append(abs(g1.degree(a) - g2.degree(b)))
    which = bucket_index(np.array(diffs), bucket_edges)
    counts = np.bincount(which, minlength=len(bucket_edges)) if len(which) else np.zeros(len(bucket_edges), int)
    return [{"lo": lo, "hi": hi, "count": int(c)} for (lo, hi), c in zip(bucket_labels(bucket_edges), counts)]


@dataclass
class SyntheticPair:
    g1: KnowledgeGraph
    g2: KnowledgeGraph
    gold: list[Pair]
    features1: np.ndarray
    features2: np.ndarray

    def write(self, directory) -> None:
        """Write the pair in the dataset layout, with a word-vector file.

        Names are single tokens, so ``vectors.txt`` reproduces the features
        exactly through the name-averaging path.
        """
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_kg(self.g1, d / "ent_ids_1", d / "triples_1")
        write_kg(self.g2, d / "ent_ids_2", d / "triples_2")
        write_pairs(self.gold, d / "ref_ent_ids")
        with open(d / "vectors.txt", "w", encoding="utf-8", newline="\n") as fh:
            for kg, feats in ((self.g1, self.features1), (self.g2, self.features2)):
                for row, eid in enumerate(kg.sorted_ids):
                    fh.write(kg.entity_names[eid] + " " + " ".join(repr(float(x)) for x in feats[row]) + "\n")


PERTURBATIONS = ("none", "drop_edges", "noise")


def make_synthetic_pair(n: int, avg_degree: float = 6.0, perturb: str = "none", p: float = 0.0,
                        sigma: float = 0.0, seed: int = 0, dim: int = 300, num_relations: int = 10,
                        hub_fraction: float = 0.0, num_hubs: int = 5) -> SyntheticPair:
    """A seeded Erdős–Rényi KG and a relabeled, optionally perturbed copy.

    ``perturb="drop_edges"`` keeps ``floor((1 - p) |T1|)`` triples in G2;
    ``sigma`` adds Gaussian noise to G2's features (``perturb="noise"``
    requires ``sigma > 0``). ``hub_fraction`` rewires that share of each
    graph's triple endpoints, independently per graph, onto ``num_hubs``
    extra hub entities that are not part of the gold alignment.
    """
    if n < 2:
        raise ConfigError("n must be >= 2")
    if perturb not in PERTURBATIONS:
        raise ConfigError(f"unknown perturbation {perturb!r}")
    if perturb == "drop_edges" and not 0.0 <= p < 1.0:
        raise ConfigError("drop_edges needs 0 <= p < 1")
    if perturb != "drop_edges" and p != 0.0:
        raise ConfigError("p is only meaningful with perturb='drop_edges'")
    if sigma < 0 or (perturb == "noise" and sigma <= 0):
        raise ConfigError("sigma must be >= 0 (> 0 for perturb='noise')")
    if avg_degree < 0 or not 0.0 <= hub_fraction < 1.0 or num_hubs < 0:
        raise ConfigError("invalid degree or hub parameters")
    if hub_fraction > 0 and num_hubs == 0:
        raise ConfigError("hub_fraction > 0 needs num_hubs >= 1")

    rng = np.random.default_rng(seed)
    n_hubs = num_hubs if hub_fraction > 0 else 0
    q = min(avg_degree / (n - 1), 1.0)
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < q
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    flip = rng.random(len(edges)) < 0.5
    edges[flip] = edges[flip][:, ::-1]
    rels = rng.integers(0, num_relations, size=len(edges))
    base = [(int(h), int(r), int(t)) for (h, t), r in zip(edges, rels)]

    feats = rng.normal(size=(n + n_hubs, dim)) / math.sqrt(dim)

    def with_hubs(triples, hub_rng):
        if not n_hubs:
            return triples
        out = []
        for h, r, t in triples:
            if hub_rng.random() < hub_fraction:
                t = n + int(hub_rng.integers(n_hubs))
            out.append((h, r, t))
        return out

    t1 = with_hubs(base, np.random.default_rng([seed, 1]))
    names1 = {i: f"a{i}" for i in range(n + n_hubs)}
    g1 = KnowledgeGraph.from_parts(names1, t1)

    perm = rng.permutation(n)                        # G1 entity i -> G2 entity perm[i]
    relabel = np.concatenate([perm, np.arange(n, n + n_hubs)])
    t2 = [(int(relabel[h]), r, int(relabel[t])) for h, r, t in base]
    if perturb == "drop_edges":
        n_keep = math.floor((1.0 - p) * len(t2) + 1e-9)
        chosen = np.sort(rng.choice(len(t2), size=n_keep, replace=False))
        t2 = [t2[i] for i in chosen]
    t2 = with_hubs(t2, np.random.default_rng([seed, 2]))
    names2 = {i: f"b{i}" for i in range(n + n_hubs)}
    g2 = KnowledgeGraph.from_parts(names2, t2)

    features1 = feats.copy()
    features2 = np.empty_like(feats)
    features2[relabel] = feats
    if sigma > 0:
        features2 = features2 + rng.normal(scale=sigma / math.sqrt(dim), size=features2.shape)
    gold = [(i, int(perm[i])) for i in range(n)]
    return SyntheticPair(g1, g2, gold, features1, features2)
