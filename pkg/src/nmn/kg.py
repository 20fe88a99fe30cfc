"""Knowledge graphs, seed alignments and the merged two-graph input.

File formats (UTF-8, LF, tab separated)::

    ent_ids_{1,2}   <id>\\t<name>
    triples_{1,2}   <head>\\t<relation>\\t<tail>
    ref_ent_ids     <id in G1>\\t<id in G2>

Word vectors use the GloVe text layout: a token followed by ``dim``
space-separated floats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .errors import DimensionError, IntegrityError, ParseError

Triple = tuple[int, int, int]
Pair = tuple[int, int]


@dataclass
class KnowledgeGraph:
    entity_ids: set[int]
    entity_names: dict[int, str]
    relation_ids: set[int]
    triples: list[Triple]
    neighbor_index: dict[int, list[int]] = field(default_factory=dict)

    @classmethod
    def from_parts(cls, names: Mapping[int, str], triples: Iterable[Sequence[int]]) -> "KnowledgeGraph":
        names = {int(k): v for k, v in names.items()}
        triples = [(int(h), int(r), int(t)) for h, r, t in triples]
        ids = set(names)
        for h, _, t in triples:
            if h not in ids or t not in ids:
                raise IntegrityError(f"triple ({h}, ?, {t}) references an unknown entity")
        nbrs: dict[int, set[int]] = {i: set() for i in ids}
        for h, _, t in triples:
            if h != t:
                nbrs[h].add(t)
                nbrs[t].add(h)
        return cls(
            entity_ids=ids,
            entity_names=names,
            relation_ids={r for _, r, _ in triples},
            triples=triples,
            neighbor_index={i: sorted(s) for i, s in nbrs.items()},
        )

    @property
    def sorted_ids(self) -> list[int]:
        return sorted(self.entity_ids)

    def neighbors(self, entity: int) -> list[int]:
        try:
            return self.neighbor_index[entity]
        except KeyError:
            raise KeyError(f"entity {entity} is not in the graph") from None

    def row(self, entity: int) -> int:
        """Row of ``entity`` in matrices ordered by ascending entity id."""
        if not hasattr(self, "_rows"):
            self._rows = {e: i for i, e in enumerate(self.sorted_ids)}
        try:
            return self._rows[entity]
        except KeyError:
            raise KeyError(f"entity {entity} is not in the graph") from None

    def degree(self, entity: int) -> int:
        return len(self.neighbors(entity))


@dataclass
class SeedAlignments:
    train_pairs: list[Pair]
    test_pairs: list[Pair]
    split_fraction: float
    split_seed: int


def _read_fields(path: Path, nfields: int, int_fields: Sequence[int]):
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != nfields:
                raise ParseError(path, lineno, f"expected {nfields} tab-separated fields, got {len(parts)}")
            out = list(parts)
            for k in int_fields:
                try:
                    out[k] = int(parts[k])
                except ValueError:
                    raise ParseError(path, lineno, f"field {k + 1} is not an integer: {parts[k]!r}") from None
                if out[k] < 0:
                    raise ParseError(path, lineno, f"negative id {out[k]}")
            yield lineno, out


def read_entities(path) -> dict[int, str]:
    path = Path(path)
    names: dict[int, str] = {}
    for lineno, (eid, name) in _read_fields(path, 2, (0,)):
        if eid in names:
            raise IntegrityError(f"{path}:{lineno}: duplicate entity id {eid}")
        names[eid] = name
    return names


def read_triples(path) -> list[Triple]:
    return [tuple(f) for _, f in _read_fields(Path(path), 3, (0, 1, 2))]


def read_pairs(path) -> list[Pair]:
    return [tuple(f) for _, f in _read_fields(Path(path), 2, (0, 1))]


def load_kg(ent_ids_path, triples_path) -> KnowledgeGraph:
    names = read_entities(ent_ids_path)
    triples = read_triples(triples_path)
    try:
        return KnowledgeGraph.from_parts(names, triples)
    except IntegrityError as exc:
        raise IntegrityError(f"{triples_path}: {exc}") from None


def write_kg(kg: KnowledgeGraph, ent_ids_path, triples_path) -> None:
    with open(ent_ids_path, "w", encoding="utf-8", newline="\n") as fh:
        for eid in kg.sorted_ids:
            fh.write(f"{eid}\t{kg.entity_names[eid]}\n")
    with open(triples_path, "w", encoding="utf-8", newline="\n") as fh:
        for h, r, t in kg.triples:
            fh.write(f"{h}\t{r}\t{t}\n")


def write_pairs(pairs: Iterable[Pair], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for a, b in pairs:
            fh.write(f"{a}\t{b}\n")


def check_pairs(pairs: Sequence[Pair], g1: KnowledgeGraph, g2: KnowledgeGraph) -> None:
    seen1, seen2 = set(), set()
    for a, b in pairs:
        if a not in g1.entity_ids or b not in g2.entity_ids:
            raise IntegrityError(f"alignment pair ({a}, {b}) references an unknown entity")
        if a in seen1 or b in seen2:
            raise IntegrityError(f"entity occurs in more than one alignment pair: ({a}, {b})")
        seen1.add(a)
        seen2.add(b)


def split_alignments(pairs: Sequence[Pair], fraction: float = 0.3, seed: int = 0) -> SeedAlignments:
    """Seeded shuffle of the gold pairs; the first ``fraction`` become training seeds."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("split fraction must lie in (0, 1)")
    pairs = [tuple(p) for p in pairs]
    order = np.random.default_rng(seed).permutation(len(pairs))
    n_train = math.floor(fraction * len(pairs) + 1e-9)
    shuffled = [pairs[i] for i in order]
    return SeedAlignments(shuffled[:n_train], shuffled[n_train:], fraction, seed)


# ---------------------------------------------------------------------------
# word vectors and name features


def load_word_vectors(path, vocab: set[str] | None = None, dim: int | None = None) -> dict[str, np.ndarray]:
    """Read a GloVe-style text file, keeping only ``vocab`` tokens when given."""
    vectors: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").rstrip(" ").split(" ")
            if len(parts) < 2:
                continue
            if dim is None:
                dim = len(parts) - 1
            if len(parts) < dim + 1:
                raise ParseError(path, lineno, f"expected {dim} vector components")
            # some large vocabularies contain tokens with embedded spaces
            token = " ".join(parts[: len(parts) - dim])
            if vocab is not None and token not in vocab:
                continue
            try:
                vectors[token] = np.array(parts[-dim:], dtype=np.float64)
            except ValueError:
                raise ParseError(path, lineno, "non-numeric vector component") from None
    return vectors


def tokenize(name: str) -> list[str]:
    return name.lower().split()


def build_name_features(names: Mapping[int, str], word_vectors: Mapping[str, np.ndarray], dim: int | None = None) -> np.ndarray:
    """Average the in-vocabulary token vectors of each name.

    Rows follow ascending entity id. Names with no known token get a zero row.
    """
    if dim is None:
        dim = len(next(iter(word_vectors.values()))) if word_vectors else 0
    ids = sorted(names)
    out = np.zeros((len(ids), dim), dtype=np.float64)
    for row, eid in enumerate(ids):
        vecs = [word_vectors[tok] for tok in tokenize(names[eid]) if tok in word_vectors]
        if vecs:
            stacked = np.asarray(vecs, dtype=np.float64)
            if stacked.shape[1] != dim:
                raise DimensionError(f"word vector width {stacked.shape[1]} != {dim}")
            out[row] = stacked.mean(axis=0)
    return out


# ---------------------------------------------------------------------------
# merged graph


@dataclass
class MergedGraph:
    """Both KGs as one disjoint graph with self-loops.

    Entities are compacted to rows in ascending-id order; G1 occupies nodes
    ``[0, offset)`` and G2 occupies ``[offset, num_nodes)``.
    """

    num_nodes: int
    offset: int
    edges: np.ndarray
    norm_constants: np.ndarray
    features: np.ndarray
    side: np.ndarray
    ids1: np.ndarray
    ids2: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    _propagation: torch.Tensor | None = field(default=None, repr=False)

    def node(self, side: int, entity: int) -> int:
        ids = self.ids1 if side == 1 else self.ids2
        pos = int(np.searchsorted(ids, entity))
        if pos >= len(ids) or ids[pos] != entity:
            raise KeyError(f"entity {entity} not in G{side}")
        return pos if side == 1 else self.offset + pos

    def nodes(self, side: int, entities: Iterable[int]) -> np.ndarray:
        return np.array([self.node(side, e) for e in entities], dtype=np.int64)

    def entity(self, node: int) -> tuple[int, int]:
        if node < self.offset:
            return 1, int(self.ids1[node])
        return 2, int(self.ids2[node - self.offset])

    def neighbors(self, node: int) -> list[int]:
        if not 0 <= node < self.num_nodes:
            raise KeyError(f"node {node} is not in the merged graph")
        return self.indices[self.indptr[node]:self.indptr[node + 1]].tolist()

    def row(self, node: int) -> int:
        return node

    def degree(self, node: int) -> int:
        return int(self.indptr[node + 1] - self.indptr[node])

    @property
    def side1_nodes(self) -> np.ndarray:
        return np.arange(self.offset, dtype=np.int64)

    @property
    def side2_nodes(self) -> np.ndarray:
        return np.arange(self.offset, self.num_nodes, dtype=np.int64)

    def propagation(self, dtype=torch.float64) -> torch.Tensor:
        """Sparse row-normalised ``D^-1 (A + I)``."""
        if self._propagation is None or self._propagation.dtype != dtype:
            src = torch.from_numpy(self.edges[:, 0].copy())
            dst = torch.from_numpy(self.edges[:, 1].copy())
            vals = torch.from_numpy(1.0 / self.norm_constants[self.edges[:, 0]]).to(dtype)
            mat = torch.sparse_coo_tensor(
                torch.stack([src, dst]), vals, (self.num_nodes, self.num_nodes), check_invariants=True
            )
            self._propagation = mat.coalesce()
        return self._propagation


def merge_graphs(g1: KnowledgeGraph, g2: KnowledgeGraph, features1, features2) -> MergedGraph:
    features1 = np.asarray(features1, dtype=np.float64)
    features2 = np.asarray(features2, dtype=np.float64)
    if features1.ndim != 2 or features2.ndim != 2:
        raise DimensionError("feature matrices must be 2-D")
    if features1.shape[0] != len(g1.entity_ids) or features2.shape[0] != len(g2.entity_ids):
        raise DimensionError("feature rows must equal entity counts")
    if features1.shape[1] != features2.shape[1]:
        raise DimensionError(f"feature widths differ: {features1.shape[1]} vs {features2.shape[1]}")

    ids1 = np.array(g1.sorted_ids, dtype=np.int64)
    ids2 = np.array(g2.sorted_ids, dtype=np.int64)
    offset = len(ids1)
    n = offset + len(ids2)

    pairs = []
    for base, ids, kg in ((0, ids1, g1), (offset, ids2, g2)):
        for h, _, t in kg.triples:
            if h == t:
                continue
            a = base + int(np.searchsorted(ids, h))
            b = base + int(np.searchsorted(ids, t))
            pairs.append((a, b))
            pairs.append((b, a))
    und = np.unique(np.array(pairs, dtype=np.int64).reshape(-1, 2), axis=0)
    loops = np.repeat(np.arange(n, dtype=np.int64)[:, None], 2, axis=1)
    edges = np.concatenate([und, loops])
    edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]

    deg = np.bincount(und[:, 0], minlength=n) if len(und) else np.zeros(n, dtype=np.int64)
    indptr = np.concatenate([[0], np.cumsum(deg)]).astype(np.int64)
    indices = und[np.lexsort((und[:, 1], und[:, 0])), 1] if len(und) else np.zeros(0, dtype=np.int64)

    side = np.where(np.arange(n) < offset, 1, 2).astype(np.int8)
    return MergedGraph(
        num_nodes=n,
        offset=offset,
        edges=edges,
        norm_constants=(deg + 1).astype(np.float64),
        features=np.concatenate([features1, features2]),
        side=side,
        ids1=ids1,
        ids2=ids2,
        indptr=indptr,
        indices=indices,
    )


@dataclass
class Dataset:
    """A loaded alignment task: both KGs, gold pairs and (optionally) features."""

    g1: KnowledgeGraph
    g2: KnowledgeGraph
    gold: list[Pair]
    features1: np.ndarray | None = None
    features2: np.ndarray | None = None

    def merged(self) -> MergedGraph:
        if self.features1 is None or self.features2 is None:
            raise ValueError("dataset has no name features")
        return merge_graphs(self.g1, self.g2, self.features1, self.features2)


def load_dataset(directory, vectors_path=None, with_features: bool = True) -> Dataset:
    """Load a DBP15K-style directory.

    Name features come from ``vectors_path`` (default ``<dir>/vectors.txt``).
    """
    d = Path(directory)
    g1 = load_kg(d / "ent_ids_1", d / "triples_1")
    g2 = load_kg(d / "ent_ids_2", d / "triples_2")
    gold = read_pairs(d / "ref_ent_ids")
    check_pairs(gold, g1, g2)
    ds = Dataset(g1, g2, gold)
    if with_features:
        vpath = Path(vectors_path) if vectors_path else d / "vectors.txt"
        if not vpath.exists():
            raise FileNotFoundError(f"word-vector file not found: {vpath}")
        vocab = {tok for kg in (g1, g2) for name in kg.entity_names.values() for tok in tokenize(name)}
        vectors = load_word_vectors(vpath, vocab=vocab)
        if not vectors:
            raise IntegrityError(f"{vpath}: no entity-name token has a vector")
        ds.features1 = build_name_features(g1.entity_names, vectors)
        ds.features2 = build_name_features(g2.entity_names, vectors)
    return ds
