"""Random walks with restart inside one type-pair subgraph, plus the
neighbor tables and skip-gram training triples derived from them.

Every random draw comes from a PCG64 stream keyed by
(seed, stream id, pair index, ...), so identical inputs give byte-identical
corpora, tables and triples, and walks could be generated in parallel per
start node without changing the result.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .graph import HetGraph, TypePair

log = logging.getLogger(__name__)

# stream ids for seed splitting
_S_WALK = 1
_S_NEG = 2


class SamplingError(ValueError):
    pass


@dataclass
class WalkConfig:
    """Walk, window and negative-sampling knobs.

    Defaults follow the usual skip-gram-on-graphs setup: window 5, walk
    length 30, 10 walks per node, 5 negatives. ``restart_prob`` and
    ``k_default`` are conventions, overridable per run.
    """

    restart_prob: float = 0.5
    walk_length: int = 30
    walks_per_node: int = 10
    window: int = 5
    negatives: int = 5
    k_default: int = 10
    k_per_type: dict[int, int] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.restart_prob < 1.0):
            raise SamplingError(f"restart_prob must be in [0, 1), got {self.restart_prob}")
        if self.walk_length < 1 or self.window < 1 or self.negatives < 1:
            raise SamplingError("walk_length, window and negatives must all be >= 1")
        if self.k_default < 1 or any(k < 1 for k in self.k_per_type.values()):
            raise SamplingError("top-k neighbor counts must be >= 1")

    def k_for(self, type_id: int) -> int:
        return self.k_per_type.get(type_id, self.k_default)


@dataclass
class WalkCorpus:
    """All walks of one type-pair subgraph, ordered by (start node, walk index)."""

    pair: TypePair
    walks: list[tuple[int, np.ndarray]]  # (start node, node-id sequence)

    def visit_counts(self, num_nodes: int) -> np.ndarray:
        counts = np.zeros(num_nodes, dtype=np.int64)
        for _start, w in self.walks:
            np.add.at(counts, w, 1)
        return counts


# table[node][type_id] -> list of (neighbor, visit frequency), freq desc, id asc
NeighborTable = dict[int, dict[int, list[tuple[int, int]]]]


@dataclass
class TripleSet:
    """Skip-gram triples (center a, positive context b, negative b')."""

    pair: TypePair
    triples: np.ndarray  # (n, 3) int64

    def __len__(self) -> int:
        return int(self.triples.shape[0])


def run_walks(sub: HetGraph, pair: TypePair, cfg: WalkConfig,
              pair_index: int = 0) -> WalkCorpus:
    """Fixed-length walks with restart from every eligible node of the pair.

    At each step the walker returns to its start node with probability
    ``restart_prob`` (the restart consumes the step, so every walk has
    exactly ``walk_length`` entries), otherwise it moves uniformly to a
    neighbor. Degree-0 nodes are skipped with a warning.
    """
    if sub.num_edges == 0:
        raise SamplingError(f"subgraph of pair {pair} has no edges to walk on")
    adj = sub.adjacency()
    member = (sub.node_types == pair.first) | (sub.node_types == pair.second)
    starts = [n for n in np.where(member)[0] if len(adj[n]) > 0]
    skipped = int(member.sum()) - len(starts)
    if skipped:
        log.warning("pair %s: skipping %d degree-0 node(s) as walk starts",
                    pair.label(sub.type_names), skipped)

    p = cfg.restart_prob
    walks: list[tuple[int, np.ndarray]] = []
    for start in starts:
        nbrs = adj[start]
        for widx in range(cfg.walks_per_node):
            rng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence((cfg.seed, _S_WALK, pair_index, int(start), widx))))
            w = np.empty(cfg.walk_length, dtype=np.int64)
            w[0] = start
            cur = int(start)
            for t in range(1, cfg.walk_length):
                if p > 0 and rng.random() < p:
                    cur = int(start)
                else:
                    cur_nbrs = adj[cur] if cur != start else nbrs
                    cur = int(cur_nbrs[rng.integers(len(cur_nbrs))])
                w[t] = cur
            walks.append((int(start), w))
    return WalkCorpus(pair=pair, walks=walks)


def build_neighbor_table(corpus: WalkCorpus, sub: HetGraph, cfg: WalkConfig) -> NeighborTable:
    """Top-k most-visited nodes per (start node, node type).

    Counts are taken over the start node's own walks, the start node itself
    excluded; order is frequency descending, ties broken by ascending id.
    """
    if not corpus.walks:
        raise SamplingError("empty walk corpus")
    counts: dict[int, dict[int, int]] = {}
    for start, w in corpus.walks:
        bag = counts.setdefault(start, {})
        for node in w:
            node = int(node)
            if node == start:
                continue
            bag[node] = bag.get(node, 0) + 1

    table: NeighborTable = {}
    for start, bag in counts.items():
        by_type: dict[int, list[tuple[int, int]]] = {}
        for node, c in bag.items():
            by_type.setdefault(int(sub.node_types[node]), []).append((node, c))
        entry: dict[int, list[tuple[int, int]]] = {}
        for t, lst in by_type.items():
            lst.sort(key=lambda nc: (-nc[1], nc[0]))
            entry[t] = lst[: cfg.k_for(t)]
        table[start] = entry
    return table


def _negative_sampler(sub: HetGraph, pair: TypePair, counts: np.ndarray):
    """Per-type cumulative unigram^0.75 distributions over visited nodes."""
    samplers: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for t in set(pair.types()):
        members = np.where(sub.node_types == t)[0]
        if len(members) < 2:
            raise SamplingError(
                f"type {sub.type_names[t]!r} has a single node in pair "
                f"{pair.label(sub.type_names)}; negative sampling is impossible")
        weights = counts[members].astype(np.float64) ** 0.75
        total = weights.sum()
        if total <= 0:
            raise SamplingError(f"type {sub.type_names[t]!r} was never visited")
        samplers[t] = (members, np.cumsum(weights / total))
    return samplers


def _draw_negative(rng, members: np.ndarray, cum: np.ndarray, avoid: int) -> int:
    for _ in range(64):
        cand = int(members[np.searchsorted(cum, rng.random(), side="right")])
        if cand != avoid:
            return cand
    # distribution mass is (almost) all on `avoid`: fall back to uniform
    others = members[members != avoid]
    return int(others[rng.integers(len(others))])


def sample_triples(corpus: WalkCorpus, sub: HetGraph, cfg: WalkConfig,
                   pair_index: int = 0) -> TripleSet:
    """Skip-gram triples from all window co-occurrences in the corpus.

    For each walk position i and each j with 1 <= |j - i| <= window, the
    pair (w[i], w[j]) yields ``negatives`` triples; negatives are drawn from
    the unigram^0.75 distribution over visited nodes of w[j]'s type,
    excluding w[j] itself.
    """
    if not corpus.walks:
        raise SamplingError("empty walk corpus")
    counts = corpus.visit_counts(sub.num_nodes)
    samplers = _negative_sampler(sub, corpus.pair, counts)

    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence((cfg.seed, _S_NEG, pair_index))))
    out: list[tuple[int, int, int]] = []
    for _start, w in corpus.walks:
        n = len(w)
        for i in range(n):
            lo, hi = max(0, i - cfg.window), min(n, i + cfg.window + 1)
            for j in range(lo, hi):
                if j == i:
                    continue
                a, b = int(w[i]), int(w[j])
                members, cum = samplers[int(sub.node_types[b])]
                for _ in range(cfg.negatives):
                    out.append((a, b, _draw_negative(rng, members, cum, b)))
    return TripleSet(pair=corpus.pair,
                     triples=np.array(out, dtype=np.int64).reshape(-1, 3))


def positive_pairs(walk: np.ndarray, window: int) -> list[tuple[int, int]]:
    """All (center, context) pairs a walk contributes, in emission order."""
    n = len(walk)
    out = []
    for i in range(n):
        for j in range(max(0, i - window), min(n, i + window + 1)):
            if j != i:
                out.append((int(walk[i]), int(walk[j])))
    return out


def dump_corpus(corpus: WalkCorpus, path: str) -> None:
    """One walk per line, space-separated node ids."""
    with open(path, "w", encoding="utf-8") as f:
        for _start, w in corpus.walks:
            f.write(" ".join(str(int(x)) for x in w) + "\n")
