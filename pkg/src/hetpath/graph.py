"""Heterogeneous graph data model, file loaders and meta-path parsing.

A meta-path like "MAM" is decomposed into its length-1 units: canonical
unordered pairs of adjacent node types (``TypePair``). Those pairs are the
granularity at which embeddings are precomputed and later reused, so the
parser canonicalizes (A,M) and (M,A) to the same pair while remembering the
traversal orientation of each step.

File formats:
  * hgb        directory with ``node.dat`` (``id \\t name \\t type_id [\\t f,f,...]``),
               ``link.dat`` (``src \\t dst \\t rel_type [\\t weight]``) and an
               optional ``schema.dat`` mapping type ids to letters. Without a
               schema file, letters A, B, C... are assigned by ascending type id.
  * edge-list  single file: header ``#types A M D`` then
               ``src_id src_type dst_id dst_type`` lines.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

log = logging.getLogger(__name__)


class FormatError(ValueError):
    """Malformed input file (bad line syntax, duplicate ids...)."""


class SchemaError(ValueError):
    """Structurally invalid graph (dangling edges, unknown types...)."""


class PathError(ValueError):
    """Meta-path text that cannot be parsed or walked on the schema."""


@dataclass(frozen=True, order=True)
class TypePair:
    """Canonical unordered pair of node types connected by at least one edge.

    The minimal unit a meta-path decomposes into; embeddings are trained
    once per pair and reused across queries.
    """

    first: int
    second: int

    @staticmethod
    def of(a: int, b: int, type_names: dict[int, str]) -> "TypePair":
        # canonical order is lexicographic on the type labels
        if type_names[a] <= type_names[b]:
            return TypePair(a, b)
        return TypePair(b, a)

    def types(self) -> tuple[int, int]:
        return (self.first, self.second)

    def contains(self, t: int) -> bool:
        return t == self.first or t == self.second

    def label(self, type_names: dict[int, str]) -> str:
        return f"{type_names[self.first]}-{type_names[self.second]}"


@dataclass
class PathStep:
    """One unit of a meta-path: a canonical pair plus traversal orientation."""

    pair: TypePair
    src_type: int
    dst_type: int


@dataclass
class MetaPath:
    """An ordered node-type sequence plus its derived unit decomposition."""

    types: list[int]
    units: list[PathStep]
    delimited: bool = False

    def render(self, type_names: dict[int, str]) -> str:
        labels = [type_names[t] for t in self.types]
        if self.delimited or any(len(x) > 1 for x in labels):
            return "-".join(labels)
        return "".join(labels)

    def anchor_type(self) -> int:
        return self.types[0]

    def is_symmetric(self) -> bool:
        return self.types == self.types[::-1]

    def chain_units(self) -> list[PathStep]:
        """Units actually multiplied in a cascaded chain.

        Symmetric paths mirror their first half, so only the first
        ceil(n/2) units are kept, deduplicated on pair while preserving
        order. Asymmetric paths use every unit.
        """
        if self.is_symmetric():
            half = self.units[: (len(self.units) + 1) // 2]
            seen: set[TypePair] = set()
            out = []
            for step in half:
                if step.pair not in seen:
                    seen.add(step.pair)
                    out.append(step)
            return out
        return list(self.units)


@dataclass
class QueryPlan:
    """One cascaded path or a set of cumulative paths sharing a start type."""

    mode: str  # "cascaded" | "cumulative"
    paths: list[MetaPath]

    def __post_init__(self):
        if self.mode not in ("cascaded", "cumulative"):
            raise PathError(f"unknown integration mode {self.mode!r}")
        if not self.paths:
            raise PathError("a query plan needs at least one meta-path")
        if self.mode == "cascaded" and len(self.paths) != 1:
            raise PathError("cascaded mode takes exactly one meta-path")
        starts = {p.anchor_type() for p in self.paths}
        if len(starts) != 1:
            raise PathError("all meta-paths in a plan must share their start type")

    @property
    def anchor_type(self) -> int:
        return self.paths[0].anchor_type()


@dataclass
class PathSchema:
    """The minimum a meta-path parser needs: labels plus connected pairs."""

    type_names: dict[int, str]
    connected: set[TypePair]

    def type_of_label(self, label: str) -> int:
        for t, name in self.type_names.items():
            if name == label:
                return t
        raise PathError(f"unknown node type label {label!r}")


@dataclass
class HetGraph:
    """Immutable-after-load heterogeneous graph with per-node content."""

    node_types: np.ndarray                      # (N,) int type id per node id
    edges: np.ndarray                           # (E, 3) src, dst, relation type
    type_names: dict[int, str]                  # type id -> label
    content: dict[int, list[tuple[int, np.ndarray]]] = field(default_factory=dict)
    node_names: dict[int, str] = field(default_factory=dict)
    _adj: Optional[list[np.ndarray]] = field(default=None, repr=False)

    @property
    def num_nodes(self) -> int:
        return int(self.node_types.shape[0])

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    def nodes_of_type(self, t: int) -> np.ndarray:
        return np.where(self.node_types == t)[0]

    def neighbors(self, node: int) -> np.ndarray:
        """Neighbors under undirected traversal, sorted, duplicates kept out."""
        return self.adjacency()[node]

    def adjacency(self) -> list[np.ndarray]:
        if self._adj is None:
            buckets: list[list[int]] = [[] for _ in range(self.num_nodes)]
            for s, d, _r in self.edges:
                buckets[s].append(int(d))
                buckets[d].append(int(s))
            self._adj = [np.array(sorted(set(b)), dtype=np.int64) for b in buckets]
        return self._adj

    def validate(self) -> None:
        n = self.num_nodes
        if self.edges.size:
            bad = (self.edges[:, 0] >= n) | (self.edges[:, 0] < 0) | \
                  (self.edges[:, 1] >= n) | (self.edges[:, 1] < 0)
            if bad.any():
                i = int(np.where(bad)[0][0])
                raise SchemaError(f"edge {tuple(self.edges[i, :2])} has an undeclared endpoint")
        labels = list(self.type_names.values())
        if len(set(labels)) != len(labels):
            raise SchemaError(f"type labels are not unique: {labels}")
        n_rel = len(np.unique(self.edges[:, 2])) if self.edges.size else 0
        if len(self.type_names) <= 1 and n_rel <= 1:
            log.warning("graph is homogeneous (1 node type, <=1 relation type)")
        if self.num_edges == 0:
            log.warning("graph has no edges")

    def path_schema(self) -> PathSchema:
        return PathSchema(dict(self.type_names), connected_type_pairs(self))

    def summary(self) -> dict:
        per_type = {self.type_names[t]: int((self.node_types == t).sum())
                    for t in sorted(self.type_names)}
        return {"nodes": self.num_nodes, "edges": self.num_edges,
                "node_types": per_type,
                "pairs": [p.label(self.type_names) for p in sorted(connected_type_pairs(self))]}


# ---------------------------------------------------------------------------
# loading


def _parse_feature_blob(blob: str, lineno: int) -> np.ndarray:
    try:
        return np.array([float(x) for x in blob.split(",") if x != ""], dtype=np.float64)
    except ValueError as e:
        raise FormatError(f"node.dat line {lineno}: bad feature list: {e}") from None


def _load_hgb(path: str) -> HetGraph:
    node_file = os.path.join(path, "node.dat")
    link_file = os.path.join(path, "link.dat")
    schema_file = os.path.join(path, "schema.dat")
    if not os.path.exists(node_file) or not os.path.exists(link_file):
        raise FormatError(f"hgb format needs node.dat and link.dat under {path}")

    ids: dict[int, int] = {}
    names: dict[int, str] = {}
    content: dict[int, list[tuple[int, np.ndarray]]] = {}
    rows: list[tuple[int, int]] = []
    with open(node_file, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) not in (3, 4):
                raise FormatError(f"node.dat line {lineno}: expected 3 or 4 tab-separated "
                                  f"fields, got {len(parts)}")
            try:
                nid, tid = int(parts[0]), int(parts[2])
            except ValueError:
                raise FormatError(f"node.dat line {lineno}: non-integer id or type") from None
            if nid in ids:
                raise FormatError(f"node.dat line {lineno}: duplicate node id {nid}")
            ids[nid] = tid
            names[nid] = parts[1]
            if len(parts) == 4 and parts[3]:
                content[nid] = [(tid, _parse_feature_blob(parts[3], lineno))]
            rows.append((nid, tid))

    n = len(rows)
    if sorted(ids) != list(range(n)):
        raise FormatError(f"node ids are not dense 0..{n - 1}")
    node_types = np.zeros(n, dtype=np.int64)
    for nid, tid in rows:
        node_types[nid] = tid

    type_names: dict[int, str] = {}
    if os.path.exists(schema_file):
        with open(schema_file, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if len(parts) != 2:
                    raise FormatError(f"schema.dat line {lineno}: expected 'type_id label'")
                type_names[int(parts[0])] = parts[1]
    else:
        letters = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
        present = sorted(set(int(t) for t in node_types))
        if len(present) > len(letters):
            raise SchemaError("more node types than assignable letters; supply schema.dat")
        type_names = {t: letters[i] for i, t in enumerate(present)}
        log.info("no schema.dat: assigned letters %s", type_names)
    for t in np.unique(node_types):
        if int(t) not in type_names:
            raise SchemaError(f"node type id {int(t)} missing from schema")

    edges: list[tuple[int, int, int]] = []
    with open(link_file, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) not in (3, 4):
                raise FormatError(f"link.dat line {lineno}: expected 3 or 4 tab-separated "
                                  f"fields, got {len(parts)}")
            try:
                edges.append((int(parts[0]), int(parts[1]), int(parts[2])))
            except ValueError:
                raise FormatError(f"link.dat line {lineno}: non-integer field") from None

    g = HetGraph(node_types=node_types,
                 edges=np.array(edges, dtype=np.int64).reshape(-1, 3),
                 type_names=type_names, content=content, node_names=names)
    g.validate()
    _check_content_dims(g)
    return g


def _load_edge_list(path: str) -> HetGraph:
    type_names: dict[int, str] = {}
    label_to_id: dict[str, int] = {}
    node_types: dict[int, int] = {}
    edges: list[tuple[int, int, int]] = []
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip()
        if not header.startswith("#types"):
            raise FormatError("edge-list files must start with a '#types A M ...' header")
        for i, label in enumerate(header.split()[1:]):
            type_names[i] = label
            label_to_id[label] = i
        if not type_names:
            raise FormatError("'#types' header declares no types")
        for lineno, line in enumerate(f, 2):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise FormatError(f"line {lineno}: expected 'src src_type dst dst_type'")
            src, s_label, dst, d_label = parts
            for label in (s_label, d_label):
                if label not in label_to_id:
                    raise SchemaError(f"line {lineno}: unknown type label {label!r}")
            for nid, label in ((int(src), s_label), (int(dst), d_label)):
                tid = label_to_id[label]
                if node_types.setdefault(nid, tid) != tid:
                    raise SchemaError(f"line {lineno}: node {nid} redeclared with a new type")
            edges.append((int(src), int(dst), 0))

    n = len(node_types)
    if sorted(node_types) != list(range(n)):
        raise FormatError(f"node ids are not dense 0..{n - 1}")
    types_arr = np.zeros(n, dtype=np.int64)
    for nid, tid in node_types.items():
        types_arr[nid] = tid
    g = HetGraph(node_types=types_arr,
                 edges=np.array(edges, dtype=np.int64).reshape(-1, 3),
                 type_names=type_names)
    g.validate()
    return g


def _check_content_dims(g: HetGraph) -> None:
    dims: dict[int, int] = {}
    for nid, slots in g.content.items():
        for ctype, vec in slots:
            d = int(vec.shape[0])
            if dims.setdefault(ctype, d) != d:
                raise SchemaError(f"content type {ctype} has inconsistent dimensions "
                                  f"({dims[ctype]} vs {d} at node {nid})")


def load_graph(path: str, fmt: str = "hgb") -> HetGraph:
    """Load and validate a graph; reports node/edge counts on success."""
    if fmt == "hgb":
        g = _load_hgb(path)
    elif fmt == "edge-list":
        g = _load_edge_list(path)
    else:
        raise FormatError(f"unknown graph format {fmt!r}")
    log.info("loaded %s: %d nodes, %d edges, types %s",
             path, g.num_nodes, g.num_edges, sorted(g.type_names.values()))
    return g


# ---------------------------------------------------------------------------
# type pairs and meta-paths


def connected_type_pairs(g: HetGraph) -> list[TypePair]:
    """Every canonical type pair joined by at least one edge, sorted by label."""
    pairs: set[TypePair] = set()
    for s, d, _r in g.edges:
        pairs.add(TypePair.of(int(g.node_types[s]), int(g.node_types[d]), g.type_names))
    return sorted(pairs, key=lambda p: (g.type_names[p.first], g.type_names[p.second]))


def pair_subgraph(g: HetGraph, pair: TypePair) -> HetGraph:
    """Subgraph with exactly the pair's two node types and the edges between
    them; node ids are preserved."""
    if pair not in set(connected_type_pairs(g)):
        raise SchemaError(f"type pair {pair.label(g.type_names)} has no edges in this graph")
    t1, t2 = pair.types()
    src_t = g.node_types[g.edges[:, 0]]
    dst_t = g.node_types[g.edges[:, 1]]
    keep = ((src_t == t1) & (dst_t == t2)) | ((src_t == t2) & (dst_t == t1))
    content = {nid: slots for nid, slots in g.content.items()
               if pair.contains(int(g.node_types[nid]))}
    return HetGraph(node_types=g.node_types, edges=g.edges[keep].copy(),
                    type_names=g.type_names, content=content, node_names=g.node_names)


def pair_nodes(g: HetGraph, pair: TypePair) -> np.ndarray:
    """Sorted ids of the pair's member nodes."""
    mask = (g.node_types == pair.first) | (g.node_types == pair.second)
    return np.where(mask)[0]


def parse_meta_path(text: str, schema: PathSchema | HetGraph) -> MetaPath:
    """Parse meta-path text like "MAM" or "M-A-M" against a schema.

    Each adjacent label pair must be connected by at least one edge.
    """
    if isinstance(schema, HetGraph):
        schema = schema.path_schema()
    text = text.strip()
    if not text:
        raise PathError("empty meta-path")
    delimited = "-" in text
    labels = text.split("-") if delimited else list(text)
    if any(not x for x in labels):
        raise PathError(f"malformed meta-path text {text!r}")
    if len(labels) < 2:
        raise PathError(f"meta-path {text!r} needs at least two node types")

    types = [schema.type_of_label(x) for x in labels]
    units: list[PathStep] = []
    for a, b in zip(types, types[1:]):
        pair = TypePair.of(a, b, schema.type_names)
        if pair not in schema.connected:
            raise PathError(f"no edges connect types "
                            f"{schema.type_names[a]!r} and {schema.type_names[b]!r}")
        units.append(PathStep(pair=pair, src_type=a, dst_type=b))
    return MetaPath(types=types, units=units, delimited=delimited)


def path_reachable(g: HetGraph, start: int, path: MetaPath) -> set[int]:
    """All nodes reachable from ``start`` by walking the meta-path's full
    type sequence over actual edges. Brute-force; used as ground truth for
    retrieval and link evaluation."""
    if int(g.node_types[start]) != path.types[0]:
        raise PathError("start node is not of the path's anchor type")
    frontier = {start}
    for nxt in path.types[1:]:
        new: set[int] = set()
        for node in frontier:
            for nb in g.neighbors(node):
                if int(g.node_types[nb]) == nxt:
                    new.add(int(nb))
        frontier = new
        if not frontier:
            break
    frontier.discard(start)
    return frontier
