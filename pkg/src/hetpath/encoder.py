"""Node content encoding and per-type-pair neighbor aggregation.

The pipeline for one type pair runs in four stages, all differentiable:

  1. project every raw content vector into the shared d-dim space with a
     per-content-type affine map (featureless nodes get a learned per-node
     vector as their only slot);
  2. fuse a node's content slots with a bidirectional LSTM, taking the mean
     of the per-slot concatenated hidden states;
  3. encode each node's sampled neighbor sequence (walk-frequency order)
     with a second bidirectional LSTM, mean-pooled the same way, falling
     back to the node's own content encoding when it has no neighbors;
  4. soften the neighbor set with additive attention
     (LeakyReLU(u . [q_a ++ q_b]) logits, softmax over the neighbor list)
     and return the attention-weighted sum as the node's pair embedding.

Everything is batched over the pair's node set; per-node reference
versions of each stage are exposed for tests. The two concatenated LSTM
directions each use hidden size d/2 so stages 2-4 all live in d dims.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import HetGraph, TypePair, pair_nodes
from .sampling import NeighborTable

log = logging.getLogger(__name__)

_S_INIT = 3

_GATE_NAMES = ("wxi", "whi", "bi", "wxf", "whf", "bf",
               "wxg", "whg", "bg", "wxo", "who", "bo")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    embed_dim: int = 128
    leaky_slope: float = 0.01
    freeze_projections: bool = False
    uniform_neighbor_attention: bool = False   # ablation: attention -> plain mean
    uniform_pair_attention: bool = False       # ablation: pair weights -> uniform
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ConfigError(f"embed_dim must be even and >= 2, got {self.embed_dim}")


class ParamSet:
    """Named trainable tensors with a stable iteration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter {name!r}")
        t = Tensor(data, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, arr in snap.items():
            self._params[k].data[...] = arr


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class GateParams:
    """One LSTM direction: input/forget/candidate/output gate weights."""

    wxi: Tensor; whi: Tensor; bi: Tensor
    wxf: Tensor; whf: Tensor; bf: Tensor
    wxg: Tensor; whg: Tensor; bg: Tensor
    wxo: Tensor; who: Tensor; bo: Tensor

    @property
    def hidden(self) -> int:
        return self.bi.data.shape[0]


def _init_lstm(params: ParamSet, prefix: str, d_in: int, hidden: int,
               rng: np.random.Generator) -> None:
    for direction in ("fwd", "bwd"):
        for gate in ("i", "f", "g", "o"):
            params.add(f"{prefix}/{direction}/wx{gate}",
                       xavier(rng, d_in, hidden, (d_in, hidden)))
            params.add(f"{prefix}/{direction}/wh{gate}",
                       xavier(rng, hidden, hidden, (hidden, hidden)))
            params.add(f"{prefix}/{direction}/b{gate}", np.zeros(hidden))


def _gates(params: ParamSet, prefix: str, direction: str) -> GateParams:
    return GateParams(*(params[f"{prefix}/{direction}/{n}"] for n in _GATE_NAMES))


class Model:
    """All trainable state for one graph: projections, the two BiLSTMs,
    per-pair neighbor-attention vectors and the global pair-attention
    vector, plus learned vectors for featureless nodes."""

    def __init__(self, graph: HetGraph, pairs: list[TypePair], cfg: ModelConfig):
        self.cfg = cfg
        self.graph = graph
        self.pairs = list(pairs)
        self.params = ParamSet()
        d = cfg.embed_dim
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence((cfg.seed, _S_INIT))))

        # content projections, one affine map per content type
        dims: dict[int, int] = {}
        for slots in graph.content.values():
            for ctype, vec in slots:
                dims.setdefault(int(ctype), int(vec.shape[0]))
        self.content_dims = dict(sorted(dims.items()))
        for ctype, d_c in self.content_dims.items():
            self.params.add(f"proj/{ctype}/W", xavier(rng, d_c, d, (d_c, d)))
            self.params.add(f"proj/{ctype}/b", np.zeros(d))

        # learned vectors for featureless nodes, one table per node type
        self.featureless: dict[int, np.ndarray] = {}
        for t in sorted(graph.type_names):
            nodes = [int(n) for n in graph.nodes_of_type(t) if not graph.content.get(int(n))]
            if nodes:
                self.featureless[t] = np.array(nodes, dtype=np.int64)
                self.params.add(f"node_vecs/{graph.type_names[t]}",
                                xavier(rng, d, d, (len(nodes), d)))

        _init_lstm(self.params, "content_lstm", d, d // 2, rng)
        _init_lstm(self.params, "nbr_lstm", d, d // 2, rng)

        for pair in self.pairs:
            self.params.add(f"nbr_attn/{pair.label(graph.type_names)}",
                            xavier(rng, 2 * d, 1, (2 * d,)))
        self.params.add("pair_attn", xavier(rng, d, 1, (d,)))

    def trainable(self) -> dict[str, Tensor]:
        out = {}
        for name, t in self.params.items():
            if self.cfg.freeze_projections and name.startswith("proj/"):
                continue
            out[name] = t
        return out

    def projection(self, ctype: int) -> tuple[Tensor, Tensor]:
        key = f"proj/{ctype}/W"
        if key not in self.params:
            raise ConfigError(f"no projection map for content type {ctype}")
        return self.params[key], self.params[f"proj/{ctype}/b"]

    def content_gates(self, direction: str) -> GateParams:
        return _gates(self.params, "content_lstm", direction)

    def nbr_gates(self, direction: str) -> GateParams:
        return _gates(self.params, "nbr_lstm", direction)

    def nbr_attn(self, pair: TypePair) -> Tensor:
        return self.params[f"nbr_attn/{pair.label(self.graph.type_names)}"]

    def pair_attn(self) -> Tensor:
        return self.params["pair_attn"]

    def featureless_row(self, node: int) -> tuple[int, int]:
        t = int(self.graph.node_types[node])
        rows = self.featureless.get(t)
        if rows is None:
            raise ConfigError(f"node {node} has no content and no learned table")
        idx = int(np.searchsorted(rows, node))
        if idx >= len(rows) or rows[idx] != node:
            raise ConfigError(f"node {node} missing from learned table of type {t}")
        return t, idx


# ---------------------------------------------------------------------------
# LSTM machinery


def lstm_step(g: GateParams, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    i = ad.sigmoid(ad.add(ad.add(ad.matmul(x, g.wxi), ad.matmul(h, g.whi)), g.bi))
    f = ad.sigmoid(ad.add(ad.add(ad.matmul(x, g.wxf), ad.matmul(h, g.whf)), g.bf))
    gg = ad.tanh(ad.add(ad.add(ad.matmul(x, g.wxg), ad.matmul(h, g.whg)), g.bg))
    o = ad.sigmoid(ad.add(ad.add(ad.matmul(x, g.wxo), ad.matmul(h, g.who)), g.bo))
    c2 = ad.add(ad.mul(f, c), ad.mul(i, gg))
    h2 = ad.mul(o, ad.tanh(c2))
    return h2, c2


def masked_scan_mean(gates: GateParams, inputs: list[Tensor], mask: np.ndarray) -> Tensor:
    """Run one LSTM direction over per-position inputs and return the mean
    hidden state over valid (mask==1) positions; rows with no valid
    positions come out zero."""
    n = inputs[0].data.shape[0]
    hid = gates.hidden
    h = Tensor(np.zeros((n, hid)))
    c = Tensor(np.zeros((n, hid)))
    acc = Tensor(np.zeros((n, hid)))
    for t, x in enumerate(inputs):
        m = mask[:, t:t + 1]
        h2, c2 = lstm_step(gates, x, h, c)
        if m.min() >= 1.0:
            h, c = h2, c2
        else:
            h = ad.add(ad.cmul(h2, m), ad.cmul(h, 1.0 - m))
            c = ad.add(ad.cmul(c2, m), ad.cmul(c, 1.0 - m))
        acc = ad.add(acc, ad.cmul(h, m))
    counts = mask.sum(axis=1, keepdims=True)
    return ad.cmul(acc, 1.0 / np.maximum(counts, 1.0))


def _reverse_valid(idx: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-row reversal of the valid prefix; padding stays at the tail."""
    out = idx.copy()
    lengths = mask.sum(axis=1).astype(np.int64)
    for r, L in enumerate(lengths):
        out[r, :L] = idx[r, :L][::-1]
    return out


# ---------------------------------------------------------------------------
# per-pair static context


@dataclass
class PoolGroup:
    kind: str                      # "proj" | "learned"
    key: int                       # content type id | node type id
    rows: np.ndarray               # local node rows, in pool order
    data: Optional[np.ndarray] = None       # raw content matrix (proj)
    table_rows: Optional[np.ndarray] = None  # rows into node_vecs table (learned)


@dataclass
class PairContext:
    """Static indices for one pair: content slots, neighbor sequences, masks."""

    pair: TypePair
    local_ids: np.ndarray          # global ids, sorted
    groups: list[PoolGroup]
    slot_idx: np.ndarray           # (N, S) pool rows
    slot_idx_rev: np.ndarray
    slot_mask: np.ndarray          # (N, S) 0/1
    nbr_idx: np.ndarray            # (N, L) local rows
    nbr_idx_rev: np.ndarray
    nbr_mask: np.ndarray           # (N, L)
    neighbor_lists: dict[int, list[tuple[int, int]]] = field(default_factory=dict)

    @property
    def n_local(self) -> int:
        return len(self.local_ids)

    @property
    def max_nbrs(self) -> int:
        return self.nbr_idx.shape[1]

    def local_row(self, node: int) -> int:
        i = int(np.searchsorted(self.local_ids, node))
        if i >= len(self.local_ids) or self.local_ids[i] != node:
            raise KeyError(f"node {node} is not in pair {self.pair}")
        return i


def merged_neighbor_list(table: NeighborTable, node: int) -> list[tuple[int, int]]:
    """Union of the per-type top-k lists, frequency descending, ties by id."""
    entry = table.get(node, {})
    merged = [nc for lst in entry.values() for nc in lst]
    merged.sort(key=lambda nc: (-nc[1], nc[0]))
    return merged


def build_pair_context(graph: HetGraph, pair: TypePair, table: NeighborTable,
                       model: Model) -> PairContext:
    local_ids = pair_nodes(graph, pair)
    n = len(local_ids)
    local_of = {int(g): i for i, g in enumerate(local_ids)}

    # content pool: projected groups first (ascending content type), then
    # learned-vector groups (ascending node type)
    proj_members: dict[int, list[tuple[int, np.ndarray]]] = {}
    learned_members: dict[int, list[int]] = {}
    slots_of: list[list[tuple[str, int, int]]] = [[] for _ in range(n)]  # (kind, key, member#)
    for row, gid in enumerate(local_ids):
        slots = sorted(graph.content.get(int(gid), []), key=lambda cv: cv[0])
        if slots:
            for ctype, vec in slots:
                lst = proj_members.setdefault(int(ctype), [])
                slots_of[row].append(("proj", int(ctype), len(lst)))
                lst.append((row, vec))
        else:
            t = int(graph.node_types[gid])
            lst2 = learned_members.setdefault(t, [])
            slots_of[row].append(("learned", t, len(lst2)))
            lst2.append(row)

    groups: list[PoolGroup] = []
    offsets: dict[tuple[str, int], int] = {}
    offset = 0
    for ctype in sorted(proj_members):
        members = proj_members[ctype]
        offsets[("proj", ctype)] = offset
        groups.append(PoolGroup(kind="proj", key=ctype,
                                rows=np.array([r for r, _ in members], dtype=np.int64),
                                data=np.stack([v for _, v in members])))
        offset += len(members)
    for t in sorted(learned_members):
        rows = learned_members[t]
        offsets[("learned", t)] = offset
        table_rows = np.array([model.featureless_row(int(local_ids[r]))[1] for r in rows],
                              dtype=np.int64)
        groups.append(PoolGroup(kind="learned", key=t,
                                rows=np.array(rows, dtype=np.int64), table_rows=table_rows))
        offset += len(rows)

    max_slots = max(len(s) for s in slots_of)
    slot_idx = np.zeros((n, max_slots), dtype=np.int64)
    slot_mask = np.zeros((n, max_slots))
    for row, slots in enumerate(slots_of):
        for s, (kind, key, member) in enumerate(slots):
            slot_idx[row, s] = offsets[(kind, key)] + member
            slot_mask[row, s] = 1.0

    # neighbor sequences from the walk table
    lists: dict[int, list[tuple[int, int]]] = {}
    max_nbrs = 0
    for gid in local_ids:
        merged = merged_neighbor_list(table, int(gid))
        lists[int(gid)] = merged
        max_nbrs = max(max_nbrs, len(merged))
    nbr_idx = np.zeros((n, max_nbrs), dtype=np.int64)
    nbr_mask = np.zeros((n, max_nbrs))
    isolated = 0
    for row, gid in enumerate(local_ids):
        merged = lists[int(gid)]
        if not merged:
            isolated += 1
        for s, (nbr, _freq) in enumerate(merged):
            nbr_idx[row, s] = local_of[nbr]
            nbr_mask[row, s] = 1.0
    if isolated:
        log.warning("pair %s: %d node(s) have no sampled neighbors; their pair "
                    "embedding is the zero vector", pair.label(graph.type_names), isolated)

    return PairContext(pair=pair, local_ids=local_ids, groups=groups,
                       slot_idx=slot_idx,
                       slot_idx_rev=_reverse_valid(slot_idx, slot_mask),
                       slot_mask=slot_mask,
                       nbr_idx=nbr_idx,
                       nbr_idx_rev=_reverse_valid(nbr_idx, nbr_mask),
                       nbr_mask=nbr_mask,
                       neighbor_lists=lists)


# ---------------------------------------------------------------------------
# batched forward


def content_pool(model: Model, ctx: PairContext) -> Tensor:
    parts: list[Tensor] = []
    for group in ctx.groups:
        if group.kind == "proj":
            w, b = model.projection(group.key)
            parts.append(ad.add(ad.matmul(Tensor(group.data), w), b))
        else:
            tname = model.graph.type_names[group.key]
            parts.append(ad.gather_rows(model.params[f"node_vecs/{tname}"], group.table_rows))
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)


def content_embeddings(model: Model, ctx: PairContext) -> Tensor:
    """Stage 1+2: per-node content vectors for the whole pair, shape (N, d)."""
    pool = content_pool(model, ctx)
    fwd_in = [ad.gather_rows(pool, ctx.slot_idx[:, t]) for t in range(ctx.slot_idx.shape[1])]
    bwd_in = [ad.gather_rows(pool, ctx.slot_idx_rev[:, t]) for t in range(ctx.slot_idx.shape[1])]
    hf = masked_scan_mean(model.content_gates("fwd"), fwd_in, ctx.slot_mask)
    hb = masked_scan_mean(model.content_gates("bwd"), bwd_in, ctx.slot_mask)
    return ad.concat([hf, hb], axis=1)


def neighbor_encodings(model: Model, ctx: PairContext, hhat: Tensor) -> Tensor:
    """Stage 3: BiLSTM summary of each node's neighbor sequence, with the
    node's own content encoding as fallback for empty lists."""
    if ctx.max_nbrs == 0:
        return hhat
    fwd_in = [ad.gather_rows(hhat, ctx.nbr_idx[:, t]) for t in range(ctx.max_nbrs)]
    bwd_in = [ad.gather_rows(hhat, ctx.nbr_idx_rev[:, t]) for t in range(ctx.max_nbrs)]
    qf = masked_scan_mean(model.nbr_gates("fwd"), fwd_in, ctx.nbr_mask)
    qb = masked_scan_mean(model.nbr_gates("bwd"), bwd_in, ctx.nbr_mask)
    qn = ad.concat([qf, qb], axis=1)
    has = (ctx.nbr_mask.sum(axis=1, keepdims=True) > 0).astype(np.float64)
    if has.min() >= 1.0:
        return qn
    return ad.add(ad.cmul(qn, has), ad.cmul(hhat, 1.0 - has))


def attention_weights(model: Model, ctx: PairContext, q: Tensor) -> Optional[Tensor]:
    """Stage 4 logits+softmax; None in the uniform-attention ablation."""
    if model.cfg.uniform_neighbor_attention:
        return None
    d = model.cfg.embed_dim
    u = model.nbr_attn(ctx.pair)
    u_self = ad.reshape(ad.vslice(u, 0, d), (d, 1))
    u_nbr = ad.reshape(ad.vslice(u, d, 2 * d), (d, 1))
    s_self = ad.matmul(q, u_self)
    s_nbr = ad.matmul(q, u_nbr)
    cols = [ad.add(s_self, ad.gather_rows(s_nbr, ctx.nbr_idx[:, t]))
            for t in range(ctx.max_nbrs)]
    logits = ad.leaky_relu(ad.concat(cols, axis=1), model.cfg.leaky_slope)
    return ad.masked_softmax(logits, ctx.nbr_mask)


def unit_embedding_matrix(model: Model, ctx: PairContext) -> Tensor:
    """Full pipeline for one pair: the (N, d) embedding matrix, rows aligned
    with ``ctx.local_ids``. Nodes without sampled neighbors get zeros."""
    hhat = content_embeddings(model, ctx)
    q = neighbor_encodings(model, ctx, hhat)
    if ctx.max_nbrs == 0:
        return ad.cmul(q, 0.0)
    alpha = attention_weights(model, ctx, q)
    if alpha is None:
        counts = ctx.nbr_mask.sum(axis=1, keepdims=True)
        uniform = ctx.nbr_mask / np.maximum(counts, 1.0)
        out = None
        for t in range(ctx.max_nbrs):
            term = ad.cmul(ad.gather_rows(q, ctx.nbr_idx[:, t]), uniform[:, t:t + 1])
            out = term if out is None else ad.add(out, term)
        return out
    out = None
    for t in range(ctx.max_nbrs):
        term = ad.mul(ad.take_col(alpha, t), ad.gather_rows(q, ctx.nbr_idx[:, t]))
        out = term if out is None else ad.add(out, term)
    return out


# ---------------------------------------------------------------------------
# per-node reference ops (same cells, one row at a time; used by tests and
# worth keeping as executable documentation of the stages)


def project_content(slots: list[tuple[int, np.ndarray]], model: Model) -> list[tuple[int, Tensor]]:
    """Affine-project one node's raw content slots into d dims."""
    out = []
    for ctype, vec in sorted(slots, key=lambda cv: cv[0]):
        w, b = model.projection(int(ctype))
        h = ad.add(ad.matmul(Tensor(vec.reshape(1, -1)), w), b)
        out.append((int(ctype), h))
    return out


def aggregate_content(projected: list[Tensor], model: Model) -> Tensor:
    """BiLSTM fuse of one node's projected slots; (1, d)."""
    if not projected:
        raise ConfigError("aggregate_content needs at least one content slot")
    mask = np.ones((1, len(projected)))
    hf = masked_scan_mean(model.content_gates("fwd"), projected, mask)
    hb = masked_scan_mean(model.content_gates("bwd"), projected[::-1], mask)
    return ad.concat([hf, hb], axis=1)


def aggregate_neighbors(nbr_content: list[Tensor], model: Model, fallback: Tensor) -> Tensor:
    """BiLSTM summary of one node's neighbor content sequence; (1, d)."""
    if not nbr_content:
        return fallback
    mask = np.ones((1, len(nbr_content)))
    qf = masked_scan_mean(model.nbr_gates("fwd"), nbr_content, mask)
    qb = masked_scan_mean(model.nbr_gates("bwd"), nbr_content[::-1], mask)
    return ad.concat([qf, qb], axis=1)


def neighbor_attention(q_self: Tensor, q_nbrs: list[Tensor], u: Tensor,
                       slope: float = 0.01) -> tuple[np.ndarray, Tensor]:
    """Additive attention over one node's neighbor encodings.

    Returns the weights (numpy, sums to 1) and the weighted sum (1, d).
    """
    if not q_nbrs:
        log.warning("neighbor_attention on an empty neighbor list: zero embedding")
        return np.zeros(0), ad.cmul(q_self, 0.0)
    d = q_self.data.shape[1]
    u_self = ad.reshape(ad.vslice(u, 0, d), (d, 1))
    u_nbr = ad.reshape(ad.vslice(u, d, 2 * d), (d, 1))
    s_self = ad.matmul(q_self, u_self)
    cols = [ad.add(s_self, ad.matmul(qb, u_nbr)) for qb in q_nbrs]
    logits = ad.leaky_relu(ad.concat(cols, axis=1), slope)
    alpha = ad.softmax(logits, axis=1)
    out = None
    for t, qb in enumerate(q_nbrs):
        term = ad.mul(ad.take_col(alpha, t), qb)
        out = term if out is None else ad.add(out, term)
    return alpha.data.ravel().copy(), out
