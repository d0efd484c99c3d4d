"""Meta-path-guided embedding reconstruction over a frozen store.

Nothing here updates a parameter or writes to the store: a query is
answered purely by reweighting and combining the per-pair embeddings that
training froze. Two integration modes exist:

  * cascaded   elementwise product of the weighted step vectors along one
               meta-path, capturing the composed ("deeper") relation;
  * cumulative mean of the cascaded products of several meta-paths sharing
               a start type, capturing their union ("broader") semantics.

Steps beyond the first concern pairs that do not contain the anchor node's
type, so their vectors are relayed: the sampled top-k neighbors of the
previous step's nodes (of the joint type between the two steps) become the
bridge set, and the step vector is the bridge nodes' mean embedding scaled
by their mean pair weight. Pair weights are a softmax, per node, of
LeakyReLU(q . z) over the pairs under consideration; during path
reconstruction that softmax is restricted to the path's own pairs so a
query never touches off-path embeddings.
"""

from __future__ import annotations

import logging
from typing import Optional, Sequence

import numpy as np

from .graph import MetaPath, QueryPlan, TypePair
from .store import EmbeddingStore, StoreError

log = logging.getLogger(__name__)


def _leaky(x: float, slope: float) -> float:
    return x if x > 0 else slope * x


def pair_weights(store: EmbeddingStore, node: int,
                 restrict: Optional[Sequence[TypePair]] = None) -> dict[TypePair, float]:
    """Softmax weights over the pairs a node belongs to.

    ``restrict`` narrows (and renormalizes over) the candidate pairs; path
    reconstruction passes the path's own pairs here. Weights sum to 1.
    """
    t = store.type_of(node)
    candidates = [p for p in (restrict if restrict is not None else store.pairs())
                  if p.contains(t) and store.has_pair(p)]
    if not candidates:
        raise StoreError(f"node {node} (type {store.type_names[t]!r}) appears in no "
                         f"eligible trained pair")
    if store.uniform_pair_attention:
        return {p: 1.0 / len(candidates) for p in candidates}
    logits = np.array([_leaky(float(store.pair_attn @ store.vector(p, node)),
                              store.leaky_slope) for p in candidates])
    z = np.exp(logits - logits.max())
    z /= z.sum()
    return dict(zip(candidates, z))


def chain_step_vectors(store: EmbeddingStore, path: MetaPath, node: int) -> list[np.ndarray]:
    """The weighted per-step vectors whose elementwise product is the
    cascaded embedding of ``node`` along ``path``.

    Step 1 is the anchor's own weighted embedding; later steps are relayed
    through bridge nodes as described in the module docstring. An empty
    bridge set yields a zero step vector (and hence a zero product).
    """
    units = path.chain_units()
    chain_pairs = [step.pair for step in units]
    for p in chain_pairs:
        if not store.has_pair(p):
            raise StoreError(f"meta-path needs untrained pair {p.label(store.type_names)}")

    vectors: list[np.ndarray] = []
    bridge: list[int] = [node]
    for i, step in enumerate(units):
        if i == 0:
            beta = pair_weights(store, node, restrict=chain_pairs)[step.pair]
            vectors.append(beta * store.vector(step.pair, node))
            continue
        joint_type = step.src_type
        prev_pair = units[i - 1].pair
        nxt: set[int] = set()
        for b in bridge:
            nxt.update(n for n, _f in store.neighbor_list(prev_pair, b, joint_type))
        bridge = sorted(nxt)
        if not bridge:
            log.warning("empty bridge set at step %d of %s for node %d; "
                        "step vector is zero", i + 1,
                        path.render(store.type_names), node)
            vectors.append(np.zeros(store.dim))
            continue
        betas = [pair_weights(store, b, restrict=chain_pairs)[step.pair] for b in bridge]
        mean_emb = np.mean([store.vector(step.pair, b) for b in bridge], axis=0)
        vectors.append(float(np.mean(betas)) * mean_emb)
    return vectors


def cascaded_embedding(store: EmbeddingStore, path: MetaPath, node: int) -> np.ndarray:
    """Elementwise product of the chain's weighted step vectors."""
    out = None
    for vec in chain_step_vectors(store, path, node):
        out = vec.copy() if out is None else out * vec
    return out


def cumulative_embedding(store: EmbeddingStore, paths: Sequence[MetaPath],
                         node: int) -> np.ndarray:
    """Mean of the cascaded products over several meta-paths."""
    if not paths:
        raise StoreError("cumulative integration needs at least one meta-path")
    acc = None
    for path in paths:
        vec = cascaded_embedding(store, path, node)
        acc = vec if acc is None else acc + vec
    return acc / float(len(paths))


def plan_embedding(store: EmbeddingStore, plan: QueryPlan, node: int) -> np.ndarray:
    if plan.mode == "cascaded":
        return cascaded_embedding(store, plan.paths[0], node)
    return cumulative_embedding(store, plan.paths, node)


def plan_embedding_matrix(store: EmbeddingStore, plan: QueryPlan) -> tuple[np.ndarray, np.ndarray]:
    """Embeddings for every anchor-type node: (ids, matrix)."""
    anchor = plan.anchor_type
    ids = store.node_ids_of_type(anchor)
    mat = np.empty((len(ids), store.dim))
    for i, node in enumerate(ids):
        mat[i] = plan_embedding(store, plan, int(node))
    return ids, mat


def metapath_free_embedding(store: EmbeddingStore, node: int) -> np.ndarray:
    """Weighted sum of a node's embeddings across all of its pairs; the
    embedding used when no meta-path preference is given."""
    weights = pair_weights(store, node)
    out = np.zeros(store.dim)
    for p, w in weights.items():
        out += w * store.vector(p, node)
    return out


def metapath_free_matrix(store: EmbeddingStore, type_id: int) -> tuple[np.ndarray, np.ndarray]:
    ids = store.node_ids_of_type(type_id)
    mat = np.empty((len(ids), store.dim))
    for i, node in enumerate(ids):
        mat[i] = metapath_free_embedding(store, int(node))
    return ids, mat
