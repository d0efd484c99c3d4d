"""Negative-sampling training of the per-pair embeddings.

The objective is the standard skip-gram contrast: for each sampled triple
(center a, context b, negative b') minimize

    -[ log sigmoid(z_a . z_b) + log sigmoid(-z_a . z_b') ]

averaged over the batch, where z are the pair embeddings produced by the
encoder. All parameters are Xavier-initialized and optimized with Adam;
batches round-robin across the type pairs so they co-train; early stopping
watches a held-out 5% slice of the triples. After training the embeddings
of every pair are recomputed once from the best parameters and frozen into
an EmbeddingStore, so queries never rerun the encoder.

Every Adam application bumps a module-level counter; benchmarks read it to
prove that query-time reconstruction performs zero parameter updates.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .encoder import (Model, ModelConfig, PairContext, build_pair_context,
                      unit_embedding_matrix)
from .graph import HetGraph, connected_type_pairs, pair_subgraph
from .sampling import (TripleSet, WalkConfig, build_neighbor_table, run_walks,
                       sample_triples)
from .store import EmbeddingStore

log = logging.getLogger(__name__)

_S_SPLIT = 5
_S_SHUFFLE = 6


class TrainingError(RuntimeError):
    pass


class _UpdateCounter:
    """Global count of parameter updates, for retraining-free proofs."""

    def __init__(self):
        self.value = 0


PARAM_UPDATES = _UpdateCounter()


@dataclass
class TrainConfig:
    embed_dim: int = 128
    learning_rate: float = 0.01
    max_epochs: int = 200
    patience: int = 20
    batch_size: int = 512
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    val_fraction: float = 0.05
    leaky_slope: float = 0.01
    freeze_projections: bool = False
    disable_intra_attention: bool = False
    disable_inter_attention: bool = False

    def __post_init__(self):
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise TrainingError(f"embed_dim must be even and >= 2, got {self.embed_dim}")
        if self.learning_rate < 0:
            raise TrainingError("learning_rate must be >= 0")
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise TrainingError("max_epochs, patience and batch_size must be >= 1")
        if self.patience > self.max_epochs:
            raise TrainingError("patience cannot exceed max_epochs")
        if not (0.0 < self.val_fraction < 1.0):
            raise TrainingError("val_fraction must be in (0, 1)")

    def model_config(self) -> ModelConfig:
        return ModelConfig(embed_dim=self.embed_dim, leaky_slope=self.leaky_slope,
                           freeze_projections=self.freeze_projections,
                           uniform_neighbor_attention=self.disable_intra_attention,
                           uniform_pair_attention=self.disable_inter_attention,
                           seed=self.seed)


def negative_sampling_loss(zi: Tensor, triples: np.ndarray) -> Tensor:
    """Batch loss over triples given as local rows into ``zi``."""
    za = ad.gather_rows(zi, triples[:, 0])
    zb = ad.gather_rows(zi, triples[:, 1])
    zn = ad.gather_rows(zi, triples[:, 2])
    pos = ad.tsum(ad.mul(za, zb), axis=1)
    neg = ad.tsum(ad.mul(za, zn), axis=1)
    per_triple = ad.neg(ad.add(ad.log_sigmoid(pos), ad.log_sigmoid(ad.neg(neg))))
    return ad.mean(per_triple)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Standard Adam update with bias correction, applied in place."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1 - beta2) * (g * g)
        m_hat = state.m[name] / (1 - beta1 ** t)
        v_hat = state.v[name] / (1 - beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    PARAM_UPDATES.value += 1


@dataclass
class PairData:
    """Sampling artifacts for one pair, with triples mapped to local rows."""

    index: int
    ctx: PairContext
    table: dict
    train_triples: np.ndarray
    val_triples: np.ndarray
    corpus_walks: list


@dataclass
class TrainResult:
    store: EmbeddingStore
    model: Model
    pair_data: dict
    epochs_run: int
    train_losses: list[float]
    val_losses: list[float]
    best_epoch: int
    wall_seconds: float


def _to_local(ctx: PairContext, triples: np.ndarray) -> np.ndarray:
    out = np.searchsorted(ctx.local_ids, triples)
    if not np.array_equal(ctx.local_ids[out], triples):
        raise TrainingError("triple references a node outside its pair subgraph")
    return out.astype(np.int64)


def prepare_pairs(graph: HetGraph, model: Model, wcfg: WalkConfig,
                  tcfg: TrainConfig) -> dict:
    """Walk, tabulate and triple-sample every pair; split off validation."""
    data: dict = {}
    for index, pair in enumerate(model.pairs):
        sub = pair_subgraph(graph, pair)
        corpus = run_walks(sub, pair, wcfg, pair_index=index)
        table = build_neighbor_table(corpus, sub, wcfg)
        triples = sample_triples(corpus, sub, wcfg, pair_index=index).triples
        ctx = build_pair_context(graph, pair, table, model)
        local = _to_local(ctx, triples)

        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence((tcfg.seed, _S_SPLIT, index))))
        perm = rng.permutation(len(local))
        n_val = max(1, int(round(tcfg.val_fraction * len(local))))
        if n_val >= len(local):
            raise TrainingError(f"pair {pair}: too few triples ({len(local)}) to split")
        data[pair] = PairData(index=index, ctx=ctx, table=table,
                              train_triples=local[perm[n_val:]],
                              val_triples=local[perm[:n_val]],
                              corpus_walks=corpus.walks)
    return data


def _epoch_batches(data: dict, tcfg: TrainConfig, epoch: int) -> list[tuple]:
    """Round-robin batch schedule across pairs, shuffled per pair per epoch."""
    per_pair: dict = {}
    for pair, pd in data.items():
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence((tcfg.seed, _S_SHUFFLE, pd.index, epoch))))
        order = rng.permutation(len(pd.train_triples))
        per_pair[pair] = [pd.train_triples[order[i:i + tcfg.batch_size]]
                          for i in range(0, len(order), tcfg.batch_size)]
    schedule = []
    rounds = max(len(b) for b in per_pair.values())
    for r in range(rounds):
        for pair in sorted(per_pair):
            if r < len(per_pair[pair]):
                schedule.append((pair, per_pair[pair][r]))
    return schedule


def _forward_loss(model: Model, pd: PairData, triples: np.ndarray) -> Tensor:
    zi = unit_embedding_matrix(model, pd.ctx)
    return negative_sampling_loss(zi, triples)


def validation_loss(model: Model, data: dict) -> float:
    total, count = 0.0, 0
    for pair in sorted(data):
        pd = data[pair]
        loss = _forward_loss(model, pd, pd.val_triples)
        total += float(loss.data) * len(pd.val_triples)
        count += len(pd.val_triples)
    return total / count


def materialize_embeddings(model: Model, data: dict) -> dict:
    return {pair: unit_embedding_matrix(model, pd.ctx).data.copy()
            for pair, pd in data.items()}


def build_store(model: Model, data: dict, tcfg: TrainConfig,
                config_hash: str = "") -> EmbeddingStore:
    emb = materialize_embeddings(model, data)
    return EmbeddingStore(
        dim=tcfg.embed_dim,
        type_names=model.graph.type_names,
        node_types=model.graph.node_types,
        embeddings=emb,
        ids={pair: pd.ctx.local_ids for pair, pd in data.items()},
        tables={pair: pd.table for pair, pd in data.items()},
        pair_attn=model.pair_attn().data,
        leaky_slope=tcfg.leaky_slope,
        uniform_pair_attention=tcfg.disable_inter_attention,
        config_hash=config_hash,
        seed=tcfg.seed,
        params=model.params.snapshot(),
    )


def train(graph: HetGraph, tcfg: TrainConfig, wcfg: WalkConfig,
          config_hash: str = "") -> TrainResult:
    """Full training run; returns the frozen store plus diagnostics."""
    t0 = time.perf_counter()
    pairs = connected_type_pairs(graph)
    if not pairs:
        raise TrainingError("graph has no edges, nothing to train")
    model = Model(graph, pairs, tcfg.model_config())
    data = prepare_pairs(graph, model, wcfg, tcfg)
    trainable = model.trainable()
    state = AdamState()

    best_val = np.inf
    best_epoch = 0
    best_snapshot = model.params.snapshot()
    bad_epochs = 0
    train_losses: list[float] = []
    val_losses: list[float] = []
    epochs_run = 0

    for epoch in range(1, tcfg.max_epochs + 1):
        epochs_run = epoch
        epoch_loss, n_batches = 0.0, 0
        for pair, batch in _epoch_batches(data, tcfg, epoch):
            pd = data[pair]
            model.params.zero_grads()
            with Tape() as tape:
                loss = _forward_loss(model, pd, batch)
                tape.backward(loss)
            grads = {name: t.grad_or_zero() for name, t in trainable.items()}
            if not np.isfinite(loss.data):
                worst = max(float(np.max(np.abs(g))) for g in grads.values())
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {n_batches} "
                    f"(pair {pair.label(graph.type_names)}); max|grad| = {worst}")
            adam_step(trainable, grads, state, tcfg.learning_rate,
                      tcfg.beta1, tcfg.beta2, tcfg.eps)
            epoch_loss += float(loss.data)
            n_batches += 1
        train_losses.append(epoch_loss / max(n_batches, 1))

        val = validation_loss(model, data)
        val_losses.append(val)
        log.info("epoch %d: train loss %.6f, val loss %.6f", epoch,
                 train_losses[-1], val)
        if val < best_val:
            best_val = val
            best_epoch = epoch
            best_snapshot = model.params.snapshot()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= tcfg.patience:
                log.info("early stop at epoch %d (no improvement for %d epochs)",
                         epoch, bad_epochs)
                break

    model.params.restore(best_snapshot)
    store = build_store(model, data, tcfg, config_hash)
    return TrainResult(store=store, model=model, pair_data=data,
                       epochs_run=epochs_run, train_losses=train_losses,
                       val_losses=val_losses, best_epoch=best_epoch,
                       wall_seconds=time.perf_counter() - t0)


def model_from_store(graph: HetGraph, store: EmbeddingStore,
                     tcfg: TrainConfig) -> Model:
    """Rebuild a Model and load the checkpointed parameters into it."""
    model = Model(graph, connected_type_pairs(graph), tcfg.model_config())
    missing = [k for k in model.params.names() if k not in store.params]
    if missing:
        raise TrainingError(f"checkpoint lacks parameters: {missing[:3]}...")
    model.params.restore({k: store.params[k] for k in model.params.names()})
    return model
