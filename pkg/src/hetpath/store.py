"""Frozen per-pair embedding store and its on-disk checkpoint container.

The store is everything reconstruction needs and nothing it can change:
one embedding matrix per type pair, the neighbor tables that drive relay
bridging, the pair-attention vector, and (for exact resume/inspection) the
trained model parameters. Arrays are marked read-only and every access is
counted per pair, which lets tests assert that answering a query touches
only the pairs on its meta-path and performs zero parameter updates.

Checkpoint layout (little-endian):

    8 bytes   magic ``HETPATH1``
    4 bytes   u32 container version
    8 bytes   u64 length of the JSON header
    ...       JSON header (config hash, seed, type map, tensor index)
    ...       tensor payloads, concatenated in index order

A ``<path>.manifest.json`` sidecar repeats the header plus a payload
checksum for human inspection. Nothing in either file depends on the
clock, so identical runs serialize byte-identically.
"""

from __future__ import annotations

import hashlib
import json
import struct
from typing import Optional

import numpy as np

from .graph import PathSchema, TypePair

MAGIC = b"HETPATH1"
VERSION = 1


class StoreError(ValueError):
    pass


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def _table_to_rows(table) -> np.ndarray:
    rows = []
    for node in sorted(table):
        for t in sorted(table[node]):
            for rank, (nbr, freq) in enumerate(table[node][t]):
                rows.append((node, t, rank, nbr, freq))
    return np.array(rows, dtype=np.int64).reshape(-1, 5)


def _rows_to_table(rows: np.ndarray):
    table: dict[int, dict[int, list[tuple[int, int]]]] = {}
    for node, t, _rank, nbr, freq in rows:
        table.setdefault(int(node), {}).setdefault(int(t), []).append((int(nbr), int(freq)))
    return table


class EmbeddingStore:
    """Read-only per-pair embeddings plus the machinery to weight them."""

    def __init__(self, dim: int, type_names: dict[int, str], node_types: np.ndarray,
                 embeddings: dict[TypePair, np.ndarray],
                 ids: dict[TypePair, np.ndarray],
                 tables: dict[TypePair, dict],
                 pair_attn: np.ndarray,
                 leaky_slope: float = 0.01,
                 uniform_pair_attention: bool = False,
                 config_hash: str = "",
                 seed: int = 0,
                 params: Optional[dict[str, np.ndarray]] = None):
        self.dim = int(dim)
        self.type_names = dict(type_names)
        self.node_types = _freeze(np.asarray(node_types, dtype=np.int64))
        self._emb = {p: _freeze(np.asarray(m, dtype=np.float64)) for p, m in embeddings.items()}
        self._ids = {p: _freeze(np.asarray(i, dtype=np.int64)) for p, i in ids.items()}
        self._tables = tables
        self.pair_attn = _freeze(np.asarray(pair_attn, dtype=np.float64))
        self.leaky_slope = float(leaky_slope)
        self.uniform_pair_attention = bool(uniform_pair_attention)
        self.config_hash = config_hash
        self.seed = int(seed)
        self.params = {k: _freeze(v) for k, v in (params or {}).items()}
        self.access_counts: dict[TypePair, int] = {p: 0 for p in self._emb}
        for p, m in self._emb.items():
            if m.shape[1] != self.dim:
                raise StoreError(f"pair {p} embedding dim {m.shape[1]} != store dim {self.dim}")
            if m.shape[0] != len(self._ids[p]):
                raise StoreError(f"pair {p}: {m.shape[0]} rows vs {len(self._ids[p])} ids")

    # -- lookups ------------------------------------------------------------

    def pairs(self) -> list[TypePair]:
        return sorted(self._emb)

    def has_pair(self, pair: TypePair) -> bool:
        return pair in self._emb

    def _require(self, pair: TypePair) -> None:
        if pair not in self._emb:
            raise StoreError(f"type pair {pair.label(self.type_names)} is not in the store")

    def embedding_matrix(self, pair: TypePair) -> np.ndarray:
        self._require(pair)
        self.access_counts[pair] += 1
        return self._emb[pair]

    def ids(self, pair: TypePair) -> np.ndarray:
        self._require(pair)
        return self._ids[pair]

    def row_of(self, pair: TypePair, node: int) -> int:
        ids = self.ids(pair)
        i = int(np.searchsorted(ids, node))
        if i >= len(ids) or ids[i] != node:
            raise StoreError(f"node {node} is not in pair {pair.label(self.type_names)}")
        return i

    def vector(self, pair: TypePair, node: int) -> np.ndarray:
        return self.embedding_matrix(pair)[self.row_of(pair, node)]

    def neighbor_list(self, pair: TypePair, node: int, type_id: int) -> list[tuple[int, int]]:
        self._require(pair)
        self.access_counts[pair] += 1
        return list(self._tables.get(pair, {}).get(node, {}).get(type_id, []))

    def pairs_of_type(self, type_id: int) -> list[TypePair]:
        return [p for p in self.pairs() if p.contains(type_id)]

    def node_ids_of_type(self, type_id: int) -> np.ndarray:
        return np.where(self.node_types == type_id)[0]

    def type_of(self, node: int) -> int:
        if node < 0 or node >= len(self.node_types):
            raise StoreError(f"unknown node id {node}")
        return int(self.node_types[node])

    def path_schema(self) -> PathSchema:
        return PathSchema(dict(self.type_names), set(self.pairs()))

    def reset_access_counts(self) -> None:
        for p in self.access_counts:
            self.access_counts[p] = 0

    def info(self) -> dict:
        return {
            "dim": self.dim,
            "nodes": int(len(self.node_types)),
            "pairs": {p.label(self.type_names): int(self._emb[p].shape[0])
                      for p in self.pairs()},
            "type_names": {str(k): v for k, v in sorted(self.type_names.items())},
            "uniform_pair_attention": self.uniform_pair_attention,
            "config_hash": self.config_hash,
            "seed": self.seed,
        }

    # -- serialization -------------------------------------------------------

    def _tensor_index(self) -> list[tuple[str, str, np.ndarray]]:
        tensors: list[tuple[str, str, np.ndarray]] = [
            ("node_types", "<i8", self.node_types),
            ("pair_attn", "<f8", self.pair_attn),
        ]
        for p in self.pairs():
            label = p.label(self.type_names)
            tensors.append((f"pair/{label}/ids", "<i8", self._ids[p]))
            tensors.append((f"pair/{label}/emb", "<f8", self._emb[p]))
            tensors.append((f"pair/{label}/nbrs", "<i8", _table_to_rows(self._tables.get(p, {}))))
        for name in sorted(self.params):
            tensors.append((f"param/{name}", "<f8", self.params[name]))
        return tensors

    def save(self, path: str) -> None:
        tensors = self._tensor_index()
        index = []
        payload = bytearray()
        for name, dtype, arr in tensors:
            blob = np.ascontiguousarray(arr).astype(dtype).tobytes()
            index.append({"name": name, "dtype": dtype,
                          "shape": list(arr.shape), "nbytes": len(blob)})
            payload.extend(blob)
        meta = {
            "version": VERSION,
            "dim": self.dim,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "leaky_slope": self.leaky_slope,
            "uniform_pair_attention": self.uniform_pair_attention,
            "type_names": {str(k): v for k, v in sorted(self.type_names.items())},
            "pairs": [[p.first, p.second] for p in self.pairs()],
            "tensors": index,
        }
        meta_blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", VERSION))
            f.write(struct.pack("<Q", len(meta_blob)))
            f.write(meta_blob)
            f.write(bytes(payload))
        manifest = dict(meta)
        manifest["payload_sha256"] = hashlib.sha256(bytes(payload)).hexdigest()
        with open(path + ".manifest.json", "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path: str) -> "EmbeddingStore":
        with open(path, "rb") as f:
            if f.read(8) != MAGIC:
                raise StoreError(f"{path} is not a checkpoint (bad magic)")
            (version,) = struct.unpack("<I", f.read(4))
            if version != VERSION:
                raise StoreError(f"unsupported checkpoint version {version}")
            (meta_len,) = struct.unpack("<Q", f.read(8))
            meta = json.loads(f.read(meta_len).decode())
            arrays: dict[str, np.ndarray] = {}
            for entry in meta["tensors"]:
                blob = f.read(entry["nbytes"])
                if len(blob) != entry["nbytes"]:
                    raise StoreError(f"truncated checkpoint: tensor {entry['name']}")
                arrays[entry["name"]] = np.frombuffer(blob, dtype=entry["dtype"]) \
                    .reshape(entry["shape"]).copy()

        type_names = {int(k): v for k, v in meta["type_names"].items()}
        embeddings: dict[TypePair, np.ndarray] = {}
        ids: dict[TypePair, np.ndarray] = {}
        tables: dict[TypePair, dict] = {}
        for a, b in meta["pairs"]:
            p = TypePair(int(a), int(b))
            label = p.label(type_names)
            embeddings[p] = arrays[f"pair/{label}/emb"]
            ids[p] = arrays[f"pair/{label}/ids"]
            tables[p] = _rows_to_table(arrays[f"pair/{label}/nbrs"])
        params = {name[len("param/"):]: arr for name, arr in arrays.items()
                  if name.startswith("param/")}
        return cls(dim=int(meta["dim"]), type_names=type_names,
                   node_types=arrays["node_types"], embeddings=embeddings, ids=ids,
                   tables=tables, pair_attn=arrays["pair_attn"],
                   leaky_slope=float(meta["leaky_slope"]),
                   uniform_pair_attention=bool(meta["uniform_pair_attention"]),
                   config_hash=meta["config_hash"], seed=int(meta["seed"]),
                   params=params)
