"""Quantized representation store and pattern-neighbor queries.

All searches are exact linear scans over squared distances between quantized
representations. Ties are broken by ascending entity id and the query
entity is never its own neighbor.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pretrain import RepresentationMatrix
from .quantizer import QuantizerModel

log = logging.getLogger("dqrec.index")


@dataclass
class RepStore:
    kind: str
    entities: np.ndarray  # internal ids, ascending
    latents: np.ndarray  # (N, L, b)
    codes: np.ndarray  # (N, L)
    z_hat: np.ndarray  # (N, d)
    timestamps: np.ndarray
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.entities)

    def row(self, entity: int) -> int:
        r = int(np.searchsorted(self.entities, entity))
        if r >= len(self.entities) or self.entities[r] != entity:
            raise KeyError(f"{self.kind} {entity} is not in the store")
        return r

    def __contains__(self, entity) -> bool:
        r = int(np.searchsorted(self.entities, entity))
        return r < len(self.entities) and self.entities[r] == entity


def build_rep_store(reps: RepresentationMatrix, quantizer: QuantizerModel, entities=None) -> RepStore:
    """Quantize each entity's latest representation.

    When ``entities`` is given, ids without a representation row are skipped
    and counted in ``RepStore.skipped``.
    """
    rows = reps.row_of()
    if entities is None:
        entities = reps.entities
    entities = np.asarray(entities, dtype=np.int64)
    present = np.array([int(e) in rows for e in entities], dtype=bool)
    skipped = int((~present).sum())
    if skipped:
        log.warning("%d %s entities have no representation and were skipped", skipped, reps.kind)
    entities = np.sort(entities[present])
    Z = reps.Z[[rows[int(e)] for e in entities]] if len(entities) else np.zeros((0, reps.Z.shape[1]))
    latents = quantizer.encode(Z)
    codes = quantizer.assign(latents)
    z_hat = quantizer.decode(codes)
    stamps = reps.timestamps[[rows[int(e)] for e in entities]] if len(entities) else np.zeros(0, np.int64)
    return RepStore(reps.kind, entities, latents, codes, z_hat, stamps, skipped)


def _top_k(dists: np.ndarray, ids: np.ndarray, k: int, exclude=None) -> np.ndarray:
    keep = ids != exclude if exclude is not None else np.ones(len(ids), dtype=bool)
    d, e = dists[keep], ids[keep]
    if k < len(d):
        # only the k smallest (plus ties at the cutoff) need a full ordering
        cut = np.partition(d, k - 1)[k - 1]
        sel = d <= cut
        d, e = d[sel], e[sel]
    order = np.lexsort((e, d))
    return e[order[:k]]


def explicit_neighbors(query_z_hat, store: RepStore, k: int, exclude: int | None = None) -> np.ndarray:
    """The ``k`` stored entities closest to ``query_z_hat`` (ties: ascending id)."""
    q = np.asarray(query_z_hat, dtype=np.float64)
    dists = ((store.z_hat - q) ** 2).sum(axis=1)
    return _top_k(dists, store.entities, k, exclude)


def latent_codeword(x_l, codebook, c_l: int) -> int:
    """Nearest codeword other than ``c_l`` (ties: lowest index)."""
    codebook = np.asarray(codebook, dtype=np.float64)
    if len(codebook) < 2:
        raise ValueError("a latent codeword needs at least two codewords")
    d = ((codebook - np.asarray(x_l, dtype=np.float64)) ** 2).sum(axis=1)
    d[c_l] = np.inf
    return int(np.argmin(d))


def latent_ids(latents, codes, quantizer: QuantizerModel) -> np.ndarray:
    """Per-layer latent semantic ids: row ``l`` swaps layer ``l`` for its runner-up."""
    L = quantizer.n_layers
    out = np.tile(np.asarray(codes, dtype=np.int64), (L, 1))
    for l in range(L):
        out[l, l] = latent_codeword(latents[l], quantizer.codebooks[l], int(codes[l]))
    return out


def latent_neighbors(entity: int, store: RepStore, quantizer: QuantizerModel, k: int) -> list[np.ndarray]:
    r = store.row(entity)
    lat = latent_ids(store.latents[r], store.codes[r], quantizer)
    return [explicit_neighbors(z, store, k, exclude=entity) for z in quantizer.decode(lat)]


@dataclass
class NeighborSet:
    entity: int
    explicit: np.ndarray
    latent: list[np.ndarray] = field(default_factory=list)

    @property
    def all(self) -> np.ndarray:
        return neighbor_union(self.explicit, self.latent, self.entity)

    def members(self, use_latent: bool = True) -> np.ndarray:
        return neighbor_union(self.explicit, self.latent if use_latent else [], self.entity)


def neighbor_union(explicit, latent, exclude: int | None = None) -> np.ndarray:
    """Sorted union of explicit and per-layer latent neighbors, without ``exclude``."""
    parts = [np.asarray(explicit, dtype=np.int64)] + [np.asarray(q, dtype=np.int64) for q in latent]
    u = np.unique(np.concatenate(parts)) if parts else np.zeros(0, np.int64)
    return u[u != exclude] if exclude is not None else u


def build_neighbor_cache(store: RepStore, quantizer: QuantizerModel, k: int, k_latent: int) -> dict[int, NeighborSet]:
    """Explicit and latent neighbors of every stored entity."""
    cache = {}
    for r, e in enumerate(store.entities):
        e = int(e)
        explicit = explicit_neighbors(store.z_hat[r], store, k, exclude=e)
        latent = latent_neighbors(e, store, quantizer, k_latent) if k_latent > 0 else []
        cache[e] = NeighborSet(e, explicit, latent)
    return cache


def save_neighbor_cache(cache: dict[int, NeighborSet], path, external_ids) -> None:
    """One row per (entity, neighbor, origin); origin is ``explicit`` or ``latent:<layer>``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["entity", "neighbor", "origin"])
        for e, ns in cache.items():
            for n in ns.explicit:
                w.writerow([external_ids[e], external_ids[n], "explicit"])
            for l, q in enumerate(ns.latent):
                for n in q:
                    w.writerow([external_ids[e], external_ids[n], f"latent:{l}"])


def load_neighbor_cache(path, external_ids, n_layers: int) -> dict[int, NeighborSet]:
    index = {x: k for k, x in enumerate(external_ids)}
    rows: dict[int, tuple[list[int], list[list[int]]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for ext_e, ext_n, origin in reader:
            e, n = index[ext_e], index[ext_n]
            explicit, latent = rows.setdefault(e, ([], [[] for _ in range(n_layers)]))
            if origin == "explicit":
                explicit.append(n)
            else:
                kind, _, layer = origin.partition(":")
                if kind != "latent":
                    raise ValueError(f"{path}: unknown origin {origin!r}")
                latent[int(layer)].append(n)
    return {e: NeighborSet(e, np.array(x, dtype=np.int64), [np.array(q, dtype=np.int64) for q in lat])
            for e, (x, lat) in rows.items()}
