"""Augmented dual-tower recommender.

Each side's tower input is four blocks::

    [ id embedding | semantic-id embedding | mean id embedding of history |
      mean id embedding of pattern neighbors ]

The ablation flags zero whole blocks; a zeroed block carries no gradient.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .augment import NeighborSet
from .data import NegativeSampler, SequenceStore, SplitDataset
from .metrics import evaluate, user_positives
from .nn import AdamState, Tower, adam_step, init_embedding, lookup_backward, mean_pool, mean_pool_backward
from .pretrain import PretrainModel, other
from .quantizer import QuantizerModel
from .ranking import bpr_loss, bpr_triplet, score  # noqa: F401  (re-exported)
from .tensorio import load_tensors, save_tensors

log = logging.getLogger("dqrec.train")


class TrainingDiverged(FloatingPointError):
    """Raised on a non-finite loss; carries the last parameters that were finite."""

    def __init__(self, message, last_good):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class Flags:
    user_feature: bool = True
    item_feature: bool = True
    user_linkage: bool = True
    item_linkage: bool = True
    latent_linkage: bool = True

    def feature(self, kind: str) -> bool:
        return self.user_feature if kind == "user" else self.item_feature

    def linkage(self, kind: str) -> bool:
        return self.user_linkage if kind == "user" else self.item_linkage


ALL_OFF = Flags(False, False, False, False, False)


class Side(NamedTuple):
    """Inputs of one tower for a batch: ids, semantic ids, history, neighbors."""

    ids: np.ndarray
    codes: np.ndarray  # (B, L)
    seq_idx: np.ndarray
    seq_mask: np.ndarray
    nb_idx: np.ndarray
    nb_mask: np.ndarray


def concat_sides(a: Side, b: Side) -> Side:
    width = max(a.nb_idx.shape[1], b.nb_idx.shape[1])

    def pad(x):
        return np.pad(x, ((0, 0), (0, width - x.shape[1])))

    return Side(np.concatenate([a.ids, b.ids]), np.concatenate([a.codes, b.codes]),
                np.concatenate([a.seq_idx, b.seq_idx]), np.concatenate([a.seq_mask, b.seq_mask]),
                np.concatenate([pad(a.nb_idx), pad(b.nb_idx)]), np.concatenate([pad(a.nb_mask), pad(b.nb_mask)]))


def semantic_feature_embedding(codes, tables) -> np.ndarray:
    """Concatenate row ``codes[..., l]`` of ``tables[l]`` over layers."""
    codes = np.asarray(codes, dtype=np.int64)
    for l, t in enumerate(tables):
        if codes[..., l].size and (codes[..., l].min() < 0 or codes[..., l].max() >= len(t)):
            raise IndexError(f"codeword index outside [0, {len(t)}) in layer {l}")
    return np.concatenate([t[codes[..., l]] for l, t in enumerate(tables)], axis=-1)


class RecModel:
    def __init__(self, params: dict[str, np.ndarray], n_layers: int, flags: Flags = Flags()):
        self.params = params
        self.n_layers = n_layers
        self.flags = flags

    @classmethod
    def init(cls, n_users: int, n_items: int, n_layers: int, codebook_size: int, rng: np.random.Generator,
             dim: int = 64, sem_dim: int = 16, hidden: int = 128, flags: Flags = Flags()) -> "RecModel":
        params = {"id.user": init_embedding(n_users, dim, rng), "id.item": init_embedding(n_items, dim, rng)}
        for kind in ("user", "item"):
            for l in range(n_layers):
                params[f"sem.{kind}.{l}"] = init_embedding(codebook_size, sem_dim, rng)
        in_dim = 3 * dim + n_layers * sem_dim
        for kind in ("user", "item"):
            params |= Tower.init([in_dim, hidden, dim], rng).params(f"tower.{kind}")
        return cls(params, n_layers, flags)

    def sem_tables(self, kind):
        return [self.params[f"sem.{kind}.{l}"] for l in range(self.n_layers)]

    def tower(self, kind) -> Tower:
        return Tower.from_params(self.params, f"tower.{kind}")

    def input_embedding(self, kind: str, side: Side) -> np.ndarray:
        ids_tab = self.params[f"id.{kind}"]
        B = len(side.ids)
        blocks = [ids_tab[side.ids]]
        sem_w = sum(t.shape[1] for t in self.sem_tables(kind))
        if self.flags.feature(kind):
            blocks.append(semantic_feature_embedding(side.codes, self.sem_tables(kind)))
        else:
            blocks.append(np.zeros((B, sem_w)))
        blocks.append(mean_pool(self.params[f"id.{other(kind)}"], side.seq_idx, side.seq_mask))
        if self.flags.linkage(kind):
            blocks.append(mean_pool(ids_tab, side.nb_idx, side.nb_mask))
        else:
            blocks.append(np.zeros((B, ids_tab.shape[1])))
        return np.concatenate(blocks, axis=1)

    def _input_backward(self, kind: str, side: Side, g, grads):
        dim = self.params[f"id.{kind}"].shape[1]
        lookup_backward(grads[f"id.{kind}"], side.ids, g[:, :dim])
        pos = dim
        for l, t in enumerate(self.sem_tables(kind)):
            w = t.shape[1]
            if self.flags.feature(kind):
                lookup_backward(grads[f"sem.{kind}.{l}"], side.codes[:, l], g[:, pos:pos + w])
            pos += w
        mean_pool_backward(grads[f"id.{other(kind)}"], side.seq_idx, side.seq_mask, g[:, pos:pos + dim])
        pos += dim
        if self.flags.linkage(kind):
            mean_pool_backward(grads[f"id.{kind}"], side.nb_idx, side.nb_mask, g[:, pos:pos + dim])

    def embed(self, kind: str, side: Side) -> np.ndarray:
        return self.tower(kind).forward(self.input_embedding(kind, side))[0]

    def loss_and_grads(self, user: Side, pos: Side, neg: Side):
        items = concat_sides(pos, neg)
        ut, it = self.tower("user"), self.tower("item")
        z_u, cu = ut.forward(self.input_embedding("user", user))
        z_i, ci = it.forward(self.input_embedding("item", items))
        b = len(user.ids)
        loss, g_u, g_pos, g_neg = bpr_triplet(z_u, z_i[:b], z_i[b:])
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        lg_u, ge_u = ut.backward(cu, g_u)
        lg_i, ge_i = it.backward(ci, np.concatenate([g_pos, g_neg]))
        grads |= Tower.grads_to_dict(lg_u, "tower.user") | Tower.grads_to_dict(lg_i, "tower.item")
        self._input_backward("user", user, ge_u, grads)
        self._input_backward("item", items, ge_i, grads)
        return loss, grads

    def save(self, path) -> None:
        flags = np.array([float(v) for v in asdict(self.flags).values()])
        save_tensors(path, self.params | {"meta.flags": flags, "meta.layers": np.array([self.n_layers])})

    @classmethod
    def load(cls, path) -> "RecModel":
        t = load_tensors(path)
        flags = Flags(*(bool(v) for v in t.pop("meta.flags")))
        n_layers = int(t.pop("meta.layers")[0])
        return cls(t, n_layers, flags)


class Context:
    """Frozen stage-1 artifacts turned into tower inputs.

    A sample at time ``t`` sees the last histories strictly before ``t``
    (``t=None`` means the full train history). With ``causal_ids`` the
    semantic ids are recomputed by the frozen pretrain tower and quantizer
    from that same truncated history; otherwise every sample uses the
    full-history ids the index stage stores. Neighbor sets come from the
    per-entity cache.
    """

    def __init__(self, seqs: SequenceStore, pretrain: PretrainModel, quantizers: dict[str, QuantizerModel],
                 caches: dict[str, dict[int, NeighborSet]], causal_ids: bool = False):
        self.seqs = seqs
        self.causal_ids = causal_ids
        self.pretrain = pretrain
        self.quantizers = quantizers
        self.caches = caches
        self._codes: dict[str, dict[tuple[int, int], np.ndarray]] = {"user": {}, "item": {}}
        self._nb: dict[tuple[str, bool], dict[int, np.ndarray]] = {}

    def semantic_ids(self, kind: str, ids, times=None) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        cache = self._codes[kind]
        if not self.causal_ids:
            times = None
        counts = [self.seqs.count_before(kind, int(e), None if times is None else int(times[r]))
                  for r, e in enumerate(ids)]
        keys = list(zip(ids.tolist(), counts))
        missing = sorted({k for k in keys if k not in cache})
        if missing:
            m_ids = np.array([e for e, _ in missing], dtype=np.int64)
            width = self.seqs.max_seq_len
            idx = np.zeros((len(missing), width), dtype=np.int64)
            mask = np.zeros((len(missing), width))
            for r, (e, c) in enumerate(missing):
                hist = self.seqs.history(kind, e)[0][max(0, c - width):c]
                idx[r, :len(hist)] = hist
                mask[r, :len(hist)] = 1.0
            z = self.pretrain.represent(kind, m_ids, idx, mask, np.array([c for _, c in missing]))
            for key, code in zip(missing, self.quantizers[kind].semantic_ids(z)):
                cache[key] = code
        return np.stack([cache[k] for k in keys]) if keys else np.zeros((0, self.quantizers[kind].n_layers), np.int64)

    def neighbors(self, kind: str, ids, use_latent: bool = True) -> tuple[np.ndarray, np.ndarray]:
        memo = self._nb.setdefault((kind, use_latent), {})
        rows = []
        for e in np.asarray(ids).tolist():
            if e not in memo:
                ns = self.caches[kind].get(e)
                memo[e] = ns.members(use_latent) if ns is not None else np.zeros(0, np.int64)
            rows.append(memo[e])
        width = max([len(r) for r in rows] + [1])
        idx = np.zeros((len(rows), width), dtype=np.int64)
        mask = np.zeros((len(rows), width))
        for r, nb in enumerate(rows):
            idx[r, :len(nb)] = nb
            mask[r, :len(nb)] = 1.0
        return idx, mask

    def side(self, kind: str, ids, times=None, flags: Flags = Flags()) -> Side:
        ids = np.asarray(ids, dtype=np.int64)
        seq_idx, seq_mask = self.seqs.padded(kind, ids, times)
        if flags.feature(kind):
            codes = self.semantic_ids(kind, ids, times)
        else:
            codes = np.zeros((len(ids), self.quantizers[kind].n_layers), dtype=np.int64)
        if flags.linkage(kind):
            nb_idx, nb_mask = self.neighbors(kind, ids, flags.latent_linkage)
        else:
            nb_idx, nb_mask = np.zeros((len(ids), 1), np.int64), np.zeros((len(ids), 1))
        return Side(ids, codes, seq_idx, seq_mask, nb_idx, nb_mask)


def build_input_embedding(kind: str, side: Side, model: RecModel) -> np.ndarray:
    return model.input_embedding(kind, side)


def tower_forward(e, tower: Tower):
    return tower.forward(e)[0]


def make_scorer(model: RecModel, ctx: Context):
    """``scorer(users, items)`` over full train histories, for :func:`evaluate`.

    Returns the dot products before the sigmoid: the ranking is the same,
    but saturated sigmoids would round distinct scores into ties.
    """
    def scorer(users, items):
        z_u = model.embed("user", ctx.side("user", users, None, model.flags))
        z_i = model.embed("item", ctx.side("item", items, None, model.flags))
        return z_u @ z_i.T

    return scorer


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 1024
    lr: float = 1e-3
    patience: int = 3
    eval_batch_size: int = 1024


def train(model: RecModel, split: SplitDataset, ctx: Context, config: TrainConfig, rng: np.random.Generator):
    """Minibatch Adam on BPR triplets with early stopping on validation Recall@10.

    Returns ``(model, history)``; the model holds the best-validation
    parameters. History rows are dicts with epoch, train loss and
    validation Recall@10 / NDCG@10.
    """
    tr = split.train
    sampler = NegativeSampler(tr)
    known = user_positives(split.train, split.valid, split.test)
    state = AdamState(lr=config.lr)
    history = []
    best, best_recall, bad = {k: v.copy() for k, v in model.params.items()}, -1.0, 0
    flags = model.flags
    for epoch in range(config.epochs):
        perm = rng.permutation(len(tr))
        neg = sampler.sample_batch(tr.users[perm], rng)
        total = 0.0
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start:start + config.batch_size]
            t = tr.timestamps[idx]
            user = ctx.side("user", tr.users[idx], t, flags)
            pos = ctx.side("item", tr.items[idx], t, flags)
            negs = ctx.side("item", neg[start:start + config.batch_size], t, flags)
            loss, grads = model.loss_and_grads(user, pos, negs)
            if not np.isfinite(loss):
                # parameters are untouched until adam_step, so they are the last good ones
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", model.params)
            adam_step(model.params, grads, state)
            total += loss * len(idx)
        row = {"epoch": epoch, "train_loss": total / len(perm)}
        if len(split.valid):
            rep = evaluate(make_scorer(model, ctx), split.valid, known, config.eval_batch_size, (10,))
            row |= {"valid_recall@10": rep.recall[10], "valid_ndcg@10": rep.ndcg[10]}
        else:
            row |= {"valid_recall@10": 0.0, "valid_ndcg@10": 0.0}
        history.append(row)
        log.info("epoch %d loss=%.5f valid_recall@10=%.4f", epoch, row["train_loss"], row["valid_recall@10"])
        if row["valid_recall@10"] > best_recall:
            best, best_recall, bad = {k: v.copy() for k, v in model.params.items()}, row["valid_recall@10"], 0
        else:
            bad += 1
            if bad >= config.patience:
                break
    model.params = best
    return model, history
