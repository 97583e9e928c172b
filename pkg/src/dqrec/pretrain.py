"""Feature-only dual tower that produces the representation matrices.

Neither tower ever sees an entity id: a user is described by its own
attribute embeddings and the mean attribute embedding of the items in its
recent history, and symmetrically for items.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import InteractionLog, NegativeSampler, SequenceStore, SplitDataset
from .nn import AdamState, Tower, adam_step, init_embedding, lookup_backward, mean_pool, mean_pool_backward
from .ranking import bpr_triplet
from .tensorio import load_tensors, save_tensors

log = logging.getLogger("dqrec.pretrain")

KINDS = ("user", "item")


def other(kind: str) -> str:
    return "item" if kind == "user" else "user"


@dataclass
class FeatureSchema:
    """Categorical feature families per entity kind.

    ``codes[kind]`` is ``(n_entities, n_families)``; code 0 is the unknown slot
    and ``vocab[kind][f]`` counts it. A family named ``popularity`` or
    ``activity`` is a log bucket of the interaction count; ``count_scale``
    holds the ``log1p`` of the largest train count so the bucket can be
    recomputed from a count observed at any time.
    """

    names: dict[str, list[str]]
    vocab: dict[str, list[int]]
    codes: dict[str, np.ndarray]
    count_scale: dict[str, float] = field(default_factory=dict)

    def n_families(self, kind: str) -> int:
        return len(self.names[kind])

    def count_family(self, kind: str) -> int | None:
        for f, name in enumerate(self.names[kind]):
            if name in COUNT_FAMILIES:
                return f
        return None

    def own_codes(self, kind: str, ids, counts=None) -> np.ndarray:
        """Codes of ``ids``; with ``counts`` the count bucket reflects those counts."""
        codes = self.codes[kind][ids]
        f = self.count_family(kind)
        if counts is None or f is None:
            return codes
        codes = codes.copy()
        codes[:, f] = bucket_codes(counts, self.count_scale[kind], self.vocab[kind][f] - 1)
        return codes

    def to_tensors(self) -> dict[str, np.ndarray]:
        return {f"codes.{k}": self.codes[k].astype(np.float64) for k in KINDS} | {
            f"vocab.{k}": np.asarray(self.vocab[k], dtype=np.float64) for k in KINDS} | {
            f"scale.{k}": np.array([self.count_scale.get(k, 0.0)]) for k in KINDS}

    @classmethod
    def from_tensors(cls, t, names) -> "FeatureSchema":
        return cls(names, {k: [int(v) for v in t[f"vocab.{k}"]] for k in KINDS},
                   {k: t[f"codes.{k}"].astype(np.int64) for k in KINDS},
                   {k: float(t[f"scale.{k}"][0]) for k in KINDS})


COUNT_FAMILIES = ("popularity", "activity")


def bucket_codes(counts, scale: float, n_buckets: int = 10) -> np.ndarray:
    """Equal-width buckets of ``log1p(count) / scale``, numbered 1..n_buckets."""
    lc = np.log1p(np.asarray(counts, dtype=np.float64))
    if scale <= 0:
        return np.ones(len(lc), dtype=np.int64)
    return 1 + np.clip((n_buckets * lc / scale).astype(np.int64), 0, n_buckets - 1)


def log_bucket(counts, n_buckets: int = 10) -> np.ndarray:
    """Equal-width buckets of ``log1p(count)`` up to the largest count, numbered 1..n_buckets."""
    counts = np.asarray(counts)
    return bucket_codes(counts, float(np.log1p(counts.max())) if len(counts) else 0.0, n_buckets)


def build_schema(train: InteractionLog, item_attrs=None, user_attrs=None, n_buckets: int = 10) -> FeatureSchema:
    """Assemble feature families.

    ``item_attrs``/``user_attrs`` are ``(names, codes, vocabularies)`` triples
    as returned by :func:`dqrec.data.load_attributes`. Items always get a
    popularity bucket; users fall back to an activity bucket when they have
    no attributes.
    """
    names, vocab, codes, scale = {}, {}, {}, {}
    item_counts = np.bincount(train.items, minlength=train.item_count)
    user_counts = np.bincount(train.users, minlength=train.user_count)
    for kind, attrs, counts, bucket_name in (("item", item_attrs, item_counts, "popularity"),
                                             ("user", user_attrs, user_counts, "activity")):
        fam_names, fam_vocab, fam_codes = [], [], []
        if attrs is not None:
            a_names, a_codes, a_vocab = attrs
            fam_names += list(a_names)
            fam_vocab += [len(v) + 1 for v in a_vocab]
            fam_codes.append(np.asarray(a_codes, dtype=np.int64))
        scale[kind] = float(np.log1p(counts.max())) if len(counts) else 0.0
        if kind == "item" or attrs is None:
            fam_names.append(bucket_name)
            fam_vocab.append(n_buckets + 1)
            fam_codes.append(bucket_codes(counts, scale[kind], n_buckets)[:, None])
        names[kind], vocab[kind], codes[kind] = fam_names, fam_vocab, np.hstack(fam_codes)
    return FeatureSchema(names, vocab, codes, scale)


class PretrainModel:
    """Two MLP towers over attribute embeddings, one table per feature family."""

    def __init__(self, schema: FeatureSchema, params: dict[str, np.ndarray]):
        self.schema = schema
        self.params = params

    @classmethod
    def init(cls, schema: FeatureSchema, rng: np.random.Generator, feature_dim: int = 16,
             hidden: int = 128, out_dim: int = 64) -> "PretrainModel":
        params = {}
        for kind in KINDS:
            for f, v in enumerate(schema.vocab[kind]):
                params[f"feat.{kind}.{f}"] = init_embedding(v, feature_dim, rng)
        for kind in KINDS:
            in_dim = feature_dim * (schema.n_families(kind) + schema.n_families(other(kind)))
            params |= Tower.init([in_dim, hidden, out_dim], rng).params(f"tower.{kind}")
        return cls(schema, params)

    def _tables(self, kind):
        return [self.params[f"feat.{kind}.{f}"] for f in range(self.schema.n_families(kind))]

    def feature_input(self, kind: str, ids, seq_idx, seq_mask, counts=None) -> np.ndarray:
        """``[own attribute embeddings | mean attribute embeddings of the sequence]``.

        ``counts`` are the entities' interaction counts at query time; when
        omitted the count bucket uses the full train count.
        """
        own_codes = self.schema.own_codes(kind, ids, counts)
        nb_codes = self.schema.codes[other(kind)][seq_idx]
        own = [t[own_codes[:, f]] for f, t in enumerate(self._tables(kind))]
        nb = [mean_pool(t, nb_codes[..., f], seq_mask) for f, t in enumerate(self._tables(other(kind)))]
        return np.concatenate(own + nb, axis=-1)

    def _feature_backward(self, kind, ids, seq_idx, seq_mask, g_in, grads, counts=None):
        own_codes = self.schema.own_codes(kind, ids, counts)
        nb_codes = self.schema.codes[other(kind)][seq_idx]
        pos = 0
        for f, t in enumerate(self._tables(kind)):
            w = t.shape[1]
            lookup_backward(grads[f"feat.{kind}.{f}"], own_codes[:, f], g_in[:, pos:pos + w])
            pos += w
        for f, t in enumerate(self._tables(other(kind))):
            w = t.shape[1]
            mean_pool_backward(grads[f"feat.{other(kind)}.{f}"], nb_codes[..., f], seq_mask, g_in[:, pos:pos + w])
            pos += w

    def tower(self, kind: str) -> Tower:
        return Tower.from_params(self.params, f"tower.{kind}")

    def represent(self, kind: str, ids, seq_idx, seq_mask, counts=None) -> np.ndarray:
        return self.tower(kind).forward(self.feature_input(kind, ids, seq_idx, seq_mask, counts))[0]

    def loss_and_grads(self, batch) -> tuple[float, dict[str, np.ndarray]]:
        """BPR over a batch ``(users, u_seq, pos, pos_seq, neg, neg_seq)``.

        Each seq is ``(idx, mask)`` or ``(idx, mask, counts)``.
        """
        users, u_seq, pos, p_seq, neg, n_seq = batch
        us_i, us_m, u_cnt = _unpack(u_seq)
        ps_i, ps_m, p_cnt = _unpack(p_seq)
        ns_i, ns_m, n_cnt = _unpack(n_seq)
        i_cnt = None if p_cnt is None or n_cnt is None else np.concatenate([p_cnt, n_cnt])
        items = np.concatenate([pos, neg])
        i_idx, i_mask = np.concatenate([ps_i, ns_i]), np.concatenate([ps_m, ns_m])
        ut, it = self.tower("user"), self.tower("item")
        e_u = self.feature_input("user", users, us_i, us_m, u_cnt)
        e_i = self.feature_input("item", items, i_idx, i_mask, i_cnt)
        z_u, cache_u = ut.forward(e_u)
        z_i, cache_i = it.forward(e_i)
        b = len(users)
        loss, g_u, g_pos, g_neg = bpr_triplet(z_u, z_i[:b], z_i[b:])
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        lg_u, ge_u = ut.backward(cache_u, g_u)
        lg_i, ge_i = it.backward(cache_i, np.concatenate([g_pos, g_neg]))
        grads |= Tower.grads_to_dict(lg_u, "tower.user") | Tower.grads_to_dict(lg_i, "tower.item")
        self._feature_backward("user", users, us_i, us_m, ge_u, grads, u_cnt)
        self._feature_backward("item", items, i_idx, i_mask, ge_i, grads, i_cnt)
        return loss, grads

    def save(self, path) -> None:
        save_tensors(path, self.params | {f"schema.{k}": v for k, v in self.schema.to_tensors().items()})

    @classmethod
    def load(cls, path, names) -> "PretrainModel":
        t = load_tensors(path)
        schema = FeatureSchema.from_tensors({k[7:]: v for k, v in t.items() if k.startswith("schema.")}, names)
        return cls(schema, {k: v for k, v in t.items() if not k.startswith("schema.")})


def _unpack(seq):
    return (seq[0], seq[1], seq[2]) if len(seq) == 3 else (seq[0], seq[1], None)


def counts_before(seqs: SequenceStore, kind: str, ids, times=None) -> np.ndarray:
    return np.array([seqs.count_before(kind, int(e), None if times is None else int(times[r]))
                     for r, e in enumerate(ids)], dtype=np.int64)


def make_batch(seqs: SequenceStore, users, pos, neg, times):
    """Triplet batch whose histories and count buckets stop strictly before ``times``."""
    def side(kind, ids):
        return seqs.padded(kind, ids, times) + (counts_before(seqs, kind, ids, times),)

    return users, side("user", users), pos, side("item", pos), neg, side("item", neg)


def pretrain(split: SplitDataset, schema: FeatureSchema, seqs: SequenceStore, rng: np.random.Generator,
             epochs: int = 10, batch_size: int = 1024, lr: float = 1e-3, patience: int = 2,
             feature_dim: int = 16, hidden: int = 128, out_dim: int = 64) -> PretrainModel:
    """Train both towers on BPR triplets; early-stop on validation BPR loss.

    Every training triplet sees histories strictly before its own timestamp.
    """
    model = PretrainModel.init(schema, rng, feature_dim, hidden, out_dim)
    train = split.train
    sampler = NegativeSampler(train)
    state = AdamState(lr=lr)
    valid = split.valid
    has_valid = len(valid) > 0
    if has_valid:
        val_neg = sampler.sample_batch(valid.users, np.random.default_rng(0))
        val_batch = make_batch(seqs, valid.users, valid.items, val_neg, None)
    best, best_loss, bad = None, np.inf, 0
    for epoch in range(epochs):
        perm = rng.permutation(len(train))
        neg = sampler.sample_batch(train.users[perm], rng)
        total = 0.0
        for start in range(0, len(perm), batch_size):
            idx = perm[start:start + batch_size]
            batch = make_batch(seqs, train.users[idx], train.items[idx], neg[start:start + batch_size],
                               train.timestamps[idx])
            loss, grads = model.loss_and_grads(batch)
            if not np.isfinite(loss):
                raise FloatingPointError(f"pretrain loss became non-finite at epoch {epoch}")
            adam_step(model.params, grads, state)
            total += loss * len(idx)
        train_loss = total / len(perm)
        if has_valid:
            val_loss, _ = model.loss_and_grads(val_batch)
        else:
            val_loss = train_loss
        log.info("epoch %d train_bpr=%.5f valid_bpr=%.5f", epoch, train_loss, val_loss)
        if val_loss < best_loss:
            best, best_loss, bad = {k: v.copy() for k, v in model.params.items()}, val_loss, 0
        else:
            bad += 1
            if bad >= patience:
                break
    model.params = best
    return model


@dataclass
class RepresentationMatrix:
    kind: str
    Z: np.ndarray
    entities: np.ndarray  # internal id of each row
    timestamps: np.ndarray  # most recent train interaction of each row

    def row_of(self) -> dict[int, int]:
        return {int(e): r for r, e in enumerate(self.entities)}

    def save(self, path, external_ids) -> None:
        path = Path(path)
        save_tensors(path, {"Z": self.Z})
        with open(path.with_suffix(".index.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "entity", "external_id", "timestamp"])
            for r, (e, t) in enumerate(zip(self.entities, self.timestamps)):
                w.writerow([r, int(e), external_ids[e], int(t)])

    @classmethod
    def load(cls, path, kind: str) -> "RepresentationMatrix":
        path = Path(path)
        Z = load_tensors(path)["Z"]
        arr = np.loadtxt(path.with_suffix(".index.csv"), delimiter=",", skiprows=1,
                         usecols=(1, 3), dtype=np.int64, ndmin=2)
        return cls(kind, Z, arr[:, 0].copy(), arr[:, 1].copy())


def export_representations(model: PretrainModel, seqs: SequenceStore, kind: str,
                           batch_size: int = 4096) -> RepresentationMatrix:
    """One row per entity with train interactions, from its full train history."""
    n = seqs.n_users if kind == "user" else seqs.n_items
    entities = np.array([e for e in range(n) if len(seqs.history(kind, e)[0])], dtype=np.int64)
    rows = []
    for start in range(0, len(entities), batch_size):
        ids = entities[start:start + batch_size]
        idx, mask = seqs.padded(kind, ids)
        rows.append(model.represent(kind, ids, idx, mask))
    Z = np.vstack(rows) if rows else np.zeros((0, 0))
    stamps = np.array([seqs.last_time(kind, int(e)) for e in entities], dtype=np.int64)
    return RepresentationMatrix(kind, Z, entities, stamps)
