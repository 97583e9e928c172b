import sys
from dataclasses import dataclass

import numpy as np
import pytest

from dqrec.augment import build_neighbor_cache, build_rep_store
from dqrec.config import synthetic_config
from dqrec.data import binarize, build_sequences, from_records, split_chronological
from dqrec.pretrain import build_schema, export_representations, pretrain
from dqrec.quantizer import fit_quantizer
from dqrec.recommender import Context
from dqrec.synthetic import planted_clusters


def planted_split(seed=0, users=60, items=40, p_in=0.5):
    data = planted_clusters(users, items, 4, p_in, 0.02, 0.0, seed=seed)
    log = binarize(from_records(data.users, data.items, data.ratings, data.timestamps))
    genres = [[data.item_genre[i] + 1] for i in log.item_ids]
    attrs = (["genre"], np.array(genres, dtype=np.int64), [tuple(f"g{g}" for g in range(4))])
    return split_chronological(log), attrs, data


@dataclass
class Stack:
    split: object
    seqs: object
    schema: object
    towers: object
    quantizers: dict
    caches: dict
    data: object

    def context(self, causal=False):
        return Context(self.seqs, self.towers, self.quantizers, self.caches, causal)


@pytest.fixture(scope="session")
def tiny_stack():
    split, attrs, data = planted_split()
    seqs = build_sequences(split.train, 10)
    schema = build_schema(split.train, attrs)
    towers = pretrain(split, schema, seqs, np.random.default_rng(0), epochs=3, batch_size=64, lr=1e-2,
                      feature_dim=4, hidden=8, out_dim=8)
    quantizers, caches = {}, {}
    for kind in ("user", "item"):
        reps = export_representations(towers, seqs, kind)
        q = fit_quantizer(reps.Z, 2, 4, kind=kind, epochs=5, batch_size=32, lr=1e-2, rng=np.random.default_rng(1))
        store = build_rep_store(reps, q)
        quantizers[kind] = q
        caches[kind] = build_neighbor_cache(store, q, 5, 1)
    return Stack(split, seqs, schema, towers, quantizers, caches, data)


# a pipeline that finishes in a few seconds
FAST = dict(synth_users=60, synth_items=40, pretrain_epochs=2, pretrain_batch_size=128, feature_dim=4, hidden=16,
            dim=8, layers=2, codebook_size=4, quantizer_epochs=3, quantizer_n_init=1, neighbors=5,
            latent_neighbors=1, epochs=2, batch_size=128, max_seq_len=10)


def fast_config(**changes):
    return synthetic_config(**(FAST | changes))


def pytest_terminal_summary(terminalreporter):
    lines = sys.modules.get("test_acceptance")
    if lines is not None and lines.LINES:
        terminalreporter.section("acceptance")
        for line in sorted(lines.LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
