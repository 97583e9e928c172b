import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dqrec.augment import (NeighborSet, RepStore, build_neighbor_cache, build_rep_store, explicit_neighbors,
                           latent_codeword, latent_ids, latent_neighbors, load_neighbor_cache, neighbor_union,
                           save_neighbor_cache)
from dqrec.pretrain import RepresentationMatrix
from dqrec.quantizer import QuantizerBasis, QuantizerModel, fit_basis


def make_store(z_hat, entities=None):
    z_hat = np.asarray(z_hat, dtype=float)
    n = len(z_hat)
    ents = np.arange(n) if entities is None else np.asarray(entities)
    return RepStore("user", ents, np.zeros((n, 1, z_hat.shape[1])), np.zeros((n, 1), np.int64), z_hat,
                    np.zeros(n, np.int64))


def brute_neighbors(q, store, k, exclude):
    cand = [(float(((store.z_hat[r] - q) ** 2).sum()), int(e)) for r, e in enumerate(store.entities) if e != exclude]
    return [e for _, e in sorted(cand)[:k]]


def quantized_setup(seed, n=120, d=8, L=4, J=5):
    rng = np.random.default_rng(seed)
    Z = rng.normal(size=(n, d))
    model = QuantizerModel(fit_basis(Z, L), rng.normal(size=(L, J, d // L)))
    reps = RepresentationMatrix("item", Z, np.arange(n), np.arange(n))
    return Z, model, build_rep_store(reps, model)


def test_store_single_and_recompute():
    Z, model, store = quantized_setup(0, n=100)
    np.testing.assert_array_equal(store.z_hat, model.decode(model.semantic_ids(Z)))
    assert len(store) == 100
    reps = RepresentationMatrix("item", Z[:1], np.array([0]), np.array([0]))
    one = build_rep_store(reps, model)
    assert len(one) == 1
    np.testing.assert_array_equal(one.z_hat[0], model.decode(model.assign(model.encode(Z[0]))))


def test_store_equal_rows_and_missing():
    Z, model, _ = quantized_setup(1)
    Z2 = np.vstack([Z, Z[3]])
    reps = RepresentationMatrix("item", Z2, np.arange(len(Z2)), np.arange(len(Z2)))
    store = build_rep_store(reps, model, entities=np.array([3, len(Z), 9999]))
    assert store.skipped == 1
    assert np.array_equal(store.codes[0], store.codes[1])
    assert np.array_equal(store.z_hat[0], store.z_hat[1])


def test_explicit_forced_order():
    store = make_store([[0.0], [1.0], [2.0]])
    assert explicit_neighbors([0.0], store, 1, exclude=0).tolist() == [1]


def test_explicit_ties_ascending_and_short_store():
    store = make_store([[1.0, 1.0]] * 6, entities=[9, 2, 7, 4, 5, 1])
    order = np.argsort(store.entities)
    store = make_store(store.z_hat[order], store.entities[order])
    assert explicit_neighbors([1.0, 1.0], store, 3, exclude=4).tolist() == [1, 2, 5]
    assert explicit_neighbors([1.0, 1.0], store, 50, exclude=4).tolist() == [1, 2, 5, 7, 9]


def test_explicit_brute_force_500():
    rng = np.random.default_rng(0)
    z = rng.integers(0, 4, size=(500, 3)).astype(float)  # coarse grid forces many ties
    store = make_store(z)
    for q in range(100):
        assert explicit_neighbors(z[q], store, 30, exclude=q).tolist() == brute_neighbors(z[q], store, 30, q)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_explicit_invariant_to_insertion_order(seed):
    rng = np.random.default_rng(seed)
    z = rng.integers(0, 3, size=(40, 2)).astype(float)
    perm = rng.permutation(40)
    a = explicit_neighbors(z[0], make_store(z), 7, exclude=0)
    shuffled = make_store(z[perm], perm)
    got = explicit_neighbors(z[0], shuffled, 7, exclude=0)
    assert got.tolist() == brute_neighbors(z[0], shuffled, 7, 0) == a.tolist()


def test_latent_codeword_rules():
    C = np.array([[0.0], [5.0]])
    assert latent_codeword([0.1], C, 0) == 1 and latent_codeword([4.0], C, 1) == 0
    C4 = np.array([[9.0], [1.0], [8.0], [-1.0]])
    assert latent_codeword([0.0], C4, 1) == 3
    with pytest.raises(ValueError):
        latent_codeword([0.0], np.zeros((1, 1)), 0)


def test_latent_codeword_brute_force():
    rng = np.random.default_rng(2)
    C = rng.normal(size=(128, 3))
    for _ in range(200):
        x = rng.normal(size=3)
        d = ((C - x) ** 2).sum(axis=1)
        c = int(np.argmin(d))
        second = min((j for j in range(128) if j != c), key=lambda j: (d[j], j))
        lat = latent_codeword(x, C, c)
        assert lat == second and lat != c


def test_latent_single_layer_two_words():
    Z = np.random.default_rng(0).normal(size=(20, 2))
    basis = fit_basis(Z, 1)
    model = QuantizerModel(basis, np.array([[[-1.0, 0.0], [1.0, 0.0]]]))
    store = build_rep_store(RepresentationMatrix("user", Z, np.arange(20), np.arange(20)), model)
    for r in range(20):
        lat = latent_ids(store.latents[r], store.codes[r], model)
        assert lat[0, 0] == 1 - store.codes[r, 0]


def test_latent_change_confined_to_block():
    Z, model, store = quantized_setup(3)
    r = 5
    lat = latent_ids(store.latents[r], store.codes[r], model)
    z_lat = model.decode(lat)
    b = model.basis.block_size
    for l in range(model.n_layers):
        diff = z_lat[l] - store.z_hat[r]
        W = model.basis.components
        other = np.delete(np.arange(W.shape[1]), np.arange(l * b, (l + 1) * b))
        assert np.abs(diff @ W[:, other]).max() < 1e-10
        assert np.abs(diff @ W[:, l * b:(l + 1) * b]).max() > 0


def test_latent_neighbor_count():
    Z, model, store = quantized_setup(4)
    lists = latent_neighbors(7, store, model, 2)
    assert len(lists) == 4 and sum(len(q) for q in lists) <= 8
    assert all(7 not in q for q in lists)


def test_union_cases():
    explicit = np.arange(30)
    latent = [np.arange(100, 102) + 2 * l for l in range(4)]
    assert len(neighbor_union(explicit, latent, exclude=999)) == 38
    assert neighbor_union([1, 2, 3], [[2], [3]], exclude=0).tolist() == [1, 2, 3]
    assert neighbor_union([1, 2], [[5]], exclude=5).tolist() == [1, 2]


@given(st.lists(st.integers(0, 50), max_size=20), st.lists(st.lists(st.integers(0, 50), max_size=5), max_size=4),
       st.integers(0, 50))
def test_union_oracle(explicit, latent, me):
    got = neighbor_union(explicit, latent, exclude=me)
    expect = (set(explicit).union(*map(set, latent)) if latent else set(explicit)) - {me}
    assert got.tolist() == sorted(expect)


def test_cache_invariants_and_roundtrip(tmp_path):
    Z, model, store = quantized_setup(5, n=60)
    cache = build_neighbor_cache(store, model, 10, 2)
    ext = [f"e{k}" for k in range(60)]
    for e, ns in cache.items():
        everything = set(ns.all.tolist())
        assert e not in everything
        assert set(ns.explicit.tolist()) <= everything
        assert all(set(q.tolist()) <= everything for q in ns.latent)
        assert len(ns.explicit) == 10
    save_neighbor_cache(cache, tmp_path / "nb.csv", ext)
    back = load_neighbor_cache(tmp_path / "nb.csv", ext, model.n_layers)
    for e, ns in cache.items():
        assert back[e].explicit.tolist() == ns.explicit.tolist()
        assert [q.tolist() for q in back[e].latent] == [q.tolist() for q in ns.latent]
    assert isinstance(back[0], NeighborSet)


def test_equal_semantic_ids_mean_zero_distance():
    Z, model, store = quantized_setup(6)
    same = [(a, b) for a in range(len(store)) for b in range(a) if np.array_equal(store.codes[a], store.codes[b])]
    for a, b in same:
        assert ((store.z_hat[a] - store.z_hat[b]) ** 2).sum() == 0.0


def test_identity_basis_store():
    basis = QuantizerBasis(np.zeros(2), np.eye(2), np.ones(2), np.arange(2), 2)
    model = QuantizerModel(basis, np.array([[[0.0], [1.0]], [[0.0], [1.0]]]))
    reps = RepresentationMatrix("user", np.array([[0.9, 0.1], [0.2, 0.8]]), np.array([0, 1]), np.array([0, 0]))
    store = build_rep_store(reps, model)
    assert store.codes.tolist() == [[1, 0], [0, 1]]
