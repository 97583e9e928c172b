import numpy as np
import pytest

from dqrec.nn import dense_apply, numeric_grad, relative_error
from dqrec.ranking import score
from dqrec.recommender import (ALL_OFF, Flags, RecModel, Side, TrainConfig, TrainingDiverged, build_input_embedding,
                               make_scorer, semantic_feature_embedding, tower_forward, train)


def random_side(rng, n, n_self, n_other, L=2, J=3, width=4):
    seq_mask = (rng.random((n, width)) < 0.6).astype(float)
    nb_mask = (rng.random((n, width)) < 0.6).astype(float)
    return Side(rng.integers(n_self, size=n), rng.integers(J, size=(n, L)), rng.integers(n_other, size=(n, width)),
                seq_mask, rng.integers(n_self, size=(n, width)), nb_mask)


def small_model(rng, flags=Flags()):
    model = RecModel.init(6, 5, 2, 3, rng, dim=3, sem_dim=2, hidden=4, flags=flags)
    for name in model.params:
        if name.startswith(("id.", "sem.")):
            model.params[name] = 0.3 * rng.normal(size=model.params[name].shape)
    return model


def test_semantic_embedding_shape_and_sharing():
    rng = np.random.default_rng(0)
    tables = [rng.normal(size=(5, 4)) for _ in range(2)]
    out = semantic_feature_embedding(np.array([[1, 2], [1, 2], [1, 4]]), tables)
    assert out.shape == (3, 8)
    assert np.array_equal(out[0], out[1])
    assert np.array_equal(out[0, :4], out[2, :4]) and not np.array_equal(out[0, 4:], out[2, 4:])
    with pytest.raises(IndexError):
        semantic_feature_embedding(np.array([[5, 0]]), tables)


def test_input_blocks():
    rng = np.random.default_rng(1)
    model = small_model(rng)
    empty = Side(np.array([2]), np.array([[1, 0]]), np.zeros((1, 3), np.int64), np.zeros((1, 3)),
                 np.zeros((1, 3), np.int64), np.zeros((1, 3)))
    e = build_input_embedding("user", empty, model)[0]
    sem = semantic_feature_embedding(np.array([1, 0]), model.sem_tables("user"))
    np.testing.assert_array_equal(e, np.concatenate([model.params["id.user"][2], sem, np.zeros(6)]))
    one = empty._replace(seq_idx=np.array([[4, 0, 0]]), seq_mask=np.array([[1.0, 0, 0]]))
    np.testing.assert_array_equal(build_input_embedding("user", one, model)[0, 7:10], model.params["id.item"][4])
    five = empty._replace(nb_idx=np.array([[0, 1, 3, 4, 5]]), nb_mask=np.ones((1, 5)))
    oracle = sum(model.params["id.user"][k] for k in (0, 1, 3, 4, 5)) / 5
    np.testing.assert_allclose(build_input_embedding("user", five, model)[0, 10:], oracle, atol=1e-15)


@pytest.mark.parametrize("flag", ["user_feature", "user_linkage"])
def test_flags_zero_only_their_block(flag):
    rng = np.random.default_rng(2)
    model = small_model(rng)
    side = random_side(rng, 4, 6, 5)
    full = build_input_embedding("user", side, model)
    model.flags = Flags(**{flag: False})
    cut = build_input_embedding("user", side, model)
    block = slice(3, 7) if flag == "user_feature" else slice(10, 13)
    assert np.all(cut[:, block] == 0)
    rest = np.ones(full.shape[1], bool)
    rest[block] = False
    np.testing.assert_array_equal(cut[:, rest], full[:, rest])


def test_tower_single_layer_equals_dense():
    rng = np.random.default_rng(3)
    model = small_model(rng)
    tower = model.tower("user")
    tower.layers = tower.layers[:1]
    tower.activate_top = True
    e = rng.normal(size=(2, 13))
    np.testing.assert_array_equal(tower_forward(e, tower), dense_apply(tower.layers[0], e))


def test_scores_symmetric_and_bounded():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(2, 5))
    assert float(score(a, b)) == float(score(b, a)) and 0 < float(score(a, b)) < 1


@pytest.mark.parametrize("seed", range(10))
def test_full_chain_gradients(seed):
    rng = np.random.default_rng(seed)
    flags = Flags() if seed < 5 else Flags(*(bool(v) for v in rng.integers(2, size=5)))
    model = small_model(rng, flags)
    user, pos, neg = random_side(rng, 4, 6, 5), random_side(rng, 4, 5, 6), random_side(rng, 4, 5, 6)
    _, grads = model.loss_and_grads(user, pos, neg)
    for name, g in grads.items():
        def f(v, name=name):
            keep = model.params[name]
            model.params[name] = v
            out = model.loss_and_grads(user, pos, neg)[0]
            model.params[name] = keep
            return out

        numeric = numeric_grad(f, model.params[name].copy(), 1e-3)
        if max(np.abs(numeric).max(), np.abs(g).max()) < 1e-10:
            continue  # parameter switched off by a flag or unused by this batch
        assert relative_error(g, numeric) <= 1e-4, name


def test_disabled_blocks_get_no_gradient():
    rng = np.random.default_rng(5)
    model = small_model(rng, ALL_OFF)
    user, pos, neg = random_side(rng, 4, 6, 5), random_side(rng, 4, 5, 6), random_side(rng, 4, 5, 6)
    _, grads = model.loss_and_grads(user, pos, neg)
    assert all(np.all(grads[k] == 0) for k in grads if k.startswith("sem."))


def test_save_load_roundtrip(tmp_path):
    model = small_model(np.random.default_rng(6), Flags(item_linkage=False))
    model.save(tmp_path / "m.dqv1")
    back = RecModel.load(tmp_path / "m.dqv1")
    assert back.flags == model.flags and back.n_layers == 2
    assert all(back.params[k].tobytes() == v.tobytes() for k, v in model.params.items())


def test_context_sides(tiny_stack):
    ctx = tiny_stack.context()
    tr = tiny_stack.split.train
    side = ctx.side("user", tr.users[:10], tr.timestamps[:10])
    assert side.codes.shape == (10, 2) and side.seq_idx.shape == (10, 10)
    # history strictly before each sample's own time
    for r in range(10):
        n = int(side.seq_mask[r].sum())
        assert n == min(10, tiny_stack.seqs.count_before("user", int(tr.users[r]), int(tr.timestamps[r])))
    frozen = ctx.semantic_ids("user", tr.users[:10], tr.timestamps[:10])
    assert np.array_equal(frozen, ctx.semantic_ids("user", tr.users[:10]))
    off = ctx.side("user", tr.users[:3], None, ALL_OFF)
    assert np.all(off.codes == 0) and np.all(off.nb_mask == 0)


def test_causal_ids_follow_history(tiny_stack):
    ctx = tiny_stack.context(causal=True)
    tr = tiny_stack.split.train
    first = np.array([np.flatnonzero(tr.users == u)[0] for u in np.unique(tr.users)[:5]])
    a = ctx.semantic_ids("user", tr.users[first], tr.timestamps[first])
    b = tiny_stack.towers.represent("user", tr.users[first], np.zeros((5, 10), np.int64), np.zeros((5, 10)),
                                    np.zeros(5, np.int64))
    assert np.array_equal(a, tiny_stack.quantizers["user"].semantic_ids(b))


def test_neighbors_from_cache(tiny_stack):
    ctx = tiny_stack.context()
    idx, mask = ctx.neighbors("item", [0, 1])
    for r, e in enumerate([0, 1]):
        expect = tiny_stack.caches["item"][e].all.tolist()
        assert idx[r, :int(mask[r].sum())].tolist() == expect


def test_train_smoke(tiny_stack):
    s = tiny_stack
    rng = np.random.default_rng(0)
    model = RecModel.init(s.split.user_count, s.split.item_count, 2, 4, rng, dim=8, sem_dim=4, hidden=16)
    model, history = train(model, s.split, s.context(), TrainConfig(epochs=4, batch_size=32, lr=1e-2, patience=10),
                           rng)
    losses = [h["train_loss"] for h in history]
    assert all(np.isfinite(losses)) and losses[-1] < losses[0]
    assert set(history[0]) == {"epoch", "train_loss", "valid_recall@10", "valid_ndcg@10"}


def test_train_deterministic(tiny_stack):
    s = tiny_stack
    runs = []
    for _ in range(2):
        rng = np.random.default_rng(3)
        model = RecModel.init(s.split.user_count, s.split.item_count, 2, 4, rng, dim=8, sem_dim=4, hidden=16)
        runs.append(train(model, s.split, s.context(), TrainConfig(epochs=2, batch_size=64), rng)[0])
    assert all(runs[0].params[k].tobytes() == runs[1].params[k].tobytes() for k in runs[0].params)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises(tiny_stack):
    s = tiny_stack
    rng = np.random.default_rng(0)
    model = RecModel.init(s.split.user_count, s.split.item_count, 2, 4, rng, dim=8, sem_dim=4, hidden=16)
    model.params["tower.user.1.bias"][:] = np.nan
    with pytest.raises(TrainingDiverged) as exc:
        train(model, s.split, s.context(), TrainConfig(epochs=1), rng)
    assert "tower.user.0.weight" in exc.value.last_good


def test_scorer_shape(tiny_stack):
    s = tiny_stack
    model = RecModel.init(s.split.user_count, s.split.item_count, 2, 4, np.random.default_rng(0), dim=8,
                          sem_dim=4, hidden=16)
    out = make_scorer(model, s.context())(np.array([0, 1, 2]), np.array([3, 4]))
    assert out.shape == (3, 2)
