import math

import numpy as np
import pytest

from dqrec.data import from_records
from dqrec.metrics import (evaluate, ndcg_at_k, pessimistic_rank, popularity_scorer, recall_at_k,
                           report_from_ranks, user_positives)


def test_ndcg_values():
    assert [ndcg_at_k(r, 5) for r in (1, 3, 7)] == [1.0, 0.5, 0.0]
    assert abs(ndcg_at_k(2, 5) - 1 / math.log2(3)) < 1e-15


def test_recall_values_and_bad_rank():
    assert recall_at_k(5, 5) == 1.0 and recall_at_k(6, 5) == 0.0
    with pytest.raises(ValueError):
        recall_at_k(0, 5)
    with pytest.raises(ValueError):
        ndcg_at_k(0, 5)


def test_pessimistic_ties():
    assert pessimistic_rank(1.0, [1.0, 1.0, 0.5]) == 3
    assert pessimistic_rank(2.0, [1.0]) == 1


def test_report_means():
    rep = report_from_ranks([1, 3, 7], (5, 10))
    assert rep.recall[5] == pytest.approx(2 / 3)
    assert rep.ndcg[5] == pytest.approx(0.5)
    assert rep.recall[10] == 1.0


def toy_split():
    users = ["a", "a", "b", "b", "c", "c"]
    items = ["x", "y", "y", "z", "z", "x"]
    log = from_records(users, items, [5] * 6, range(6))
    return log.take(np.array([0, 2, 4])), log.take(np.array([1, 3, 5]))


def test_evaluate_perfect_and_worst_models():
    train, test = toy_split()
    known = user_positives(train, test)
    want = {(int(u), int(i)) for u, i in zip(test.users, test.items)}

    def oracle(users, items):
        return np.array([[1.0 if (u, i) in want else 0.0 for i in items] for u in users])

    rep = evaluate(oracle, test, known, ks=(1,))
    assert rep.recall[1] == 1.0 and rep.samples + rep.skipped == len(test)
    rep = evaluate(lambda u, i: np.zeros((len(u), len(i))), test, known, ks=(1,))
    assert rep.recall[1] == 0.0 or rep.samples == 0  # constant scores rank pessimistically


def test_evaluate_excludes_known_positives():
    log = from_records(["a", "a", "a", "b", "c"], ["x", "y", "z", "z", "w"], [5] * 5, range(5))
    train, test = log.take(np.array([0, 3])), log.take(np.array([1, 2, 4]))
    known = user_positives(train, test)
    rep = evaluate(lambda u, i: np.zeros((len(u), len(i))), test, known, ks=(5,))
    # a knows x, y, z, so w is its only negative; c's positive w competes with y and z
    assert rep.samples == 3
    assert rep.ranks.tolist() == [2, 2, 3]


def test_evaluate_matches_direct_ranking():
    rng = np.random.default_rng(0)
    n = 300
    log = from_records([f"u{k % 40}" for k in range(n)], [f"i{v}" for v in rng.integers(60, size=n)], [5] * n,
                       range(n))
    train, test = log.take(np.arange(200)), log.take(np.arange(200, n))
    known = user_positives(train, test)
    table = rng.normal(size=(log.user_count, log.item_count))
    rep = evaluate(lambda u, i: table[np.ix_(u, i)], test, known, batch_size=50)
    expect = []
    for start in range(0, len(test), 50):
        batch = list(zip(test.users[start:start + 50], test.items[start:start + 50]))
        cands = {int(i) for _, i in batch}
        for u, i in batch:
            negs = [j for j in cands if j != i and j not in known[u]]
            if negs:
                expect.append(1 + sum(table[u, j] >= table[u, i] for j in negs))
    assert rep.ranks.tolist() == expect


def test_random_scores_recall():
    rng = np.random.default_rng(0)
    ranks = []
    for _ in range(10_000):
        s = rng.random(101)
        ranks.append(pessimistic_rank(s[0], s[1:]))
    rep = report_from_ranks(ranks, (5,))
    assert abs(rep.recall[5] - 5 / 101) < 0.02


def test_popularity_scorer():
    log = from_records(["a", "b", "c"], ["x", "x", "y"], [5] * 3, range(3))
    s = popularity_scorer(log)(np.array([0, 1]), np.array([0, 1]))
    assert s.tolist() == [[2.0, 1.0], [2.0, 1.0]]
