import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dqrec.nn import grad_check
from dqrec.ranking import bpr_loss, bpr_triplet, score


def test_score_values():
    assert float(score(np.array([1.0, 0.0]), np.array([0.0, 3.0]))) == 0.5
    z = np.array([1.0, 3.0])  # |z|^2 = 10
    assert abs(float(score(z, z)) - 1 / (1 + math.exp(-10))) < 1e-15
    assert abs(float(score(z, z)) - 0.99995) < 5e-5  # quoted value is rounded


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_score_symmetric(a, b):
    assert float(score(np.array(a), np.array(b))) == float(score(np.array(b), np.array(a)))


def test_bpr_values():
    assert abs(float(bpr_loss(0.3, 0.3)) - math.log(2)) < 1e-15
    assert abs(float(bpr_loss(1.0, 0.0)) - math.log(1 + math.exp(-1))) < 1e-15
    assert abs(float(bpr_loss(1.0, 0.0)) - 0.313262) < 1e-6


@given(st.floats(-1, 1), st.floats(-1, 1))
def test_bpr_decreasing_in_margin(a, b):
    lo, hi = sorted((a, b))
    if hi - lo > 1e-9:
        assert float(bpr_loss(hi, 0.0)) < float(bpr_loss(lo, 0.0))


@pytest.mark.parametrize("seed", range(10))
def test_triplet_gradients(seed):
    rng = np.random.default_rng(seed)
    zu, zp, zn = (rng.normal(size=(4, 5)) for _ in range(3))
    _, gu, gp, gn = bpr_triplet(zu, zp, zn)
    assert grad_check(lambda v: bpr_triplet(v, zp, zn)[0], gu, zu) <= 1e-4
    assert grad_check(lambda v: bpr_triplet(zu, v, zn)[0], gp, zp) <= 1e-4
    assert grad_check(lambda v: bpr_triplet(zu, zp, v)[0], gn, zn) <= 1e-4
