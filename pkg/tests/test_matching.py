import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from setseg.matching import (DICE_EPS, LossWeights, brute_force, build_cost, hungarian, pairwise_bce, pairwise_dice,
                             presence_targets)


def random_costs(rng, K, N):
    return rng.normal(size=(K, N)) * rng.choice([0.1, 1.0, 10.0])


def test_two_by_two_example():
    a = hungarian(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert a.pairs == [(0, 0), (1, 1)]
    assert a.total_cost == 0.0
    b = hungarian(np.array([[5.0, 1.0], [1.0, 5.0]]))
    assert b.pairs == [(0, 1), (1, 0)] and b.total_cost == 2.0


def test_rectangular_leaves_slots_unmatched():
    c = np.array([[9.0], [1.0], [4.0]])
    a = hungarian(c)
    assert a.pairs == [(1, 0)]
    assert a.unmatched_slots == {0, 2}
    np.testing.assert_array_equal(presence_targets(a), [0.0, 1.0, 0.0])


def test_no_targets():
    a = hungarian(np.zeros((4, 0)))
    assert a.pairs == [] and a.total_cost == 0.0 and a.unmatched_slots == {0, 1, 2, 3}


def test_too_many_targets():
    with pytest.raises(ValueError):
        hungarian(np.zeros((2, 3)))


def test_matches_brute_force_on_random_matrices():
    rng = np.random.default_rng(1234)
    for _ in range(300):
        K = int(rng.integers(1, 8))
        N = int(rng.integers(0, K + 1))
        c = random_costs(rng, K, N)
        h, b = hungarian(c), brute_force(c)
        assert h.total_cost == b.total_cost
        assert len(h.pairs) == N and len({k for k, _ in h.pairs}) == N


def test_integer_ties_still_optimal():
    rng = np.random.default_rng(5)
    for _ in range(200):
        K = int(rng.integers(1, 7))
        N = int(rng.integers(1, K + 1))
        c = rng.integers(0, 3, size=(K, N)).astype(float)
        assert hungarian(c).total_cost == brute_force(c).total_cost


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 6), st.data())
def test_permutation_equivariance(K, data):
    N = data.draw(st.integers(1, K))
    c = data.draw(arrays(np.float64, (K, N), elements=st.floats(-5, 5)))
    rp = np.array(data.draw(st.permutations(range(K))))
    cp = np.array(data.draw(st.permutations(range(N))))
    base = hungarian(c).total_cost
    perm = hungarian(c[rp][:, cp]).total_cost
    assert abs(base - perm) <= 1e-9 * (1 + abs(base))


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 6), st.data())
def test_monotone_in_entries(K, data):
    N = data.draw(st.integers(1, K))
    c = data.draw(arrays(np.float64, (K, N), elements=st.floats(-5, 5)))
    bump = data.draw(arrays(np.float64, (K, N), elements=st.floats(0, 3)))
    assert hungarian(c + bump).total_cost >= hungarian(c).total_cost - 1e-9
    shift = data.draw(st.floats(-10, 10))
    assert abs(hungarian(c + shift).total_cost - (hungarian(c).total_cost + N * shift)) < 1e-8


def test_pairwise_terms_against_loops():
    rng = np.random.default_rng(3)
    probs = rng.random((3, 4, 4))
    gts = rng.random((2, 4, 4)) < 0.5
    bce = pairwise_bce(probs, gts)
    dice = pairwise_dice(probs, gts)
    for k in range(3):
        for i in range(2):
            p, g = probs[k].ravel(), gts[i].ravel().astype(float)
            want_b = -np.mean(g * np.log(p) + (1 - g) * np.log(1 - p))
            want_d = 1 - (2 * (p * g).sum() + DICE_EPS) / (p.sum() + g.sum() + DICE_EPS)
            assert abs(bce[k, i] - want_b) < 1e-12
            assert abs(dice[k, i] - want_d) < 1e-12


def test_build_cost_combines_terms():
    rng = np.random.default_rng(4)
    probs = rng.random((3, 2, 2))
    scores = np.array([0.9, 0.1, 0.5])
    gts = np.array([[[1, 0], [0, 0]]], dtype=bool)
    w = LossWeights()
    cm = build_cost(probs, scores, gts, w)
    np.testing.assert_allclose(cm.costs, 2 * cm.bce + 0.5 * cm.dice - scores[:, None], atol=1e-15)
    with pytest.raises(ValueError):
        build_cost(probs, scores, np.zeros((1, 3, 3), bool), w)


def test_perfect_slot_wins():
    gt = np.zeros((1, 3, 3), bool)
    gt[0, 1, 1] = True
    probs = np.full((4, 3, 3), 0.5)
    probs[2] = np.where(gt[0], 0.99, 0.01)
    a = hungarian(build_cost(probs, np.full(4, 0.5), gt, LossWeights()))
    assert a.pairs == [(2, 0)]
