import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from pcgan.ot import (AuctionConfig, AuctionError, auction_assign, cost, cost_matrix, hungarian_assign,
                      w_upper)


def brute_force(C):
    n = len(C)
    return min(sum(C[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))


def test_cost_examples():
    assert cost((0, 0), (0, 0)) == 0
    assert cost((1, 2), (4, 6)) == 7
    assert cost((0, 0), (3, 4), "l2") == 5
    with pytest.raises(ValueError):
        cost((0, 0), (0, 0, 0))
    with pytest.raises(ValueError):
        cost((0,), (1,), "linf")


def test_identical_sets_cost_zero():
    X = np.random.default_rng(0).random((20, 3))
    assert auction_assign(X, X).total == 0.0
    assert hungarian_assign(X, X).total == 0.0
    assert w_upper(X, X) == 0.0


def test_two_point_line():
    # brute force: 0->2,1->3 costs 4; 0->3,1->2 costs 4 as well under L1 in 1D
    X = np.array([[0.0], [1.0]])
    Y = np.array([[2.0], [3.0]])
    C = cost_matrix(X, Y)
    assert brute_force(C) == 4.0
    a = auction_assign(X, Y)
    assert a.average == 2.0
    assert sorted(a.perm) == [0, 1]


def test_single_pair():
    assert w_upper(np.array([[0.0]]), np.array([[3.0]])) == 3.0


def test_hungarian_small_matrix():
    a = hungarian_assign(C=np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert list(a.perm) == [0, 1] and a.total == 0.0


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(30):
        n = rng.integers(1, 7)
        C = rng.random((n, n))
        assert hungarian_assign(C=C).total == pytest.approx(brute_force(C), abs=1e-12)


def test_hungarian_matches_scipy():
    rng = np.random.default_rng(2)
    for _ in range(30):
        n = rng.integers(2, 80)
        C = cost_matrix(rng.random((n, 3)), rng.random((n, 3)))
        r, c = linear_sum_assignment(C)
        assert hungarian_assign(C=C).total == pytest.approx(C[r, c].sum(), abs=1e-9)


def test_hungarian_size_cap():
    with pytest.raises(ValueError):
        hungarian_assign(C=np.zeros((513, 513)))


def test_unequal_sizes_rejected():
    with pytest.raises(ValueError):
        auction_assign(np.zeros((3, 2)), np.zeros((4, 2)))


def test_round_cap_raises_with_diagnostics():
    rng = np.random.default_rng(3)
    X, Y = rng.random((30, 2)), rng.random((30, 2))
    with pytest.raises(AuctionError, match="rounds"):
        auction_assign(X, Y, AuctionConfig(max_rounds=2))


def test_auction_guarantee_and_bijection():
    rng = np.random.default_rng(4)
    for _ in range(100):
        n = int(rng.integers(4, 65))
        X, Y = rng.random((n, 3)), rng.random((n, 3))
        a = auction_assign(X, Y)
        h = hungarian_assign(X, Y)
        assert sorted(a.perm) == list(range(n))
        assert a.total >= h.total
        assert a.total <= h.total + a.gap_bound + 1e-12
        assert a.total == pytest.approx(cost_matrix(X, Y)[np.arange(n), a.perm].sum())


def test_eps_scaling_within_one_percent():
    rng = np.random.default_rng(5)
    X, Y = rng.random((32, 3)), rng.random((32, 3))
    assert w_upper(X, Y) <= 1.01 * hungarian_assign(X, Y).average


def test_phase_costs_monotone_up_to_eps():
    rng = np.random.default_rng(6)
    for _ in range(30):
        n = int(rng.integers(4, 50))
        a = auction_assign(rng.random((n, 2)), rng.random((n, 2)), AuctionConfig(scale_factor=3.0))
        for prev, cur, eps in zip(a.phase_costs, a.phase_costs[1:], a.phase_eps[1:]):
            assert cur <= prev + n * eps + 1e-12


def test_symmetry_within_gap():
    rng = np.random.default_rng(7)
    for _ in range(20):
        n = int(rng.integers(4, 40))
        X, Y = rng.random((n, 3)), rng.random((n, 3))
        ab, ba = auction_assign(X, Y), auction_assign(Y, X)
        assert abs(ab.total - ba.total) <= max(ab.gap_bound, ba.gap_bound) + 1e-12


def test_l2_metric_guarantee():
    rng = np.random.default_rng(8)
    X, Y = rng.random((40, 2)), rng.random((40, 2))
    a = auction_assign(X, Y, metric="l2")
    h = hungarian_assign(X, Y, metric="l2")
    assert h.total <= a.total <= h.total + a.gap_bound + 1e-12


def test_deterministic():
    rng = np.random.default_rng(9)
    X, Y = rng.random((50, 3)), rng.random((50, 3))
    a, b = auction_assign(X, Y), auction_assign(X, Y)
    assert np.array_equal(a.perm, b.perm) and a.total == b.total and a.rounds == b.rounds


def test_terminates_at_tiny_eps():
    rng = np.random.default_rng(10)
    X, Y = rng.random((40, 3)), rng.random((40, 3))
    C = cost_matrix(X, Y)
    # eps_final = 1e-6 * max cost
    cfg = AuctionConfig(eps_rel=1e-6 * C.max() * 40 / C.mean())
    a = auction_assign(X, Y, cfg)
    assert a.total <= hungarian_assign(X, Y).total + a.gap_bound + 1e-12


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_upper_bound_property(n, seed):
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
    assert w_upper(X, Y) >= hungarian_assign(X, Y).average
