import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hetpref.pairspace import (
    PairSpace,
    lex_index,
    lex_pair,
    signed_index,
    sigmoid,
    sigmoid_deriv,
    sigmoid_inv,
)

# sigma(1) * (1 - sigma(1)) at 30 digits, computed once with mpmath
SIGMOID_DERIV_AT_ONE = 0.196611933241481852537424733586


def test_pair_count():
    assert PairSpace(40).K == 780
    assert PairSpace(2).K == 1


@pytest.mark.parametrize("d2", [0, 1, 2.5])
def test_bad_item_count(d2):
    with pytest.raises(ValueError):
        PairSpace(d2)


@pytest.mark.parametrize(
    "d2,j,j2,k",
    [(4, 1, 2, 1), (4, 2, 3, 4), (40, 39, 40, 780)],
)
def test_lex_index_examples(d2, j, j2, k):
    assert lex_index(PairSpace(d2), j, j2) == k


@pytest.mark.parametrize("d2,k,pair", [(4, 1, (1, 2)), (4, 6, (3, 4))])
def test_lex_pair_examples(d2, k, pair):
    assert lex_pair(PairSpace(d2), k) == pair


def test_lex_pair_matches_enumeration():
    # brute force: the 10 pairs of 5 items in lexicographic order
    enumerated = list(combinations(range(1, 6), 2))
    space = PairSpace(5)
    assert lex_pair(space, 5) == (2, 3)
    assert [lex_pair(space, k) for k in range(1, 11)] == enumerated


@pytest.mark.parametrize("j,j2", [(2, 2), (3, 2), (0, 2), (1, 5)])
def test_lex_index_rejects(j, j2):
    with pytest.raises(ValueError):
        lex_index(PairSpace(4), j, j2)


@pytest.mark.parametrize("k", [0, 7, -1])
def test_lex_pair_rejects(k):
    with pytest.raises(ValueError):
        lex_pair(PairSpace(4), k)


def test_round_trip_all_sizes():
    for d2 in range(2, 61):
        space = PairSpace(d2)
        ks = [lex_index(space, *lex_pair(space, k)) for k in range(1, space.K + 1)]
        assert ks == list(range(1, space.K + 1))


def test_vectorised_helpers_agree():
    space = PairSpace(7)
    for k0 in range(space.K):
        j, j2 = lex_pair(space, k0 + 1)
        assert (space.first[k0] + 1, space.second[k0] + 1) == (j, j2)
    D = space.difference_operator
    assert D.shape == (7, space.K)
    np.testing.assert_array_equal(D.sum(axis=0), 0)


@pytest.mark.parametrize(
    "j,j2,k,sign",
    [(3, 2, 4, -1), (2, 3, 4, 1), (1, 4, 3, 1)],
)
def test_signed_index_examples(j, j2, k, sign):
    assert tuple(signed_index(PairSpace(4), j, j2)) == (k, sign)


def test_signed_index_rejects_self_pair():
    with pytest.raises(ValueError):
        signed_index(PairSpace(4), 2, 2)


@given(st.integers(2, 60).flatmap(lambda d: st.tuples(st.just(d), st.integers(1, d), st.integers(1, d))))
def test_signed_index_antisymmetric(args):
    d2, j, j2 = args
    if j == j2:
        return
    space = PairSpace(d2)
    a, b = signed_index(space, j, j2), signed_index(space, j2, j)
    assert a.k == b.k
    assert a.sign == -b.sign
    assert a.sign == (1 if j < j2 else -1)


def test_sigmoid_examples():
    assert sigmoid(0.0) == 0.5
    assert sigmoid(math.log(3)) == pytest.approx(0.75, abs=1e-15)
    assert sigmoid(-math.log(3)) == pytest.approx(0.25, abs=1e-15)


def test_sigmoid_inv_examples():
    assert sigmoid_inv(0.5) == 0.0
    assert sigmoid_inv(0.75) == pytest.approx(math.log(3), abs=1e-15)
    assert abs(sigmoid_inv(sigmoid(1.5)) - 1.5) <= 1e-12


@pytest.mark.parametrize("u", [0.0, 1.0, -0.2, 1.5])
def test_sigmoid_inv_rejects(u):
    with pytest.raises(ValueError):
        sigmoid_inv(u)


def test_sigmoid_deriv_examples():
    assert sigmoid_deriv(0.0) == 0.25
    assert sigmoid_deriv(2.0) == sigmoid_deriv(-2.0)
    assert sigmoid_deriv(1.0) == pytest.approx(SIGMOID_DERIV_AT_ONE, abs=1e-15)


def test_sigmoid_round_trip_grid():
    # above x ~ 16 the float64 value of sigma(x) no longer pins x down to 1e-9;
    # the full [-30, 30] range is exercised by the acceptance suite
    x = np.linspace(-30, 15, 4501)
    assert np.max(np.abs(sigmoid_inv(sigmoid(x)) - x)) <= 1e-9


def test_sigmoid_round_trip_relative_to_float_spacing():
    x = np.linspace(15, 30, 1501)
    s = sigmoid(x)
    # error is at most a few ulps of s, magnified by d logit / du = 1 / (s (1 - s))
    bound = 4 * np.spacing(s) / sigmoid_deriv(x)
    assert np.all(np.abs(sigmoid_inv(s) - x) <= bound)


def test_sigmoid_deriv_finite_difference():
    h = 1e-5
    x = np.arange(-5, 6, dtype=float)
    fd = (sigmoid(x + h) - sigmoid(x - h)) / (2 * h)
    assert np.max(np.abs(sigmoid_deriv(x) - fd)) <= 1e-6


@given(st.floats(-700, 700), st.floats(-700, 700))
def test_sigmoid_monotone(a, b):
    if a < b:
        assert sigmoid(a) <= sigmoid(b)
    assert 0.0 <= sigmoid(a) <= 1.0
