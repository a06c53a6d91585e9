"""Item-pair indexing and the logistic link.

Pairs ``(j, j2)`` with ``j < j2`` are enumerated lexicographically::

    (1,2), (1,3), ..., (1,d2), (2,3), ..., (d2-1,d2)

Public functions take and return 1-based item ids and pair indices. The
vectorised helpers on :class:`PairSpace` (``first``, ``second``,
``difference_operator``) are 0-based and meant for array code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np
from scipy.special import expit, logit


@dataclass(frozen=True)
class PairSpace:
    """All unordered pairs of ``d2`` items in lexicographic order."""

    d2: int

    def __post_init__(self):
        if int(self.d2) != self.d2 or self.d2 < 2:
            raise ValueError(f"d2 must be an integer >= 2, got {self.d2!r}")

    @property
    def K(self) -> int:
        return self.d2 * (self.d2 - 1) // 2

    @cached_property
    def _pairs0(self) -> tuple[np.ndarray, np.ndarray]:
        first, second = np.triu_indices(self.d2, k=1)
        first.setflags(write=False)
        second.setflags(write=False)
        return first, second

    @property
    def first(self) -> np.ndarray:
        """0-based lex-smaller item of every pair, length ``K``."""
        return self._pairs0[0]

    @property
    def second(self) -> np.ndarray:
        """0-based lex-larger item of every pair, length ``K``."""
        return self._pairs0[1]

    @cached_property
    def difference_operator(self) -> np.ndarray:
        """``d2 x K`` matrix ``D`` with ``Theta @ D`` equal to the gap matrix."""
        D = np.zeros((self.d2, self.K))
        cols = np.arange(self.K)
        D[self.first, cols] = 1.0
        D[self.second, cols] = -1.0
        D.setflags(write=False)
        return D

    def index_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """0-based ``d2 x d2`` arrays of pair index and sign for every ordered pair.

        Diagonal entries hold index ``-1`` and sign ``0``.
        """
        idx = np.full((self.d2, self.d2), -1, dtype=np.int64)
        sign = np.zeros((self.d2, self.d2), dtype=np.int8)
        k = np.arange(self.K)
        idx[self.first, self.second] = k
        idx[self.second, self.first] = k
        sign[self.first, self.second] = 1
        sign[self.second, self.first] = -1
        return idx, sign


class SignedPairIndex(NamedTuple):
    k: int
    sign: int


def _check_item(space: PairSpace, j) -> None:
    if int(j) != j or not 1 <= j <= space.d2:
        raise ValueError(f"item id {j!r} outside 1..{space.d2}")


def lex_index(space: PairSpace, j: int, j2: int) -> int:
    """1-based position of the pair ``(j, j2)``, ``j < j2``, in lex order."""
    _check_item(space, j)
    _check_item(space, j2)
    if j >= j2:
        raise ValueError(f"lex_index needs j < j2, got ({j}, {j2})")
    return (j - 1) * (2 * space.d2 - j) // 2 + (j2 - j)


def lex_pair(space: PairSpace, k: int) -> tuple[int, int]:
    """Inverse of :func:`lex_index`.

    The row ``j`` is recovered in closed form from the triangular-number
    inequality; the integer corrections only absorb floating point error in
    the square root.
    """
    if int(k) != k or not 1 <= k <= space.K:
        raise ValueError(f"pair index {k!r} outside 1..{space.K}")
    d2 = space.d2
    k0 = k - 1
    b = 2 * d2 - 1
    m = int((b - math.sqrt(b * b - 8 * k0)) // 2)

    def before(m):
        return m * (2 * d2 - m - 1) // 2

    while m > 0 and before(m) > k0:
        m -= 1
    while before(m + 1) <= k0:
        m += 1
    j = m + 1
    j2 = j + 1 + (k0 - before(m))
    return j, j2


def signed_index(space: PairSpace, j: int, j2: int) -> SignedPairIndex:
    """Order-insensitive pair index plus the sign of the query orientation."""
    if j == j2:
        raise ValueError("a pair needs two distinct items")
    if j < j2:
        return SignedPairIndex(lex_index(space, j, j2), 1)
    return SignedPairIndex(lex_index(space, j2, j), -1)


def sigmoid(x):
    return expit(x)


def sigmoid_inv(u):
    """Logit. Rejects values outside the open unit interval."""
    arr = np.asarray(u, dtype=float)
    if np.any(~((arr > 0) & (arr < 1))):
        raise ValueError("sigmoid_inv is defined on (0, 1) only")
    out = logit(arr)
    return float(out) if np.ndim(u) == 0 else out


def sigmoid_deriv(x):
    # sigma(x) * sigma(-x) is exactly even and avoids cancellation in 1 - sigma(x)
    return expit(x) * expit(-np.asarray(x, dtype=float))
