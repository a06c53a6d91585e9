"""Variance estimates, z-tests, multiplier bootstrap and rank confidence intervals.

Pair quantities are stored per lexicographic pair ``k`` in the orientation
``(j, j2)`` with ``j < j2``; a query about ``(j2, j)`` flips the sign. Item ids,
user ids and pair indices are 1-based at every public surface.

Bootstrap replicate ``b`` always draws from ``np.random.default_rng([seed, b])``,
so results do not depend on how replicates are batched or scheduled.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Sequence

import numpy as np

from .dataio import ComparisonDataset, atomic_write
from .debias import SplitFit, newton_increment
from .pairspace import PairSpace, lex_pair, sigmoid_deriv

_STD_NORMAL = NormalDist()


def normal_quantile(prob: float) -> float:
    return _STD_NORMAL.inv_cdf(prob)


@dataclass
class BootstrapConfig:
    B: int = 2000
    alpha: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.B < 100:
            raise ValueError("B must be >= 100")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")


def _active(data: ComparisonDataset) -> np.ndarray:
    """Users with at least one observation; the others carry no information."""
    return np.flatnonzero(data.user_counts() > 0)


def agg_variance(M_hat: np.ndarray, data: ComparisonDataset, k: int | None = None):
    """``d1^-2 sum_i 1 / (p_i sigmoid'(M_hat[i, k]))`` for one pair or all of them.

    Sums run over users with at least one observation.
    """
    rows = _active(data)
    inv = 1.0 / (data.p[rows, None] * sigmoid_deriv(np.asarray(M_hat)[rows]))
    v = inv.sum(axis=0) / rows.size**2
    return v if k is None else float(v[k - 1])


def _two_sided(z: float) -> float:
    return 2.0 * (1.0 - _STD_NORMAL.cdf(abs(z)))


@dataclass
class AggGapInference:
    k: int
    point: float
    v_hat: float
    z: float
    p_value: float
    ci: tuple[float, float]
    alpha: float


def agg_gap_test(
    M_nr: np.ndarray,
    M_hat: np.ndarray,
    data: ComparisonDataset,
    k: int,
    alpha: float = 0.05,
    h0: float = 0.0,
) -> AggGapInference:
    """z-test and interval for the user-averaged gap of pair ``k``."""
    rows = _active(data)
    point = float(np.mean(np.asarray(M_nr)[rows, k - 1]))
    v = agg_variance(M_hat, data, k)
    se = math.sqrt(v)
    z = (point - h0) / se
    half = normal_quantile(1.0 - alpha / 2.0) * se
    return AggGapInference(k, point, v, z, _two_sided(z), (point - half, point + half), alpha)


def indiv_variance_matrix(
    U: np.ndarray, V: np.ndarray, M_hat: np.ndarray, p: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """``(w1, w2)`` for every user-pair entry.

    ``w1[i, k] = sum_k' c[i, k'] (V_k . V_k')^2`` and
    ``w2[i, k] = sum_i' c[i', k] (U_i . U_i')^2`` with
    ``c[i, k] = 1 / (p_i sigmoid'(M_hat[i, k]))``.
    """
    C = 1.0 / (np.asarray(p)[:, None] * sigmoid_deriv(np.asarray(M_hat)))
    GV = (V @ V.T) ** 2
    GU = (U @ U.T) ** 2
    return C @ GV, GU @ C


def indiv_variance(
    U: np.ndarray, V: np.ndarray, M_hat: np.ndarray, data: ComparisonDataset, i: int, k: int
) -> tuple[float, float, float]:
    """``(w1, w2, w1 + w2)`` for user ``i`` and pair ``k``."""
    i0, k0 = i - 1, k - 1
    M_hat = np.asarray(M_hat)
    c_row = 1.0 / (data.p[i0] * sigmoid_deriv(M_hat[i0]))
    c_col = 1.0 / (data.p * sigmoid_deriv(M_hat[:, k0]))
    w1 = float(c_row @ (V @ V[k0]) ** 2)
    w2 = float(c_col @ (U @ U[i0]) ** 2)
    return w1, w2, w1 + w2


@dataclass
class IndivGapInference:
    i: int
    k: int
    point: float
    w_hat: float
    z: float
    p_value: float
    ci: tuple[float, float]
    alpha: float


def indiv_gap_test(
    M_proj: np.ndarray, w_hat: float, i: int, k: int, alpha: float = 0.05, h0: float = 0.0
) -> IndivGapInference:
    if not w_hat > 0:
        raise ValueError("w_hat must be positive")
    point = float(M_proj[i - 1, k - 1])
    se = math.sqrt(w_hat)
    z = (point - h0) / se
    half = normal_quantile(1.0 - alpha / 2.0) * se
    return IndivGapInference(i, k, point, w_hat, z, _two_sided(z), (point - half, point + half), alpha)


@dataclass(frozen=True)
class PairSet:
    """Ordered pairs ``(j, j2)`` with ``j`` in J and ``j2`` in K_set minus ``j``.

    ``k0`` is the 0-based lex index of the unordered pair and ``sign`` is +1
    when ``j < j2``.
    """

    J: np.ndarray
    K_set: np.ndarray
    j: np.ndarray
    j2: np.ndarray
    k0: np.ndarray
    sign: np.ndarray


def pair_set(space: PairSpace, J: Sequence[int], K_set: Sequence[int] | None = None) -> PairSet:
    J = np.asarray(sorted(set(int(x) for x in J)), dtype=np.int64)
    K_set = (
        np.arange(1, space.d2 + 1)
        if K_set is None
        else np.asarray(sorted(set(int(x) for x in K_set)), dtype=np.int64)
    )
    if J.size == 0 or K_set.size < 2:
        raise ValueError("need a nonempty J and at least two reference items")
    if not set(J.tolist()) <= set(K_set.tolist()):
        raise ValueError("J must be a subset of K_set")
    if K_set[0] < 1 or K_set[-1] > space.d2:
        raise ValueError(f"item ids must lie in 1..{space.d2}")
    jj, jj2 = np.meshgrid(J, K_set, indexing="ij")
    off = jj != jj2
    jj, jj2 = jj[off], jj2[off]
    lo, hi = np.minimum(jj, jj2), np.maximum(jj, jj2)
    k0 = (lo - 1) * (2 * space.d2 - lo) // 2 + (hi - lo) - 1
    sign = np.where(jj < jj2, 1, -1)
    return PairSet(J, K_set, jj, jj2, k0, sign)


def _replicate_normals(seed: int, B: int, sizes: Sequence[int]) -> list[np.ndarray]:
    """Per-replicate standard normal vectors, one ``B x size`` block per size."""
    blocks = [np.empty((B, n)) for n in sizes]
    for b in range(B):
        rng = np.random.default_rng([seed, b])
        for blk, n in zip(blocks, sizes):
            blk[b] = rng.standard_normal(n)
    return blocks


def bootstrap_quantile(draws: np.ndarray, alpha: float) -> float:
    """Order statistic ``ceil((1 - alpha) B)`` of the replicate values."""
    draws = np.sort(np.asarray(draws, dtype=float))
    r = math.ceil((1.0 - alpha) * draws.size - 1e-9)
    return float(draws[max(r, 1) - 1])


def agg_bootstrap_draws(
    M_hat: np.ndarray,
    data: ComparisonDataset,
    pairs: PairSet,
    cfg: BootstrapConfig,
    one_sided: bool = False,
    by_item: bool = False,
) -> np.ndarray:
    """Replicates of the maximal normalized multiplier sum for aggregated gaps.

    Two-sided: ``max |sum_i xi[i, k] Z_i| / (d1 sqrt(v_k))``. One-sided: the
    signed version with orientation ``-sign`` and no absolute value. With
    ``by_item`` the maximum is taken separately for each ``j`` in ``pairs.J``
    and a ``B x |J|`` array is returned.
    """
    rows = _active(data)
    xi = newton_increment(M_hat, data)[rows]
    v = agg_variance(M_hat, data)
    cols = xi[:, pairs.k0] / (rows.size * np.sqrt(v[pairs.k0]))
    if one_sided:
        cols = cols * (-pairs.sign)
    (Z,) = _replicate_normals(cfg.seed, cfg.B, [data.d1])
    T = Z[:, rows] @ cols
    if not one_sided:
        T = np.abs(T)
    if not by_item:
        return T.max(axis=1)
    return np.stack([T[:, pairs.j == j].max(axis=1) for j in pairs.J], axis=1)


def bootstrap_agg_quantile(
    M_hat: np.ndarray,
    data: ComparisonDataset,
    J: Sequence[int],
    K_set: Sequence[int] | None,
    cfg: BootstrapConfig,
) -> float:
    draws = agg_bootstrap_draws(M_hat, data, pair_set(data.space, J, K_set), cfg)
    return bootstrap_quantile(draws, cfg.alpha)


def indiv_bootstrap_draws(
    fit: SplitFit,
    i: int,
    pairs: PairSet,
    w_hat_row: np.ndarray,
    cfg: BootstrapConfig,
) -> np.ndarray:
    """Replicates of the maximal normalized two-part multiplier sum for user ``i``.

    Observations of user ``i`` in half 1 enter through half 2's pilot and
    right subspace, those in half 2 through half 1's; the user-side term does
    the same with the left subspaces. Pair and user multipliers come from the
    same replicate stream, pairs first.
    """
    i0 = i - 1
    S1, S2 = fit.S1, fit.S2
    M1, M2 = fit.bundle1.M_hat, fit.bundle2.M_hat
    E2 = newton_increment(M2, S1)  # half-1 residuals at half-2 pilot
    E1 = newton_increment(M1, S2)
    K, d1 = S1.K, S1.d1
    ks = np.unique(pairs.k0)
    (Zxi, Znu) = _replicate_normals(cfg.seed, cfg.B, [K, d1])
    pair_part = (Zxi * E2[i0]) @ fit.V2 @ fit.V2[ks].T + (Zxi * E1[i0]) @ fit.V1 @ fit.V1[ks].T
    c2 = fit.U2 @ fit.U2[i0]
    c1 = fit.U1 @ fit.U1[i0]
    user_part = Znu @ (E2[:, ks] * c2[:, None] + E1[:, ks] * c1[:, None])
    T = np.abs(pair_part + user_part) / np.sqrt(np.asarray(w_hat_row)[ks])
    return T.max(axis=1)


def bootstrap_indiv_quantile(
    fit: SplitFit | None,
    i: int,
    J: Sequence[int],
    K_set: Sequence[int] | None,
    w_hat_row: np.ndarray,
    cfg: BootstrapConfig,
) -> float:
    if fit is None:
        raise ValueError("individual bootstrap needs the split fit; run debias_pipeline with an rng")
    pairs = pair_set(fit.S1.space, J, K_set)
    return bootstrap_quantile(indiv_bootstrap_draws(fit, i, pairs, w_hat_row, cfg), cfg.alpha)


@dataclass
class RankIntervals:
    """Simultaneous rank intervals ``[upper, lower]`` for the items in ``J``.

    ``C_L``/``C_U`` are ``|J| x |K_set|`` bounds for ``theta_j - theta_j2``
    (NaN where ``j2 == j``).
    """

    scope: str
    J: np.ndarray
    K_set: np.ndarray
    alpha: float
    boot_quantile: float
    C_L: np.ndarray
    C_U: np.ndarray
    upper: np.ndarray
    lower: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def lengths(self) -> np.ndarray:
        """Number of ranks each interval covers; ``lower - upper`` is the other common convention."""
        return self.lower - self.upper + 1

    def covers(self, true_lo: np.ndarray, true_hi: np.ndarray) -> np.ndarray:
        """Whether each true rank interval (indexed like ``J``) lies inside its CI."""
        return (self.upper <= true_lo) & (true_hi <= self.lower)


def _signed_grid(pairs: PairSet, values: np.ndarray, signed: bool = True) -> np.ndarray:
    grid = np.full((pairs.J.size, pairs.K_set.size), np.nan)
    rows = np.searchsorted(pairs.J, pairs.j)
    cols = np.searchsorted(pairs.K_set, pairs.j2)
    vals = values[pairs.k0] * (pairs.sign if signed else 1)
    grid[rows, cols] = vals
    return grid


def rank_intervals(
    point: np.ndarray,
    var: np.ndarray,
    quantile: float,
    space: PairSpace,
    J: Sequence[int],
    K_set: Sequence[int] | None = None,
    scope: str = "aggregated",
    alpha: float = 0.05,
) -> RankIntervals:
    """Rank intervals from per-pair gap estimates and a simultaneous critical value.

    ``upper = 1 + #{j2 : C_U(j, j2) < 0}`` and ``lower = |K_set| - #{j2 : C_L(j, j2) > 0}``.
    """
    if not quantile >= 0:
        raise ValueError("quantile must be non-negative")
    pairs = pair_set(space, J, K_set)
    est = _signed_grid(pairs, np.asarray(point, dtype=float))
    sd = np.sqrt(_signed_grid(pairs, np.asarray(var, dtype=float), signed=False))
    C_L = est - quantile * sd
    C_U = est + quantile * sd
    with np.errstate(invalid="ignore"):
        upper = 1 + np.sum(C_U < 0, axis=1)
        lower = pairs.K_set.size - np.sum(C_L > 0, axis=1)
    return RankIntervals(scope, pairs.J, pairs.K_set, alpha, float(quantile), C_L, C_U, upper, lower)


def aggregated_rank_intervals(
    M_nr: np.ndarray,
    M_hat: np.ndarray,
    data: ComparisonDataset,
    J: Sequence[int],
    K_set: Sequence[int] | None,
    cfg: BootstrapConfig,
) -> RankIntervals:
    rows = _active(data)
    point = np.asarray(M_nr)[rows].mean(axis=0)
    v = agg_variance(M_hat, data)
    G = bootstrap_agg_quantile(M_hat, data, J, K_set, cfg)
    out = rank_intervals(point, v, G, data.space, J, K_set, "aggregated", cfg.alpha)
    out.meta.update(B=cfg.B, seed=cfg.seed)
    return out


def individual_rank_intervals(
    fit: SplitFit,
    M_proj: np.ndarray,
    M_hat: np.ndarray,
    data: ComparisonDataset,
    i: int,
    J: Sequence[int],
    K_set: Sequence[int] | None,
    cfg: BootstrapConfig,
    subspace_half: int = 1,
) -> RankIntervals:
    """Rank intervals for user ``i`` from the projected estimate.

    The variance uses the subspaces of half ``subspace_half`` (1 or 2) and the
    full-sample pilot ``M_hat``.
    """
    U, V = _half_subspaces(fit, subspace_half)
    w = indiv_variance_row(U, V, M_hat, data.p, i)
    G = bootstrap_indiv_quantile(fit, i, J, K_set, w, cfg)
    out = rank_intervals(M_proj[i - 1], w, G, data.space, J, K_set, f"user {i}", cfg.alpha)
    out.meta.update(B=cfg.B, seed=cfg.seed, user=i)
    return out


def _half_subspaces(fit: SplitFit, half: int):
    if half == 1:
        return fit.U1, fit.V1
    if half == 2:
        return fit.U2, fit.V2
    raise ValueError("subspace_half must be 1 or 2")


def indiv_variance_row(
    U: np.ndarray, V: np.ndarray, M_hat: np.ndarray, p: np.ndarray, i: int
) -> np.ndarray:
    """``w_hat[i, k]`` for one user and every pair."""
    i0 = i - 1
    M_hat = np.asarray(M_hat)
    p = np.asarray(p)
    c_row = 1.0 / (p[i0] * sigmoid_deriv(M_hat[i0]))
    w1 = ((V @ V.T) ** 2) @ c_row
    C = 1.0 / (p[:, None] * sigmoid_deriv(M_hat))
    w2 = (U @ U[i0]) ** 2 @ C
    return w1 + w2


# one-sided procedures


def one_sided_upper_ranks(
    point: np.ndarray,
    var: np.ndarray,
    quantiles: np.ndarray | float,
    pairs: PairSet,
) -> np.ndarray:
    """``1 + #{j2 : C_L(j, j2) > 0}`` with ``C_L = -(theta_j - theta_j2) - G_j sd``.

    A positive bound means ``j2`` is significantly preferred to ``j``.
    """
    est = -_signed_grid(pairs, np.asarray(point, dtype=float))
    sd = np.sqrt(_signed_grid(pairs, np.asarray(var, dtype=float), signed=False))
    G = np.broadcast_to(np.asarray(quantiles, dtype=float), (pairs.J.size,))
    C_L = est - G[:, None] * sd
    with np.errstate(invalid="ignore"):
        return 1 + np.sum(C_L > 0, axis=1)


@dataclass
class PlacementResult:
    item: int
    K: int
    reject: bool
    r_upper: int
    quantile: float


def top_k_placement_test(
    M_nr: np.ndarray,
    M_hat: np.ndarray,
    data: ComparisonDataset,
    j: int,
    K: int,
    cfg: BootstrapConfig,
) -> PlacementResult:
    """Test ``rank(j) <= K`` for the aggregated preference; reject when the
    one-sided upper rank bound exceeds ``K``."""
    pairs = pair_set(data.space, [j])
    draws = agg_bootstrap_draws(M_hat, data, pairs, cfg, one_sided=True)
    G = bootstrap_quantile(draws, cfg.alpha)
    rows = _active(data)
    point = np.asarray(M_nr)[rows].mean(axis=0)
    r = int(one_sided_upper_ranks(point, agg_variance(M_hat, data), G, pairs)[0])
    return PlacementResult(j, K, r > K, r, G)


def sure_screen_top_k(
    M_nr: np.ndarray,
    M_hat: np.ndarray,
    data: ComparisonDataset,
    K: int,
    cfg: BootstrapConfig,
) -> tuple[list[int], float]:
    """Items whose one-sided upper rank bound is at most ``K``, and the global quantile."""
    pairs = pair_set(data.space, range(1, data.d2 + 1))
    draws = agg_bootstrap_draws(M_hat, data, pairs, cfg, one_sided=True)
    G = bootstrap_quantile(draws, cfg.alpha)
    rows = _active(data)
    point = np.asarray(M_nr)[rows].mean(axis=0)
    r = one_sided_upper_ranks(point, agg_variance(M_hat, data), G, pairs)
    return [int(j) for j in pairs.J[r <= K]], G


# ranks of score vectors


def score_vector(theta: np.ndarray, user: int | None = None) -> np.ndarray:
    """Row ``user`` (1-based) of ``theta``, or the column means when ``user`` is None."""
    theta = np.asarray(theta, dtype=float)
    return theta.mean(axis=0) if user is None else theta[user - 1]


def top_k_select(theta: np.ndarray, K: int, user: int | None = None) -> list[int]:
    """The ``K`` highest-scoring items, ties going to the smaller id."""
    s = score_vector(theta, user)
    if not 1 <= K <= s.size:
        raise ValueError(f"K must lie in 1..{s.size}")
    order = np.lexsort((np.arange(s.size), -s))
    return sorted(int(x) + 1 for x in order[:K])


def point_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks (1 = best), ties going to the smaller id."""
    scores = np.asarray(scores, dtype=float)
    order = np.lexsort((np.arange(scores.size), -scores))
    ranks = np.empty(scores.size, dtype=np.int64)
    ranks[order] = np.arange(1, scores.size + 1)
    return ranks


def tied_rank_intervals(scores: np.ndarray, tol: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """``[1 + #strictly better, #at least as good]`` for every item.

    Scores within ``tol`` of each other count as tied.
    """
    s = np.asarray(scores, dtype=float)
    diff = s[None, :] - s[:, None]
    better = np.sum(diff > tol, axis=1)
    at_least = np.sum(diff >= -tol, axis=1)
    return 1 + better, at_least


def restricted_tied_ranks(scores: np.ndarray, J: np.ndarray, K_set: np.ndarray, tol: float = 0.0):
    """True rank intervals of the items in ``J`` among the items in ``K_set``."""
    s = np.asarray(scores, dtype=float)
    ref = s[np.asarray(K_set) - 1]
    tgt = s[np.asarray(J) - 1]
    diff = ref[None, :] - tgt[:, None]
    return 1 + np.sum(diff > tol, axis=1), np.sum(diff >= -tol, axis=1)


# serialization


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def write_json(path, payload: dict) -> None:
    atomic_write(path, lambda fh: json.dump(_jsonable(payload), fh, indent=2, sort_keys=True))


def write_rank_intervals(path, ri: RankIntervals, true_rank=None) -> None:
    """CSV with columns ``item, r_upper, r_lower[, true_rank]``.

    ``true_rank`` entries may be integers or ``(lo, hi)`` pairs for tied truth,
    written as ``lo`` or ``lo-hi``.
    """

    def fmt(t):
        if isinstance(t, (tuple, list)):
            lo, hi = int(t[0]), int(t[1])
            return str(lo) if lo == hi else f"{lo}-{hi}"
        return str(int(t))

    def emit(fh):
        w = csv.writer(fh, lineterminator="\n")
        header = ["item", "r_upper", "r_lower"] + (["true_rank"] if true_rank is not None else [])
        w.writerow(header)
        for n, j in enumerate(ri.J):
            row = [int(j), int(ri.upper[n]), int(ri.lower[n])]
            if true_rank is not None:
                row.append(fmt(true_rank[n]))
            w.writerow(row)

    atomic_write(path, emit)


def gap_report(results: Sequence[AggGapInference | IndivGapInference], space: PairSpace) -> list[dict]:
    out = []
    for r in results:
        j, j2 = lex_pair(space, r.k)
        entry = {"pair": [j, j2], "k": r.k, "point": r.point, "ci": list(r.ci), "z": r.z, "p_value": r.p_value}
        if isinstance(r, AggGapInference):
            entry.update(scope="aggregated", variance=r.v_hat)
        else:
            entry.update(scope=f"user {r.i}", user=r.i, variance=r.w_hat)
        out.append(entry)
    return out

