"""Comparison data: container, synthetic generation, file I/O and discretisation."""

from __future__ import annotations

import csv
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .pairspace import PairSpace, signed_index, sigmoid

# Watch-ratio basket edges; a ratio r lands in basket #{c in cuts : c < r}.
WATCH_RATIO_CUTS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.2, 1.5, 2.0)


class DataError(ValueError):
    """Raised for malformed or inconsistent comparison data."""


@dataclass(frozen=True, eq=False)
class ComparisonDataset:
    """Observed comparisons ``(user, pair, outcome)`` plus per-user sampling rates.

    Arrays are 0-based: ``users[n]`` in ``0..d1-1`` and ``pairs[n]`` in
    ``0..K-1``. ``y[n] == 1`` means the lex-smaller item of the pair won.
    ``y`` is stored as float so that noiseless (conditional mean) data can be
    fed to the solver; sampled and ingested data are always 0/1.
    """

    d1: int
    space: PairSpace
    users: np.ndarray
    pairs: np.ndarray
    y: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        users = np.asarray(self.users, dtype=np.int64)
        pairs = np.asarray(self.pairs, dtype=np.int64)
        y = np.asarray(self.y, dtype=float)
        p = np.asarray(self.p, dtype=float)
        if not (users.shape == pairs.shape == y.shape) or users.ndim != 1:
            raise DataError("users, pairs and y must be 1-d arrays of equal length")
        if p.shape != (self.d1,):
            raise DataError(f"p must have length d1={self.d1}")
        if users.size and (users.min() < 0 or users.max() >= self.d1):
            raise DataError("user index out of range")
        if pairs.size and (pairs.min() < 0 or pairs.max() >= self.space.K):
            raise DataError("pair index out of range")
        if np.any((y < 0) | (y > 1)) or not np.all(np.isfinite(y)):
            raise DataError("outcomes must lie in [0, 1]")
        if np.any(~((p > 0) & (p <= 1))):
            raise DataError("sampling probabilities must lie in (0, 1]")
        flat = users * self.space.K + pairs
        if np.unique(flat).size != flat.size:
            raise DataError("duplicate (user, pair) observation")
        for name, arr in (("users", users), ("pairs", pairs), ("y", y), ("p", p)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def d2(self) -> int:
        return self.space.d2

    @property
    def K(self) -> int:
        return self.space.K

    @property
    def n_obs(self) -> int:
        return int(self.users.size)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.d1, self.space.K)

    @property
    def dbar(self) -> int:
        return self.d1 + self.space.K

    def mask(self) -> np.ndarray:
        """Boolean ``d1 x K`` indicator of observed entries."""
        out = np.zeros(self.shape, dtype=bool)
        out[self.users, self.pairs] = True
        return out

    def outcome_matrix(self) -> np.ndarray:
        """``d1 x K`` outcomes, zero where unobserved."""
        out = np.zeros(self.shape)
        out[self.users, self.pairs] = self.y
        return out

    def user_counts(self) -> np.ndarray:
        return np.bincount(self.users, minlength=self.d1)

    def subset(self, index) -> "ComparisonDataset":
        index = np.sort(np.asarray(index, dtype=np.int64))
        return ComparisonDataset(
            self.d1, self.space, self.users[index], self.pairs[index], self.y[index], self.p
        )

    def entries(self) -> list[tuple[int, int, float]]:
        """Observations as 1-based ``(user, pair, y)`` triples."""
        return [
            (int(i) + 1, int(k) + 1, float(v))
            for i, k, v in zip(self.users, self.pairs, self.y)
        ]


@dataclass
class SyntheticConfig:
    """Settings for the sine-series score generator.

    ``p_spec`` is either a number (same rate for every user) or a list of
    ``{"fraction": f, "p": p}`` blocks; blocks are filled in order starting
    from user 1 and the last block takes the remaining users.
    """

    d2: int
    d1: int | None = None
    p_spec: float | list = 0.8
    sup_norm: float = 1.5
    series_terms: int = 100
    seed: int = 0
    noiseless: bool = False

    def __post_init__(self):
        PairSpace(self.d2)
        if self.d1 is None:
            self.d1 = self.d2 * (self.d2 - 1) // 2
        if self.d1 < 1:
            raise ValueError("d1 must be positive")
        if not self.sup_norm > 0:
            raise ValueError("sup_norm must be positive")
        if self.series_terms < 1:
            raise ValueError("series_terms must be >= 1")
        make_probabilities(self.d1, self.p_spec)

    @classmethod
    def from_mapping(cls, cfg: dict) -> "SyntheticConfig":
        known = {"d1", "d2", "p_spec", "sup_norm", "series_terms", "seed", "noiseless"}
        cfg = dict(cfg)
        if "p" in cfg and "p_spec" not in cfg:
            cfg["p_spec"] = cfg.pop("p")
        unknown = set(cfg) - known
        if unknown:
            raise ValueError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**cfg)


def load_synthetic_config(path) -> SyntheticConfig:
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    return SyntheticConfig.from_mapping(raw.get("synthetic", raw))


def make_probabilities(d1: int, p_spec) -> np.ndarray:
    """Expand a probability rule into a length-``d1`` vector."""
    if isinstance(p_spec, (int, float)):
        p = np.full(d1, float(p_spec))
    else:
        blocks = list(p_spec)
        if not blocks:
            raise ValueError("empty probability block list")
        p = np.empty(d1)
        start = 0
        for n, block in enumerate(blocks):
            if isinstance(block, dict):
                frac, prob = block.get("fraction"), block["p"]
            else:
                frac, prob = block
            if n == len(blocks) - 1:
                stop = d1
            else:
                stop = min(d1, start + int(round(float(frac) * d1)))
            p[start:stop] = float(prob)
            start = stop
    if np.any(~((p > 0) & (p <= 1))):
        raise ValueError("sampling probabilities must lie in (0, 1]")
    return p


def build_gap_matrix(theta: np.ndarray, space: PairSpace | None = None) -> np.ndarray:
    """``M[i, L(j, j2)] = theta[i, j] - theta[i, j2]`` for every pair ``j < j2``."""
    theta = np.asarray(theta, dtype=float)
    if space is None:
        space = PairSpace(theta.shape[1])
    return theta[:, space.first] - theta[:, space.second]


def generate_theta(cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    """Draw a score matrix from the bilinear-plus-sine-series model.

    ``theta[i, j] = b1[j] + a[i] * b2[j] + sum_m |W[i, m]| / m**2 * sin(m * zeta[j])``
    with uniform ``a, b1, b2`` and standard normal ``zeta, W``. Rows are
    centred, then the whole matrix is scaled by one scalar so that its largest
    absolute entry equals ``cfg.sup_norm``.
    """
    d1, d2, m_max = cfg.d1, cfg.d2, cfg.series_terms
    a = rng.uniform(size=d1)
    b1 = rng.uniform(size=d2)
    b2 = rng.uniform(size=d2)
    zeta = rng.standard_normal(d2)
    W = rng.standard_normal((d1, m_max))
    m = np.arange(1, m_max + 1)
    theta = b1[None, :] + a[:, None] * b2[None, :]
    theta = theta + (np.abs(W) / m**2) @ np.sin(np.outer(m, zeta))
    theta = theta - theta.mean(axis=1, keepdims=True)
    peak = np.abs(theta).max()
    if peak > 0:
        theta = theta * (cfg.sup_norm / peak)
    # exact row centring after scaling
    return theta - theta.mean(axis=1, keepdims=True)


def separated_theta(
    cfg: SyntheticConfig,
    K: int,
    gap: float,
    rng: np.random.Generator,
    spread: float = 0.25,
) -> tuple[np.ndarray, list[int]]:
    """Score matrix whose aggregated scores have a gap of exactly ``gap`` after rank ``K``.

    User heterogeneity comes from :func:`generate_theta` (scaled by
    ``cfg.sup_norm``) with column means removed, so the aggregated scores are
    exactly the added shifts. Shifts step down by ``spread`` within the top
    ``K`` and within the rest; which items are on top is a random permutation.

    Returns
    -------
    theta : ndarray
        ``d1 x d2`` row-centred scores.
    top : list of int
        1-based ids of the true aggregated top-``K`` items.
    """
    d2 = cfg.d2
    if not 1 <= K < d2:
        raise ValueError(f"K must lie in 1..{d2 - 1}")
    if not gap > 0:
        raise ValueError("gap must be positive")
    base = generate_theta(cfg, rng)
    # column-centring a row-centred matrix keeps the rows centred
    base = base - base.mean(axis=0, keepdims=True)
    r = np.arange(1, d2 + 1)
    shift = np.where(r <= K, gap / 2 + spread * (K - r), -gap / 2 - spread * (r - K - 1))
    shift = shift - shift.mean()
    order = rng.permutation(d2)
    theta = base.copy()
    theta[:, order] += shift
    return theta, sorted(int(j) + 1 for j in order[:K])


def sample_comparisons(
    theta: np.ndarray,
    p: np.ndarray,
    rng: np.random.Generator,
    noiseless: bool = False,
) -> ComparisonDataset:
    """Erdős–Rényi sampling of user-pair comparisons with logistic outcomes.

    With ``noiseless=True`` every observed outcome is replaced by its
    conditional mean ``sigmoid(M[i, k])``.
    """
    theta = np.asarray(theta, dtype=float)
    d1, d2 = theta.shape
    space = PairSpace(d2)
    p = np.asarray(p, dtype=float)
    prob = sigmoid(build_gap_matrix(theta, space))
    observed = rng.uniform(size=prob.shape) < p[:, None]
    draws = rng.uniform(size=prob.shape) < prob
    users, pairs = np.nonzero(observed)
    y = prob[users, pairs] if noiseless else draws[users, pairs].astype(float)
    return ComparisonDataset(d1, space, users, pairs, y, p)


def _estimated_rate(count: int, d2: int) -> float:
    total = d2 * (d2 - 1)
    return min(max(2.0 * count / total, 1.0 / total), 1.0)


def ingest_comparisons(path, d1: int | None = None, d2: int | None = None) -> ComparisonDataset:
    """Read a long-format comparisons CSV.

    Expected header: ``user,item_a,item_b,winner`` with an optional ``p``
    column; ids are 1-based. When ``d1``/``d2`` are omitted they are taken
    as the largest user/item id present. Without a ``p`` column each user's
    sampling rate is estimated by the observed fraction of pairs.
    """
    path = Path(path)
    users, pairs, ys = [], [], []
    user_p: dict[int, float] = {}
    seen: dict[tuple[int, int], int] = {}
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: no observations")
        header = [h.strip().lower() for h in header]
        if header[:4] != ["user", "item_a", "item_b", "winner"] or len(header) > 5:
            raise DataError(f"{path}: expected header user,item_a,item_b,winner[,p]")
        has_p = len(header) == 5
        if has_p and header[4] != "p":
            raise DataError(f"{path}: fifth column must be 'p'")
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                i, a, b, w = (int(c) for c in row[:4])
                prob = float(row[4]) if has_p else None
            except ValueError as exc:
                raise DataError(f"{path}:{line_no}: malformed row {row!r}") from exc
            if min(i, a, b) < 1:
                raise DataError(f"{path}:{line_no}: ids are 1-based")
            if a == b:
                raise DataError(f"{path}:{line_no}: item compared with itself")
            if w not in (a, b):
                raise DataError(f"{path}:{line_no}: winner {w} is neither {a} nor {b}")
            if prob is not None:
                if not 0 < prob <= 1:
                    raise DataError(f"{path}:{line_no}: p must lie in (0, 1]")
                if user_p.setdefault(i, prob) != prob:
                    raise DataError(f"{path}:{line_no}: conflicting p for user {i}")
            rows.append((line_no, i, a, b, w))
    if not rows:
        raise DataError(f"{path}: no observations")
    d1 = d1 or max(r[1] for r in rows)
    d2 = d2 or max(max(r[2], r[3]) for r in rows)
    space = PairSpace(d2)
    for line_no, i, a, b, w in rows:
        if i > d1 or max(a, b) > d2:
            raise DataError(f"{path}:{line_no}: id exceeds d1={d1} or d2={d2}")
        k, _ = signed_index(space, a, b)
        if (i, k) in seen:
            raise DataError(
                f"{path}:{line_no}: duplicate observation of user {i}, pair ({min(a, b)},{max(a, b)})"
                f" (first seen on line {seen[(i, k)]})"
            )
        seen[(i, k)] = line_no
        users.append(i - 1)
        pairs.append(k - 1)
        ys.append(1.0 if w == min(a, b) else 0.0)
    users = np.asarray(users, dtype=np.int64)
    counts = np.bincount(users, minlength=d1)
    if has_p:
        p = np.array([user_p.get(i + 1, _estimated_rate(counts[i], d2)) for i in range(d1)])
    else:
        p = np.array([_estimated_rate(c, d2) for c in counts])
    return ComparisonDataset(d1, space, users, np.asarray(pairs), np.asarray(ys), p)


def write_comparisons(data: ComparisonDataset, path, include_p: bool = True) -> None:
    """Write ``data`` in the long CSV format read by :func:`ingest_comparisons`."""
    first = data.space.first[data.pairs] + 1
    second = data.space.second[data.pairs] + 1
    if np.any((data.y != 0) & (data.y != 1)):
        raise DataError("only binary outcomes can be written as winners")
    winner = np.where(data.y == 1, first, second)

    def emit(fh):
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["user", "item_a", "item_b", "winner"] + (["p"] if include_p else []))
        for n in range(data.n_obs):
            row = [int(data.users[n]) + 1, int(first[n]), int(second[n]), int(winner[n])]
            if include_p:
                row.append(repr(float(data.p[data.users[n]])))
            out.writerow(row)

    atomic_write(path, emit)


def basket_scores(raw: np.ndarray, cut_points: Sequence[float] = WATCH_RATIO_CUTS) -> np.ndarray:
    """Map each raw value to the number of cut points strictly below it."""
    raw = np.asarray(raw, dtype=float)
    cuts = np.asarray(cut_points, dtype=float)
    if cuts.ndim != 1 or cuts.size == 0 or np.any(np.diff(cuts) <= 0):
        raise ValueError("cut_points must be strictly ascending")
    if not np.all(np.isfinite(raw)):
        raise DataError("raw scores must be finite")
    return np.searchsorted(cuts, raw, side="left").astype(float)


def discretize_scores(raw: np.ndarray, cut_points: Sequence[float] = WATCH_RATIO_CUTS) -> np.ndarray:
    """Basket scores with every row centred to sum to zero."""
    scores = basket_scores(raw, cut_points)
    return scores - scores.mean(axis=1, keepdims=True)


def read_matrix(path) -> np.ndarray:
    """Headerless numeric CSV to a 2-d float array."""
    try:
        mat = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if mat.size == 0:
        raise DataError(f"{path}: empty matrix")
    return mat


def write_matrix(path, mat: np.ndarray) -> None:
    mat = np.atleast_2d(np.asarray(mat, dtype=float))

    def emit(fh):
        for row in mat:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")

    atomic_write(path, emit)


def atomic_write(path, emit) -> None:
    """Write through ``emit(fh)`` into a temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            emit(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
