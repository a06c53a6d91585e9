"""One-step Newton debiasing, sample splitting and rank-q spectral projection."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dataio import ComparisonDataset
from .estimator import EstimateBundle, SolverConfig, estimate_pipeline
from .linalg import top_svd
from .pairspace import sigmoid, sigmoid_deriv


def newton_increment(M_hat: np.ndarray, data: ComparisonDataset, factor: float = 1.0) -> np.ndarray:
    """``factor / p_i * (y - sigmoid(M)) / sigmoid'(M)`` on observed entries, zero elsewhere."""
    out = np.zeros(data.shape)
    i, k = data.users, data.pairs
    m = M_hat[i, k]
    out[i, k] = factor / data.p[i] * (data.y - sigmoid(m)) / sigmoid_deriv(m)
    return out


def nr_debias(M_hat: np.ndarray, data: ComparisonDataset) -> np.ndarray:
    """One Newton step of the ``1/p_i``-weighted logistic log-likelihood from ``M_hat``.

    Unobserved entries keep their pilot value.
    """
    M_hat = np.asarray(M_hat, dtype=float)
    return M_hat + newton_increment(M_hat, data)


def split_sample(
    data: ComparisonDataset, rng: np.random.Generator
) -> tuple[ComparisonDataset, ComparisonDataset]:
    """Uniformly random partition of the observations into two halves.

    The first half gets ``ceil(n / 2)`` observations.
    """
    n = data.n_obs
    if n < 2:
        raise ValueError("need at least two observations to split")
    perm = rng.permutation(n)
    half = (n + 1) // 2
    return data.subset(perm[:half]), data.subset(perm[half:])


def cross_fit_debias(
    M1: np.ndarray, M2: np.ndarray, S1: ComparisonDataset, S2: ComparisonDataset
) -> tuple[np.ndarray, np.ndarray]:
    """Debias each half's pilot with the other half's residuals.

    Each half holds roughly every other observation, so the inverse-probability
    weight is ``2 / p_i``.
    """
    M1 = np.asarray(M1, dtype=float)
    M2 = np.asarray(M2, dtype=float)
    return M1 + newton_increment(M1, S2, 2.0), M2 + newton_increment(M2, S1, 2.0)


def estimate_rank(M_hat: np.ndarray, rel_threshold: float = 0.1) -> int:
    """Number of singular values above ``rel_threshold`` times the largest (at least 1)."""
    s = np.linalg.svd(np.asarray(M_hat, dtype=float), compute_uv=False)
    if s.size == 0 or s[0] == 0:
        raise ValueError("rank of an all-zero matrix is undefined here")
    return max(1, int(np.sum(s > rel_threshold * s[0])))


def rank_q_project(M: np.ndarray, q: int):
    """Best rank-``q`` approximation plus its singular subspaces.

    Returns ``(P, U, V)`` with ``P = U U^T M V V^T``; singular vectors follow the
    sign convention of :func:`hetpref.linalg.fix_signs`.
    """
    M = np.asarray(M, dtype=float)
    if not 1 <= q <= min(M.shape):
        raise ValueError(f"q={q} outside 1..{min(M.shape)}")
    U, s, Vt = top_svd(M, q)
    return (U * s) @ Vt, U, Vt.T


def combine_projections(P1: np.ndarray, P2: np.ndarray) -> np.ndarray:
    P1 = np.asarray(P1, dtype=float)
    P2 = np.asarray(P2, dtype=float)
    if P1.shape != P2.shape:
        raise ValueError(f"shape mismatch {P1.shape} vs {P2.shape}")
    return 0.5 * (P1 + P2)


@dataclass
class SplitFit:
    """Everything computed from the two halves."""

    S1: ComparisonDataset
    S2: ComparisonDataset
    bundle1: EstimateBundle
    bundle2: EstimateBundle
    M_nr_1: np.ndarray
    M_nr_2: np.ndarray
    U1: np.ndarray
    V1: np.ndarray
    U2: np.ndarray
    V2: np.ndarray


@dataclass
class DebiasedEstimates:
    M_nr: np.ndarray
    q: int
    split: SplitFit | None = None
    M_proj: np.ndarray | None = None

    @property
    def subspaces(self):
        if self.split is None:
            return None
        s = self.split
        return s.U1, s.V1, s.U2, s.V2


def debias_pipeline(
    data: ComparisonDataset,
    bundle: EstimateBundle,
    rng: np.random.Generator | None = None,
    cfg: SolverConfig | None = None,
    q: int | None = None,
    rel_threshold: float = 0.1,
) -> DebiasedEstimates:
    """Full-sample debiasing, and with ``rng`` also the split/cross-fit/project route.

    The half-sample pilots are fitted as samples at rate ``p_i / 2``. ``q``
    defaults to :func:`estimate_rank` of the full-sample ``bundle.M_hat``.
    """
    M_nr = nr_debias(bundle.M_hat, data)
    if q is None:
        q = estimate_rank(bundle.M_hat, rel_threshold)
    if rng is None:
        return DebiasedEstimates(M_nr, q)
    S1, S2 = split_sample(data, rng)
    # each half is a sample at rate p_i / 2, which sets its loss weights and lambda
    b1 = estimate_pipeline(replace(S1, p=S1.p / 2), cfg)
    b2 = estimate_pipeline(replace(S2, p=S2.p / 2), cfg)
    M_nr_1, M_nr_2 = cross_fit_debias(b1.M_hat, b2.M_hat, S1, S2)
    P1, U1, V1 = rank_q_project(M_nr_1, q)
    P2, U2, V2 = rank_q_project(M_nr_2, q)
    split = SplitFit(S1, S2, b1, b2, M_nr_1, M_nr_2, U1, V1, U2, V2)
    return DebiasedEstimates(M_nr, q, split, combine_projections(P1, P2))
