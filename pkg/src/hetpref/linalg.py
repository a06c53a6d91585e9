"""Dense SVD helpers shared by the solver and the projection step."""

from __future__ import annotations

import numpy as np

# Up to this smaller dimension a full LAPACK SVD beats subspace iteration near a
# clustered threshold, so "auto" only switches to truncated beyond it.
FULL_SVD_MAX_DIM = 2000


def fix_signs(U: np.ndarray, Vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flip singular pairs so the first non-negligible entry of each left vector is positive."""
    U = U.copy()
    Vt = Vt.copy()
    for c in range(U.shape[1]):
        col = U[:, c]
        tol = 1e-12 * np.abs(col).max() if col.size else 0.0
        nz = np.flatnonzero(np.abs(col) > tol)
        if nz.size and col[nz[0]] < 0:
            U[:, c] = -col
            Vt[c] = -Vt[c]
    return U, Vt


def subspace_svd(
    A: np.ndarray,
    k: int,
    V0: np.ndarray | None = None,
    oversample: int = 8,
    rtol: float = 1e-10,
    max_sweeps: int = 200,
):
    """Leading ``k`` singular triplets by block subspace iteration.

    ``V0`` (columns spanning a guess of the leading right singular subspace)
    seeds the block; the remaining columns come from a fixed-seed Gaussian
    draw so results are reproducible. Iterates until every wanted triplet has
    residual ``||A^T u - s v|| <= rtol * s_1``; falls back to a full SVD if that
    does not happen within ``max_sweeps``.
    """
    m, n = A.shape
    b = min(k + oversample, min(m, n))
    rng = np.random.default_rng(b)
    start = rng.standard_normal((n, b))
    if V0 is not None and V0.size:
        c = min(V0.shape[1], b)
        start[:, :c] = V0[:, :c]
    Q, _ = np.linalg.qr(A @ start)
    for _ in range(max_sweeps):
        P, _ = np.linalg.qr(A.T @ Q)
        AP = A @ P
        Q, R = np.linalg.qr(AP)
        Ub, s, Wt = np.linalg.svd(R)
        U = Q @ Ub[:, :k]
        V = P @ Wt[:k].T
        s = s[:k]
        # A v = s u holds by construction; the left residual is the informative one
        resid = np.linalg.norm(A.T @ U - V * s, axis=0)
        if s[0] == 0 or np.all(resid <= rtol * s[0]):
            return U, s, V.T
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    return U[:, :k], s[:k], Vt[:k]


def top_svd(A: np.ndarray, k: int, method: str = "auto", V0: np.ndarray | None = None):
    """Leading ``k`` singular triplets of ``A``, descending, sign-normalised."""
    n = min(A.shape)
    if not 1 <= k <= n:
        raise ValueError(f"rank {k} outside 1..{n}")
    if method == "auto":
        method = "full" if n <= FULL_SVD_MAX_DIM else "truncated"
    if method == "full" or 2 * k >= n:
        U, s, Vt = np.linalg.svd(A, full_matrices=False)
        U, s, Vt = U[:, :k], s[:k], Vt[:k]
    else:
        U, s, Vt = subspace_svd(A, k, V0=V0)
    U, Vt = fix_signs(U, Vt)
    return U, s, Vt


def singular_value_threshold(
    Z: np.ndarray,
    tau: float,
    rank_hint: int = 0,
    method: str = "auto",
    V0: np.ndarray | None = None,
):
    """Proximal map of ``tau * nuclear_norm`` at ``Z``.

    Returns the factors ``(U, s, Vt)`` of the result with ``s > 0``. In
    truncated mode the number of computed triplets starts at ``rank_hint + 5``
    and doubles until the smallest computed singular value falls at or below
    ``tau``, so every triplet that survives shrinkage is captured.
    """
    n = min(Z.shape)
    if method == "auto":
        method = "full" if n <= FULL_SVD_MAX_DIM else "truncated"
    if method == "full":
        U, s, Vt = np.linalg.svd(Z, full_matrices=False)
    else:
        k = min(rank_hint + 5, n)
        while True:
            U, s, Vt = top_svd(Z, k, method="truncated", V0=V0)
            if s[-1] <= tau or k >= n:
                break
            V0 = Vt.T
            k = min(2 * k, n)
    s = s - tau
    keep = s > 0
    return U[:, keep], s[keep], Vt[keep]
