"""Nuclear-norm regularised least squares on the win-probability matrix.

The pipeline is

1. ``L_hat = argmin 0.5 * sum_S (y - L)^2 / p_i + lam * ||L||_*``
2. ``M_hat = logit(clip(L_hat))``
3. ``Theta_hat[:, j] = mean over pairs of the signed gaps involving j``

plus a factored (Burer–Monteiro) gradient-descent solver for the same
objective with ``||L||_*`` replaced by ``(||X||_F^2 + ||Y||_F^2) / 2``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .dataio import ComparisonDataset
from .linalg import singular_value_threshold, top_svd
from .pairspace import PairSpace, sigmoid_inv

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


def default_lambda(data: ComparisonDataset, c_squared: float = 0.5) -> float:
    """``sqrt(c_squared * dbar / mean(p))`` with ``dbar = d1 + K``."""
    return math.sqrt(c_squared * data.dbar / float(np.mean(data.p)))


@dataclass
class SolverConfig:
    """Settings for :func:`solve_convex`.

    ``lam=None`` resolves to :func:`default_lambda` of the dataset at solve
    time. ``svd`` selects the SVD used inside the proximal step: ``"full"``,
    ``"truncated"`` or ``"auto"`` (full unless both dimensions exceed 2000).
    """

    lam: float | None = None
    max_iters: int = 2000
    tol: float = 1e-7
    clip_eps: float = 1e-6
    accelerate: bool = True
    svd: str = "auto"

    def __post_init__(self):
        if self.lam is not None and not self.lam > 0:
            raise ValueError("lam must be positive")
        if not 0 < self.clip_eps < 0.5:
            raise ValueError("clip_eps must lie in (0, 0.5)")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.svd not in ("auto", "full", "truncated"):
            raise ValueError(f"unknown svd mode {self.svd!r}")

    def resolve_lambda(self, data: ComparisonDataset) -> float:
        return self.lam if self.lam is not None else default_lambda(data)


@dataclass
class ConvexSolution:
    """Output of :func:`solve_convex`; ``L = U @ diag(s) @ Vt`` exactly."""

    L: np.ndarray
    U: np.ndarray
    s: np.ndarray
    Vt: np.ndarray
    lam: float
    objective_trace: list[float]
    iters: int
    converged: bool
    restarts: int = 0

    @property
    def rank(self) -> int:
        return int(self.s.size)


def _weights(data: ComparisonDataset) -> tuple[np.ndarray, np.ndarray]:
    """Dense ``W = mask / p_i`` and zero-filled outcomes."""
    W = np.zeros(data.shape)
    W[data.users, data.pairs] = 1.0 / data.p[data.users]
    return W, data.outcome_matrix()


def convex_objective(data: ComparisonDataset, L: np.ndarray, lam: float) -> float:
    W, Y = _weights(data)
    return 0.5 * float(np.sum(W * (Y - L) ** 2)) + lam * float(
        np.linalg.svd(L, compute_uv=False).sum()
    )


def solve_convex(
    data: ComparisonDataset,
    cfg: SolverConfig | None = None,
    init: np.ndarray | None = None,
) -> ConvexSolution:
    """Proximal gradient (optionally FISTA with restart) for the convex problem.

    The step is ``1 / max_i(1/p_i)``, the exact Lipschitz constant of the
    quadratic loss, so no line search is needed. In accelerated mode a step
    that would raise the objective is discarded and the momentum reset; the
    plain step taken instead cannot increase it, so the recorded trace is
    non-increasing in both modes. Stops when the relative decrease drops
    below ``cfg.tol``; otherwise returns the last (best) iterate with
    ``converged=False``.
    """
    cfg = cfg or SolverConfig()
    if data.n_obs == 0:
        raise SolverError("dataset has no observations")
    lam = cfg.resolve_lambda(data)
    W, Y = _weights(data)
    step = 1.0 / float(np.max(1.0 / data.p))
    tau = step * lam

    def loss(L):
        return 0.5 * float(np.sum(W * (Y - L) ** 2))

    if init is None:
        x = np.zeros(data.shape)
        U = np.zeros((data.d1, 0))
        s = np.zeros(0)
        Vt = np.zeros((0, data.K))
        F = loss(x)
    else:
        U, s, Vt = top_svd(init, min(init.shape), method="full")
        keep = s > 1e-12 * max(s[0], 1e-300)
        U, s, Vt = U[:, keep], s[keep], Vt[keep]
        x = (U * s) @ Vt
        F = loss(x) + lam * float(s.sum())
    z = x
    momentum = 1.0
    trace = [F]
    restarts = 0
    converged = False
    it = 0
    while it < cfg.max_iters:
        it += 1
        grad = W * (z - Y)
        Un, sn, Vtn = singular_value_threshold(
            z - step * grad, tau, rank_hint=s.size, method=cfg.svd, V0=Vt.T
        )
        xn = (Un * sn) @ Vtn
        Fn = loss(xn) + lam * float(sn.sum())
        if Fn > F:
            if cfg.accelerate and z is not x:
                # discard the extrapolated step and retry from the last iterate
                z = x
                momentum = 1.0
                restarts += 1
                continue
            # plain prox step with step 1/L cannot increase F; only rounding gets here
            if Fn - F > 1e-12 * max(abs(F), 1.0):
                log.warning("objective increased by %.3g in a plain step", Fn - F)
            converged = True
            break
        decrease = (F - Fn) / max(abs(F), 1.0)
        if cfg.accelerate:
            nxt = (1.0 + math.sqrt(1.0 + 4.0 * momentum * momentum)) / 2.0
            z = xn + ((momentum - 1.0) / nxt) * (xn - x)
            momentum = nxt
        else:
            z = xn
        x, U, s, Vt, F = xn, Un, sn, Vtn, Fn
        trace.append(F)
        if decrease < cfg.tol:
            converged = True
            break
    if not converged:
        log.warning("solve_convex: no convergence in %d iterations", cfg.max_iters)
    return ConvexSolution(x, U, s, Vt, lam, trace, it, converged, restarts)


def kkt_residuals(data: ComparisonDataset, sol: ConvexSolution) -> dict[str, float]:
    """Optimality residuals of a nuclear-norm solution.

    With ``G`` the loss gradient at ``L`` and ``L = U S V^T`` the compact
    SVD, optimality means ``P_T(G) = -lam U V^T`` and ``||P_T_perp(G)|| <= lam``.
    Returns ``perp_ratio = ||P_T_perp(G)||_op / lam`` and
    ``tangent_ratio = ||P_T(G) + lam U V^T||_F / (lam sqrt(rank))``.
    """
    W, Y = _weights(data)
    G = W * (sol.L - Y)
    lam = sol.lam
    U, V = sol.U, sol.Vt.T
    UtG = U.T @ G
    GV = G @ V
    perp = G - U @ UtG - GV @ V.T + U @ (UtG @ V) @ V.T
    tangent = G - perp
    perp_ratio = float(np.linalg.norm(perp, 2)) / lam
    r = max(sol.rank, 1)
    tangent_ratio = float(np.linalg.norm(tangent + lam * U @ V.T)) / (lam * math.sqrt(r))
    return {"perp_ratio": perp_ratio, "tangent_ratio": tangent_ratio, "rank": sol.rank}


def recover_gaps(L_hat: np.ndarray, clip_eps: float = 1e-6) -> np.ndarray:
    """Clip probabilities into ``[clip_eps, 1 - clip_eps]`` and apply the logit."""
    return sigmoid_inv(np.clip(np.asarray(L_hat, dtype=float), clip_eps, 1.0 - clip_eps))


def average_scores(M_hat: np.ndarray, space: PairSpace | None = None) -> np.ndarray:
    """Score matrix whose gap matrix best matches ``M_hat``; rows sum to zero.

    ``Theta[:, j] = (sum_{j2 > j} M[:, L(j, j2)] - sum_{j2 < j} M[:, L(j2, j)]) / d2``.
    """
    M_hat = np.asarray(M_hat, dtype=float)
    if space is None:
        space = _space_for(M_hat.shape[1])
    theta = M_hat @ space.difference_operator.T / space.d2
    return theta - theta.mean(axis=1, keepdims=True)


def _space_for(K: int) -> PairSpace:
    d2 = int(round((1 + math.sqrt(1 + 8 * K)) / 2))
    if d2 * (d2 - 1) // 2 != K:
        raise ValueError(f"{K} columns is not a pair count")
    return PairSpace(d2)


@dataclass
class FactoredConfig:
    rank: int
    lam: float | None = None
    step: float | None = None
    iters: int = 5000

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")


@dataclass
class FactoredSolution:
    X: np.ndarray
    Y: np.ndarray
    grad_norm: float
    best_iter: int
    objective_trace: list[float] = field(repr=False)

    @property
    def L(self) -> np.ndarray:
        return self.X @ self.Y.T


def factored_objective(data: ComparisonDataset, X, Y, lam: float) -> float:
    W, Yobs = _weights(data)
    R = Yobs - X @ Y.T
    return 0.5 * float(np.sum(W * R * R)) + 0.5 * lam * (float(np.sum(X * X)) + float(np.sum(Y * Y)))


def factored_gradient(data: ComparisonDataset, X, Y, lam: float) -> tuple[np.ndarray, np.ndarray]:
    W, Yobs = _weights(data)
    R = W * (Yobs - X @ Y.T)
    return -R @ Y + lam * X, -R.T @ X + lam * Y


def solve_factored(data: ComparisonDataset, cfg: FactoredConfig) -> FactoredSolution:
    """Gradient descent on the factored surrogate from a spectral start.

    The start is the rank-``R`` SVD of the ``1/p_i``-weighted, zero-filled
    outcome matrix split evenly between the factors. Returns the iterate with
    the smallest gradient norm seen.
    """
    if cfg.rank > min(data.shape):
        raise ValueError(f"rank {cfg.rank} exceeds min{data.shape}")
    lam = cfg.lam if cfg.lam is not None else default_lambda(data)
    W, Yobs = _weights(data)
    U, s, Vt = top_svd(W * Yobs, cfg.rank, method="full")
    X = U * np.sqrt(s)
    Y = Vt.T * np.sqrt(s)
    eta = cfg.step if cfg.step is not None else 0.2 / float(s[0])

    def objective(X, Y):
        R = Yobs - X @ Y.T
        return 0.5 * float(np.sum(W * R * R)) + 0.5 * lam * (float(np.sum(X * X)) + float(np.sum(Y * Y)))

    f0 = objective(X, Y)
    trace = [f0]
    best = (math.inf, X, Y, 0)
    for t in range(cfg.iters + 1):
        R = W * (Yobs - X @ Y.T)
        gX = -R @ Y + lam * X
        gY = -R.T @ X + lam * Y
        gnorm = math.sqrt(float(np.sum(gX * gX)) + float(np.sum(gY * gY)))
        if gnorm < best[0]:
            best = (gnorm, X, Y, t)
        if t == cfg.iters:
            break
        X, Y = X - eta * gX, Y - eta * gY
        f = objective(X, Y)
        trace.append(f)
        if not math.isfinite(f) or f > 10.0 * max(f0, 1e-300):
            raise SolverError(
                f"factored gradient descent diverged at iteration {t + 1}: objective {f:.4g} vs "
                f"initial {f0:.4g} (step {eta:.3g}); try a smaller step"
            )
    gnorm, X, Y, t = best
    return FactoredSolution(X, Y, gnorm, t, trace)


@dataclass
class EstimateBundle:
    L_hat: np.ndarray
    M_hat: np.ndarray
    Theta_hat: np.ndarray
    objective_trace: list[float]
    solver_iters: int
    converged: bool
    lam: float
    solution: ConvexSolution = field(repr=False)
    empty_users: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def estimate_pipeline(
    data: ComparisonDataset,
    cfg: SolverConfig | None = None,
    init: np.ndarray | None = None,
) -> EstimateBundle:
    """Solve, invert the link, and average into scores.

    Users without any observation get an all-zero gap row (flat scores) and
    are listed in ``empty_users``.
    """
    cfg = cfg or SolverConfig()
    sol = solve_convex(data, cfg, init=init)
    L_hat = np.clip(sol.L, cfg.clip_eps, 1.0 - cfg.clip_eps)
    empty = np.flatnonzero(data.user_counts() == 0)
    if empty.size:
        L_hat[empty] = 0.5
    M_hat = recover_gaps(L_hat, cfg.clip_eps)
    theta = average_scores(M_hat, data.space)
    return EstimateBundle(
        L_hat, M_hat, theta, sol.objective_trace, sol.iters, sol.converged, sol.lam, sol, empty
    )
