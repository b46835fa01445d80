"""Entropy-regularized optimal transport rewards between trajectories.

Given two sequences of embeddings (a behavior rollout and an expert
demonstration), build a pairwise cost matrix, solve for the optimal
coupling with log-domain Sinkhorn iterations under uniform marginals,
and turn the transported cost into a per-step reward signal.

All functions are pure: same inputs give bit-identical outputs, and
nothing here holds state, so concurrent callers are safe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "CostMatrix",
    "TransportPlan",
    "RewardVector",
    "DegenerateEmbeddingError",
    "SinkhornConvergenceError",
    "SinkhornNumericalError",
    "pairwise_cost",
    "build_cost_matrix",
    "sinkhorn",
    "ot_rewards",
]

METRICS = ("cosine", "euclidean")

DEFAULT_EPSILON = 0.05
DEFAULT_MAX_ITERS = 500
DEFAULT_TOL = 1e-6
DEFAULT_REWARD_SCALE = 10.0


class DegenerateEmbeddingError(ValueError):
    """Cosine distance is undefined for a zero-norm embedding."""


class SinkhornConvergenceError(RuntimeError):
    """Sinkhorn ran out of iterations before meeting the marginal tolerance."""

    def __init__(self, marginal_error: float, max_iters: int):
        self.marginal_error = marginal_error
        self.max_iters = max_iters
        super().__init__(
            f"sinkhorn did not converge in {max_iters} iterations "
            f"(marginal error {marginal_error:.3e})"
        )


class SinkhornNumericalError(RuntimeError):
    """Scaling blew up: epsilon too small for the cost scale."""


@dataclass(frozen=True)
class CostMatrix:
    """Pairwise transport costs, rows = behavior steps, columns = expert steps."""

    entries: np.ndarray
    metric: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape


@dataclass(frozen=True)
class TransportPlan:
    """Coupling between behavior and expert steps with uniform marginals."""

    coupling: np.ndarray
    epsilon: float
    iterations_used: int
    marginal_error: float


@dataclass(frozen=True)
class RewardVector:
    """Per-step rewards (negated, scaled transported cost) for one rollout.

    ``transported_cost`` keeps the unsigned, unscaled quantity
    sum(C * coupling) for diagnostics.
    """

    per_step: np.ndarray
    total: float
    transported_cost: float


def _as_embedding(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _as_embedding_stack(seq, name: str) -> np.ndarray:
    arr = np.asarray(seq, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 0 or arr.ndim == 2 and arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if arr.ndim != 2:
        raise ValueError(f"{name} must stack to a 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _normalize_rows(arr: np.ndarray, name: str) -> np.ndarray:
    norms = np.linalg.norm(arr, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateEmbeddingError(
            f"degenerate embedding: zero-norm vector in {name} under cosine metric"
        )
    return arr / norms[:, None]


def pairwise_cost(a, b, metric: str = "cosine") -> float:
    """Distance between two embeddings.

    Cosine distance is computed as 0.5 * ||a/|a| - b/|b||^2, which equals
    1 - cos(a, b) exactly in real arithmetic and is nonnegative (and
    exactly zero for identical vectors) in floating point.
    """
    a = _as_embedding(a, "a")
    b = _as_embedding(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if metric == "euclidean":
        return float(np.linalg.norm(a - b))
    if metric == "cosine":
        ua = _normalize_rows(a[None, :], "a")[0]
        ub = _normalize_rows(b[None, :], "b")[0]
        d = ua - ub
        return float(0.5 * np.dot(d, d))
    raise ValueError(f"unknown metric {metric!r}, expected one of {METRICS}")


def build_cost_matrix(behavior, expert, metric: str = "cosine") -> CostMatrix:
    """Pairwise cost matrix between two embedding sequences."""
    B = _as_embedding_stack(behavior, "behavior")
    E = _as_embedding_stack(expert, "expert")
    if B.shape[1] != E.shape[1]:
        raise ValueError(
            f"embedding dimension mismatch: behavior {B.shape[1]} vs expert {E.shape[1]}"
        )
    if metric == "euclidean":
        diff = B[:, None, :] - E[None, :, :]
        entries = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    elif metric == "cosine":
        UB = _normalize_rows(B, "behavior")
        UE = _normalize_rows(E, "expert")
        diff = UB[:, None, :] - UE[None, :, :]
        entries = 0.5 * np.einsum("ijk,ijk->ij", diff, diff)
    else:
        raise ValueError(f"unknown metric {metric!r}, expected one of {METRICS}")
    return CostMatrix(entries=entries, metric=metric)


def _cost_entries(cost) -> np.ndarray:
    entries = cost.entries if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=np.float64)
    if entries.ndim != 2 or entries.size == 0:
        raise ValueError(f"cost matrix must be non-empty 2-D, got shape {entries.shape}")
    if not np.all(np.isfinite(entries)):
        raise ValueError("cost matrix contains non-finite entries")
    if np.any(entries < 0.0):
        raise ValueError("cost matrix contains negative entries")
    return entries


def sinkhorn(
    cost,
    epsilon: float,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> TransportPlan:
    """Entropy-regularized OT plan under uniform marginals.

    Solves min <C, mu> - epsilon * H(mu) over couplings whose rows sum to
    1/T_b and columns to 1/T_e, via log-domain scaling updates (stable for
    small epsilon). Converged when the largest row/column marginal
    deviation is at most ``tol``.
    """
    C = _cost_entries(cost)
    if epsilon <= 0.0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if max_iters < 1:
        raise ValueError(f"max_iters must be >= 1, got {max_iters}")
    if tol <= 0.0:
        raise ValueError(f"tol must be positive, got {tol}")

    tb, te = C.shape
    log_a = np.full(tb, -np.log(tb))
    log_b = np.full(te, -np.log(te))
    with np.errstate(over="ignore"):
        log_K = -C / epsilon
    if not np.all(np.isfinite(log_K)):
        raise SinkhornNumericalError("epsilon too small for cost scale")

    f = np.zeros(tb)
    g = np.zeros(te)
    iterations = 0

    # Warm-start the potentials by annealing epsilon down from the cost
    # scale. Each level halves epsilon; a few updates per level track the
    # drifting fixed point. This leaves the final fixed point untouched but
    # cuts iterations sharply when epsilon is small relative to the costs.
    level = max(float(np.max(C)) / 2.0, epsilon)
    while level > epsilon and iterations < max_iters:
        log_K_level = -C / level
        for _ in range(4):
            if iterations >= max_iters:
                break
            f = log_a - _logsumexp_rows(log_K_level + g[None, :])
            g = log_b - _logsumexp_rows((log_K_level + f[:, None]).T)
            iterations += 1
        level *= 0.5

    err = np.inf
    while iterations < max_iters:
        f = log_a - _logsumexp_rows(log_K + g[None, :])
        g = log_b - _logsumexp_rows((log_K + f[:, None]).T)
        iterations += 1
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
            raise SinkhornNumericalError("epsilon too small for cost scale")
        # After the column update the column marginals are exact; the row
        # deviation measures how far the plan is from feasible.
        log_plan = f[:, None] + log_K + g[None, :]
        row_sums = np.exp(_logsumexp_rows(log_plan))
        err = float(np.max(np.abs(row_sums - 1.0 / tb)))
        if err <= tol:
            break
    else:
        raise SinkhornConvergenceError(marginal_error=err, max_iters=max_iters)

    coupling = _round_to_marginals(np.exp(f[:, None] + log_K + g[None, :]), tb, te)
    row_err = float(np.max(np.abs(coupling.sum(axis=1) - 1.0 / tb)))
    col_err = float(np.max(np.abs(coupling.sum(axis=0) - 1.0 / te)))
    return TransportPlan(
        coupling=coupling,
        epsilon=float(epsilon),
        iterations_used=iterations,
        marginal_error=max(row_err, col_err),
    )


def _round_to_marginals(P: np.ndarray, tb: int, te: int) -> np.ndarray:
    """Project a near-feasible plan onto the uniform-marginal polytope.

    Scale down overfull rows, then overfull columns, then spread the
    remaining deficit as a rank-one top-up. Moves entries by at most the
    original marginal violation, and makes the LP lower bound on the
    transported cost hold exactly rather than only up to the tolerance.
    """
    a = 1.0 / tb
    b = 1.0 / te
    row = P.sum(axis=1)
    P = P * np.where(row > a, a / np.maximum(row, 1e-300), 1.0)[:, None]
    col = P.sum(axis=0)
    P = P * np.where(col > b, b / np.maximum(col, 1e-300), 1.0)[None, :]
    da = np.maximum(a - P.sum(axis=1), 0.0)
    db = np.maximum(b - P.sum(axis=0), 0.0)
    deficit = da.sum()
    if deficit > 0.0 and db.sum() > 0.0:
        P = P + np.outer(da, db) / db.sum()
    return P


def _logsumexp_rows(M: np.ndarray) -> np.ndarray:
    m = np.max(M, axis=1)
    return m + np.log(np.sum(np.exp(M - m[:, None]), axis=1))


def ot_rewards(
    behavior,
    expert,
    metric: str = "cosine",
    epsilon: float = DEFAULT_EPSILON,
    scale: float = DEFAULT_REWARD_SCALE,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> RewardVector:
    """Per-step rewards for a behavior trajectory against an expert one.

    Step t earns -scale * sum_t' C[t, t'] * coupling[t, t']: the cost its
    transported mass incurs, negated so that closer matching means higher
    reward.
    """
    if scale <= 0.0:
        raise ValueError(f"scale must be positive, got {scale}")
    cost = build_cost_matrix(behavior, expert, metric)
    plan = sinkhorn(cost, epsilon=epsilon, max_iters=max_iters, tol=tol)
    transported = cost.entries * plan.coupling
    per_step = -scale * transported.sum(axis=1)
    return RewardVector(
        per_step=per_step,
        total=float(per_step.sum()),
        transported_cost=float(transported.sum()),
    )
