"""Non-parametric base policies built from demonstrations.

Two kinds are provided, both queried as black boxes by the online
learner: open-loop replay of one demonstration's action sequence, and
nearest-neighbor retrieval over encoder features with locally weighted
regression on the retrieved actions. Policies and indexes are immutable
after construction; nothing here is ever parameter-updated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .demos import DemoSet, Trajectory
from .encoders import Encoder, encode
from .ot import METRICS, build_cost_matrix

DEFAULT_K = 3
DEFAULT_WEIGHT_TEMPERATURE = 1.0


def _frozen_2d(arr, name: str) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    if out.ndim != 2 or out.shape[0] == 0:
        raise ValueError(f"{name} must be a nonempty 2-D array, got shape {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite values")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class OpenLoopPolicy:
    """Action sequence from one demonstration, replayed by timestep."""

    action_sequence: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "action_sequence", _frozen_2d(self.action_sequence, "action_sequence")
        )

    @property
    def horizon(self) -> int:
        return self.action_sequence.shape[0]


def open_loop_policy(traj: Trajectory) -> OpenLoopPolicy:
    return OpenLoopPolicy(action_sequence=traj.actions)


def open_loop_act(policy: OpenLoopPolicy, t: int) -> np.ndarray:
    """Action at timestep t; queries past the horizon hold the final action."""
    if t < 0:
        raise ValueError(f"timestep must be >= 0, got {t}")
    return policy.action_sequence[min(t, policy.horizon - 1)].copy()


@dataclass(frozen=True)
class OpenLoopBank:
    """One open-loop policy per demo, selected by first-observation feature."""

    policies: tuple[OpenLoopPolicy, ...]
    first_embeddings: np.ndarray

    def __post_init__(self):
        policies = tuple(self.policies)
        if not policies:
            raise ValueError("bank needs at least one policy")
        emb = _frozen_2d(self.first_embeddings, "first_embeddings")
        if emb.shape[0] != len(policies):
            raise ValueError(
                f"{len(policies)} policies but {emb.shape[0]} first embeddings"
            )
        object.__setattr__(self, "policies", policies)
        object.__setattr__(self, "first_embeddings", emb)


def open_loop_bank(demos: DemoSet, encoder: Encoder) -> OpenLoopBank:
    first_obs = np.stack([tr.observations[0] for tr in demos.trajectories])
    return OpenLoopBank(
        policies=tuple(open_loop_policy(tr) for tr in demos.trajectories),
        first_embeddings=encode(encoder, first_obs),
    )


def select_open_loop(bank: OpenLoopBank, z0) -> OpenLoopPolicy:
    """Policy whose demo starts nearest the episode's first feature.

    Euclidean distance; ties resolve to the lowest demo index.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.shape != (bank.first_embeddings.shape[1],):
        raise ValueError(
            f"feature shape {z0.shape} does not match bank dimension "
            f"{bank.first_embeddings.shape[1]}"
        )
    dists = np.linalg.norm(bank.first_embeddings - z0[None, :], axis=1)
    return bank.policies[int(np.argmin(dists))]


@dataclass(frozen=True)
class VinnIndex:
    """Retrieval index of (feature, action) pairs from all demos."""

    embeddings: np.ndarray
    actions: np.ndarray
    k: int = DEFAULT_K
    weight_temperature: float = DEFAULT_WEIGHT_TEMPERATURE
    distance: str = "euclidean"

    def __post_init__(self):
        emb = _frozen_2d(self.embeddings, "embeddings")
        act = _frozen_2d(self.actions, "actions")
        if emb.shape[0] != act.shape[0]:
            raise ValueError(
                f"{emb.shape[0]} embeddings but {act.shape[0]} actions"
            )
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not self.weight_temperature > 0.0:
            raise ValueError(
                f"weight_temperature must be positive, got {self.weight_temperature}"
            )
        if self.distance not in METRICS:
            raise ValueError(
                f"unknown distance {self.distance!r}, expected one of {METRICS}"
            )
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "actions", act)


def build_vinn_index(
    demos: DemoSet,
    encoder: Encoder,
    k: int = DEFAULT_K,
    weight_temperature: float = DEFAULT_WEIGHT_TEMPERATURE,
    distance: str = "euclidean",
) -> VinnIndex:
    """Index every (observation, action) pair of every demo, in demo order."""
    obs, act = demos.all_pairs()
    return VinnIndex(
        embeddings=encode(encoder, obs),
        actions=act,
        k=k,
        weight_temperature=weight_temperature,
        distance=distance,
    )


def vinn_act(idx: VinnIndex, z) -> np.ndarray:
    """Locally weighted action for feature z.

    The k nearest entries by the index's distance get weights
    exp(-d_i / weight_temperature), normalized to sum 1; the result is
    the weighted sum of their actions, hence inside their convex hull.
    Equal distances resolve to the lowest entry index.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (idx.embeddings.shape[1],):
        raise ValueError(
            f"feature shape {z.shape} does not match index dimension "
            f"{idx.embeddings.shape[1]}"
        )
    dists = build_cost_matrix(z[None, :], idx.embeddings, metric=idx.distance).entries[0]
    k_eff = min(idx.k, idx.embeddings.shape[0])
    order = np.argsort(dists, kind="stable")[:k_eff]
    # shift by the minimum before exponentiating: identical after
    # normalization, but immune to underflow at large distances
    logits = -(dists[order] - dists[order[0]]) / idx.weight_temperature
    weights = np.exp(logits)
    weights /= weights.sum()
    return weights @ idx.actions[order]
