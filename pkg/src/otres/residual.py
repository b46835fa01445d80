"""Online residual learner over a fixed base policy.

A small actor proposes bounded per-dimension offsets on top of whatever
action the base policy chose; twin critics with slow-moving targets score
the composed behavior from trajectory-matching rewards that arrive only
at episode end. The pieces here are deliberately separable: a replay
buffer that respects episode boundaries for n-step windows, the
offset-bounded actor, clipped double-Q critic updates, and the adaptive
regularization weight used by the offset-regularization ablation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import (
    AdamState,
    DenseNet,
    adam_step,
    backward,
    clone_net,
    forward,
    make_dense_net,
    net_parameters,
    soft_update,
)

DEFAULT_CAPACITY = 5000
DEFAULT_BATCH_SIZE = 256
DEFAULT_NSTEP = 3
DEFAULT_GAMMA = 0.99
DEFAULT_OFFSET_BOUND = 0.3
DEFAULT_EXPLORATION_STD = 0.1
DEFAULT_TARGET_TAU = 0.01

GUIDANCE_LEVELS = ("guided", "semi_guided", "unguided")


class SeedPhaseError(RuntimeError):
    """Raised when sampling is requested before enough labeled data exists."""


def _finite_vector(v, name: str) -> np.ndarray:
    out = np.asarray(v, dtype=np.float64)
    if out.ndim != 1 or out.shape[0] == 0:
        raise ValueError(f"{name} must be a nonempty 1-D vector, got shape {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite values")
    return out


@dataclass(frozen=True)
class Transition:
    """One environment step; reward stays None until episode-end labeling."""

    z: np.ndarray
    action: np.ndarray
    base_action: np.ndarray
    z_next: np.ndarray
    reward: float | None = None

    def __post_init__(self):
        z = _finite_vector(self.z, "z")
        a = _finite_vector(self.action, "action")
        ab = _finite_vector(self.base_action, "base_action")
        zn = _finite_vector(self.z_next, "z_next")
        if z.shape != zn.shape:
            raise ValueError(f"z shape {z.shape} differs from z_next shape {zn.shape}")
        if a.shape != ab.shape:
            raise ValueError(
                f"action shape {a.shape} differs from base_action shape {ab.shape}"
            )
        if self.reward is not None and not np.isfinite(self.reward):
            raise ValueError(f"labeled reward must be finite, got {self.reward}")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "action", a)
        object.__setattr__(self, "base_action", ab)
        object.__setattr__(self, "z_next", zn)

    @property
    def labeled(self) -> bool:
        return self.reward is not None

    @property
    def residual(self) -> np.ndarray:
        return self.action - self.base_action


def label_episode(transitions, rewards) -> list[Transition]:
    """Fill per-step rewards into an episode's transitions."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.shape != (len(transitions),):
        raise ValueError(
            f"{len(transitions)} transitions but reward shape {rewards.shape}"
        )
    return [
        Transition(t.z, t.action, t.base_action, t.z_next, reward=float(r))
        for t, r in zip(transitions, rewards)
    ]


class ReplayBuffer:
    """FIFO ring of transitions with episode boundaries preserved.

    Whole episodes are appended; eviction removes the oldest transitions
    first, which can shorten the oldest episode but never reorders or
    splices. n-step windows read forward from a start index and stop at
    the episode boundary, so partial eviction at the front is harmless.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._transitions: list[Transition] = []
        self._episode_ids: list[int] = []
        self._next_episode = 0

    def __len__(self) -> int:
        return len(self._transitions)

    @property
    def labeled_size(self) -> int:
        return sum(1 for t in self._transitions if t.labeled)

    def add_episode(self, transitions) -> None:
        transitions = list(transitions)
        if not transitions:
            raise ValueError("episode must contain at least one transition")
        if len(transitions) > self.capacity:
            raise ValueError(
                f"episode of {len(transitions)} transitions exceeds capacity {self.capacity}"
            )
        labeled = [t.labeled for t in transitions]
        if any(labeled) and not all(labeled):
            raise ValueError("episode transitions must be uniformly labeled or unlabeled")
        ref = transitions[0]
        for t in transitions[1:]:
            if t.z.shape != ref.z.shape or t.action.shape != ref.action.shape:
                raise ValueError("transition dimensions differ within episode")
        eid = self._next_episode
        self._next_episode += 1
        self._transitions.extend(transitions)
        self._episode_ids.extend([eid] * len(transitions))
        excess = len(self._transitions) - self.capacity
        if excess > 0:
            del self._transitions[:excess]
            del self._episode_ids[:excess]

    def window(self, start: int, n: int):
        """Rewards r_start..r_{start+n-1} within the episode, plus the
        bootstrap transition at start+n when the episode continues there."""
        eid = self._episode_ids[start]
        rewards = []
        for j in range(start, min(start + n, len(self._transitions))):
            if self._episode_ids[j] != eid:
                break
            rewards.append(self._transitions[j].reward)
        boot = start + n
        has_boot = boot < len(self._transitions) and self._episode_ids[boot] == eid
        return rewards, (self._transitions[boot] if has_boot else None)


@dataclass(frozen=True)
class ActionMask:
    """Per-dimension {0,1} exploration multipliers.

    guided restricts offsets to a subset of dimensions; semi_guided and
    unguided leave all dimensions open (semi_guided instead runs with a
    halved offset bound, configured where the learner is built).
    """

    multipliers: np.ndarray
    level: str

    def __post_init__(self):
        m = np.asarray(self.multipliers, dtype=np.float64)
        if m.ndim != 1 or m.shape[0] == 0:
            raise ValueError(f"multipliers must be a nonempty vector, got shape {m.shape}")
        if not np.all((m == 0.0) | (m == 1.0)):
            raise ValueError("multipliers must be 0 or 1")
        if self.level not in GUIDANCE_LEVELS:
            raise ValueError(
                f"unknown guidance level {self.level!r}, expected one of {GUIDANCE_LEVELS}"
            )
        if self.level == "guided":
            if not (np.any(m == 0.0) and np.any(m == 1.0)):
                raise ValueError("guided mask needs at least one open and one closed dim")
        elif not np.all(m == 1.0):
            raise ValueError(f"{self.level} mask must leave every dimension open")
        m.setflags(write=False)
        object.__setattr__(self, "multipliers", m)


def guidance_mask(level: str, action_dim: int) -> ActionMask:
    """Mask for a guidance level on planar (x, y) actions: guided explores
    y only; semi_guided and unguided explore both dimensions."""
    if level == "guided":
        m = np.zeros(action_dim)
        m[1:] = 1.0
        return ActionMask(multipliers=m, level=level)
    return ActionMask(multipliers=np.ones(action_dim), level=level)


@dataclass
class ResidualActorCritic:
    """Offset actor with twin critics and their slow-moving targets."""

    actor: DenseNet
    critic1: DenseNet
    critic2: DenseNet
    target1: DenseNet
    target2: DenseNet
    z_dim: int
    action_dim: int
    offset_bound: float = DEFAULT_OFFSET_BOUND
    exploration_std: float = DEFAULT_EXPLORATION_STD
    condition_on_base_action: bool = True

    def __post_init__(self):
        if not self.offset_bound > 0.0:
            raise ValueError(f"offset_bound must be positive, got {self.offset_bound}")
        if self.exploration_std < 0.0:
            raise ValueError(
                f"exploration_std must be >= 0, got {self.exploration_std}"
            )
        actor_in = self.z_dim + (self.action_dim if self.condition_on_base_action else 0)
        if self.actor.input_dim != actor_in:
            raise ValueError(
                f"actor input dim {self.actor.input_dim}, expected {actor_in}"
            )
        critic_in = self.z_dim + 2 * self.action_dim
        for name, net in (("critic1", self.critic1), ("critic2", self.critic2),
                          ("target1", self.target1), ("target2", self.target2)):
            if net.input_dim != critic_in or net.output_dim != 1:
                raise ValueError(
                    f"{name} must map {critic_in} -> 1, got "
                    f"{net.input_dim} -> {net.output_dim}"
                )
        if self.actor.output_dim != self.action_dim:
            raise ValueError(
                f"actor output dim {self.actor.output_dim}, expected {self.action_dim}"
            )


def make_residual_actor_critic(
    z_dim: int,
    action_dim: int,
    rng: np.random.Generator,
    hidden_dim: int = 1024,
    offset_bound: float = DEFAULT_OFFSET_BOUND,
    exploration_std: float = DEFAULT_EXPLORATION_STD,
    condition_on_base_action: bool = True,
    random_init: bool = False,
) -> ResidualActorCritic:
    """Build actor, critics, and targets.

    The actor's final layer is zero-initialized by default so training
    starts exactly at the base policy; random_init=True restores plain
    orthogonal init for fidelity runs.
    """
    actor_in = z_dim + (action_dim if condition_on_base_action else 0)
    critic_in = z_dim + 2 * action_dim
    actor = make_dense_net(
        [actor_in, hidden_dim, hidden_dim, action_dim],
        rng,
        output_activation="tanh",
        zero_final=not random_init,
    )
    critic1 = make_dense_net([critic_in, hidden_dim, hidden_dim, 1], rng)
    critic2 = make_dense_net([critic_in, hidden_dim, hidden_dim, 1], rng)
    return ResidualActorCritic(
        actor=actor,
        critic1=critic1,
        critic2=critic2,
        target1=clone_net(critic1),
        target2=clone_net(critic2),
        z_dim=z_dim,
        action_dim=action_dim,
        offset_bound=offset_bound,
        exploration_std=exploration_std,
        condition_on_base_action=condition_on_base_action,
    )


def _actor_input(ac: ResidualActorCritic, z2d: np.ndarray, ab2d: np.ndarray) -> np.ndarray:
    if ac.condition_on_base_action:
        return np.concatenate([z2d, ab2d], axis=1)
    return z2d


def _policy_offsets(ac: ResidualActorCritic, z2d: np.ndarray, ab2d: np.ndarray) -> np.ndarray:
    """Deterministic bounded offsets for a batch: offset_bound * tanh out."""
    return ac.offset_bound * forward(ac.actor, _actor_input(ac, z2d, ab2d))


def residual_act(
    ac: ResidualActorCritic,
    z,
    a_b,
    mask: ActionMask,
    explore: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Masked, bounded offset for one step.

    Exploration adds Gaussian noise after the tanh bound; the sum is
    re-clipped to the offset bound, then masked dimensions are zeroed.
    Deterministic when explore is false.
    """
    z = np.asarray(z, dtype=np.float64)
    a_b = np.asarray(a_b, dtype=np.float64)
    if z.shape != (ac.z_dim,):
        raise ValueError(f"feature shape {z.shape}, expected ({ac.z_dim},)")
    if a_b.shape != (ac.action_dim,):
        raise ValueError(f"base action shape {a_b.shape}, expected ({ac.action_dim},)")
    if mask.multipliers.shape != (ac.action_dim,):
        raise ValueError(
            f"mask has {mask.multipliers.shape[0]} dims, expected {ac.action_dim}"
        )
    a_r = _policy_offsets(ac, z[None, :], a_b[None, :])[0]
    if not np.all(np.isfinite(a_r)):
        raise RuntimeError(f"non-finite actor output {a_r}")
    if explore:
        if rng is None:
            raise ValueError("explore=True requires an rng")
        a_r = a_r + rng.normal(0.0, ac.exploration_std, size=ac.action_dim)
    a_r = np.clip(a_r, -ac.offset_bound, ac.offset_bound)
    return mask.multipliers * a_r


def compose_action(a_b, a_r, low: float = -1.0, high: float = 1.0) -> np.ndarray:
    """Element-wise sum clamped to the environment action bounds."""
    a_b = np.asarray(a_b, dtype=np.float64)
    a_r = np.asarray(a_r, dtype=np.float64)
    if a_b.shape != a_r.shape:
        raise ValueError(f"shape mismatch: {a_b.shape} vs {a_r.shape}")
    return np.clip(a_b + a_r, low, high)


@dataclass(frozen=True)
class Batch:
    """Sampled n-step windows, ready for target and loss evaluation.

    rewards holds up to n per-window rewards, zero-padded past
    valid_counts; bootstrap never fires on a truncated window.
    """

    z: np.ndarray
    base_action: np.ndarray
    action: np.ndarray
    rewards: np.ndarray
    valid_counts: np.ndarray
    bootstrap: np.ndarray
    z_boot: np.ndarray
    base_action_boot: np.ndarray

    def __post_init__(self):
        B = self.z.shape[0]
        n = self.rewards.shape[1] if self.rewards.ndim == 2 else -1
        if B == 0:
            raise ValueError("batch must be nonempty")
        shapes = {
            "z": (self.z, (B, self.z.shape[1])),
            "base_action": (self.base_action, (B, self.base_action.shape[1])),
            "action": (self.action, (B, self.base_action.shape[1])),
            "rewards": (self.rewards, (B, n)),
            "valid_counts": (self.valid_counts, (B,)),
            "bootstrap": (self.bootstrap, (B,)),
            "z_boot": (self.z_boot, (B, self.z.shape[1])),
            "base_action_boot": (self.base_action_boot, (B, self.base_action.shape[1])),
        }
        for name, (arr, want) in shapes.items():
            if arr.shape != want:
                raise ValueError(f"{name} shape {arr.shape}, expected {want}")
        if np.any(self.valid_counts < 1) or np.any(self.valid_counts > n):
            raise ValueError("valid_counts must lie in [1, n]")
        if np.any(self.bootstrap & (self.valid_counts < n)):
            raise ValueError("bootstrap requires a full n-reward window")
        live = np.arange(n)[None, :] < self.valid_counts[:, None]
        if not np.all(np.isfinite(self.rewards[live])):
            raise ValueError("batch contains unlabeled or non-finite rewards")

    def __len__(self) -> int:
        return self.z.shape[0]


def sample_batch(
    buffer: ReplayBuffer,
    size: int = DEFAULT_BATCH_SIZE,
    n: int = DEFAULT_NSTEP,
    rng: np.random.Generator | None = None,
) -> Batch:
    """Uniform sample (with replacement) over labeled window starts.

    Every labeled transition is a valid start; windows reaching the
    episode end truncate there and drop the bootstrap.
    """
    if rng is None:
        raise ValueError("sample_batch requires an rng")
    if size < 1 or n < 1:
        raise ValueError(f"size and n must be >= 1, got size={size} n={n}")
    valid = [i for i, t in enumerate(buffer._transitions) if t.labeled]
    if len(valid) < size:
        raise SeedPhaseError(
            f"still in seed phase: {len(valid)} labeled transitions, need {size}"
        )
    picks = rng.integers(0, len(valid), size=size)
    z_dim = buffer._transitions[valid[0]].z.shape[0]
    a_dim = buffer._transitions[valid[0]].action.shape[0]
    z = np.empty((size, z_dim))
    a_b = np.empty((size, a_dim))
    a = np.empty((size, a_dim))
    rewards = np.zeros((size, n))
    counts = np.empty(size, dtype=np.int64)
    boot = np.zeros(size, dtype=bool)
    z_boot = np.zeros((size, z_dim))
    ab_boot = np.zeros((size, a_dim))
    for row, p in enumerate(picks):
        start = valid[p]
        t = buffer._transitions[start]
        z[row] = t.z
        a_b[row] = t.base_action
        a[row] = t.action
        rs, boot_t = buffer.window(start, n)
        rewards[row, : len(rs)] = rs
        counts[row] = len(rs)
        if boot_t is not None:
            boot[row] = True
            z_boot[row] = boot_t.z
            ab_boot[row] = boot_t.base_action
    return Batch(
        z=z,
        base_action=a_b,
        action=a,
        rewards=rewards,
        valid_counts=counts,
        bootstrap=boot,
        z_boot=z_boot,
        base_action_boot=ab_boot,
    )


def nstep_target(ac: ResidualActorCritic, batch: Batch, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Discounted window return plus a clipped double-Q bootstrap.

    y = sum_i gamma^i r_i + gamma^n min_k targetQ_k(z', a_b', pi(z', a_b'))
    with the bootstrap offset from the current actor (no noise) and the
    bootstrap term dropped on windows truncated at episode end.
    """
    n = batch.rewards.shape[1]
    disc = gamma ** np.arange(n)
    live = np.arange(n)[None, :] < batch.valid_counts[:, None]
    y = np.sum(batch.rewards * disc[None, :] * live, axis=1)
    if np.any(batch.bootstrap):
        idx = np.flatnonzero(batch.bootstrap)
        zb = batch.z_boot[idx]
        ab = batch.base_action_boot[idx]
        a_r = _policy_offsets(ac, zb, ab)
        v = np.concatenate([zb, ab, a_r], axis=1)
        q = np.minimum(forward(ac.target1, v)[:, 0], forward(ac.target2, v)[:, 0])
        y[idx] += gamma**n * q
    if not np.all(np.isfinite(y)):
        raise RuntimeError("non-finite n-step target")
    return y


def critic_update(
    ac: ResidualActorCritic,
    batch: Batch,
    opt1: AdamState,
    opt2: AdamState,
    gamma: float = DEFAULT_GAMMA,
) -> tuple[float, float]:
    """One Adam step per critic on squared error to the shared target."""
    y = nstep_target(ac, batch, gamma=gamma)
    v = np.concatenate([batch.z, batch.base_action, batch.action - batch.base_action], axis=1)
    B = len(batch)
    losses = []
    for critic, opt in ((ac.critic1, opt1), (ac.critic2, opt2)):
        q = forward(critic, v)[:, 0]
        err = q - y
        loss = float(np.mean(err * err))
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite critic loss {loss}")
        grads, _ = backward(critic, v, (2.0 / B) * err[:, None])
        adam_step(net_parameters(critic), grads, opt)
        losses.append(loss)
    return losses[0], losses[1]


def actor_loss_and_grads(
    ac: ResidualActorCritic,
    batch: Batch,
    offset_reg_enabled: bool = False,
    reg_weight: float | None = None,
) -> tuple[float, list[np.ndarray]]:
    """Loss -mean(min_k Q_k(z, a_b, pi(z, a_b))) and its actor gradients.

    Critic parameters are treated as constants; the min routes gradient
    through whichever critic attains it (the first on ties). With
    offset_reg_enabled a penalty reg_weight * mean||pi||^2 is added,
    reg_weight defaulting to the adaptive soft_q_filter fraction.
    """
    B = len(batch)
    x = _actor_input(ac, batch.z, batch.base_action)
    u = forward(ac.actor, x)
    a_r = ac.offset_bound * u
    v = np.concatenate([batch.z, batch.base_action, a_r], axis=1)
    q1 = forward(ac.critic1, v)[:, 0]
    q2 = forward(ac.critic2, v)[:, 0]
    loss = float(-np.mean(np.minimum(q1, q2)))
    pick1 = (q1 <= q2).astype(np.float64)
    _, dv1 = backward(ac.critic1, v, (-pick1 / B)[:, None])
    _, dv2 = backward(ac.critic2, v, (-(1.0 - pick1) / B)[:, None])
    d_ar = (dv1 + dv2)[:, ac.z_dim + ac.action_dim :]
    if offset_reg_enabled:
        lam = soft_q_filter(ac, batch) if reg_weight is None else float(reg_weight)
        loss += lam * float(np.mean(np.sum(a_r * a_r, axis=1)))
        d_ar = d_ar + lam * (2.0 / B) * a_r
    if not np.isfinite(loss):
        raise RuntimeError(f"non-finite actor loss {loss}")
    grads, _ = backward(ac.actor, x, ac.offset_bound * d_ar)
    return loss, grads


def actor_update(
    ac: ResidualActorCritic,
    batch: Batch,
    opt: AdamState,
    offset_reg_enabled: bool = False,
    reg_weight: float | None = None,
) -> float:
    """One Adam step ascending the pessimistic critic value of the
    actor's offsets; optionally adds the adaptive offset penalty."""
    loss, grads = actor_loss_and_grads(ac, batch, offset_reg_enabled, reg_weight)
    adam_step(net_parameters(ac.actor), grads, opt)
    return loss


def soft_q_filter(ac: ResidualActorCritic, batch: Batch) -> float:
    """Fraction of the batch where the critics prefer a zero offset over
    the actor's offset; weights the penalty pulling offsets to zero."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    a_r = _policy_offsets(ac, batch.z, batch.base_action)
    v_pi = np.concatenate([batch.z, batch.base_action, a_r], axis=1)
    v_0 = np.concatenate([batch.z, batch.base_action, np.zeros_like(a_r)], axis=1)
    q_pi = np.minimum(forward(ac.critic1, v_pi)[:, 0], forward(ac.critic2, v_pi)[:, 0])
    q_0 = np.minimum(forward(ac.critic1, v_0)[:, 0], forward(ac.critic2, v_0)[:, 0])
    return float(np.mean(q_0 > q_pi))


def update_targets(ac: ResidualActorCritic, tau: float = DEFAULT_TARGET_TAU) -> None:
    """Polyak step of both target critics toward the online critics."""
    soft_update(ac.target1, ac.critic1, tau)
    soft_update(ac.target2, ac.critic2, tau)

