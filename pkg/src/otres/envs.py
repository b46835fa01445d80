"""Planar manipulation tasks with scripted experts.

Three tasks on the unit square under velocity control (agent_pos += dt * a,
per-dim action bounds [-1, 1]):

- reach: touch the object.
- push: carry the object to within success_radius of the goal.
- insert: carry the object into a narrow slot box around the goal
  (half-width slot_half_width per axis, much tighter than success_radius).

Contact is kinematic: coming within grasp_radius of the object picks it up,
after which it rides on the agent; insert releases it only inside the slot.
Object start positions vary along a vertical strip, so policies replayed
from a demonstration recorded at one height miss the grasp at distant
heights — the failure mode the residual learner exists to fix.

`step` is a pure function of (state, action, config): replaying logged
actions reproduces logged observations bit-exactly. Instances are plain
values; parallel rollouts on separate states are safe.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "TaskConfig",
    "EnvState",
    "TASKS",
    "OBS_MODES",
    "task_config",
    "observation_dim",
    "reset",
    "step",
    "success",
    "observe",
    "scripted_expert",
    "run_expert_episode",
]

TASKS = ("reach", "push", "insert")
OBS_MODES = ("state", "grid")

WORKSPACE_LOW = 0.0
WORKSPACE_HIGH = 1.0

# Rendering intensities for grid observations; overlaps keep the max.
GRID_GOAL = 1.0 / 3.0
GRID_OBJECT = 2.0 / 3.0
GRID_AGENT = 1.0

AGENT_START = (0.05, 0.55)
GOAL_POS = (0.25, 0.55)
OBJECT_STRIP_X = 0.70

# Held-out evaluation heights. Most sit farther than grasp_radius (0.05)
# from every demo height, so open-loop replay and plain retrieval miss the
# grasp there; a couple sit close so weak bases score low but not zero.
_DEMO_YS = {
    "reach": (0.55,),
    "push": (0.45, 0.65),
    "insert": (0.40, 0.55, 0.70),
}
_EVAL_YS = {
    "reach": (0.31, 0.345, 0.38, 0.425, 0.47, 0.525, 0.615, 0.66, 0.705, 0.75),
    "push": (0.31, 0.325, 0.34, 0.525, 0.545, 0.56, 0.675, 0.73, 0.755, 0.78),
    "insert": (0.305, 0.315, 0.33, 0.345, 0.575, 0.68, 0.755, 0.765, 0.78, 0.79),
}


@dataclass(frozen=True)
class TaskConfig:
    task: str
    obs_mode: str = "state"
    episode_length: int = 60
    dt: float = 0.05
    object_region: tuple[float, float, float, float] = (0.65, 0.30, 0.75, 0.80)
    demo_positions: tuple[tuple[float, float], ...] = ()
    eval_positions: tuple[tuple[float, float], ...] = ()
    agent_start: tuple[float, float] = AGENT_START
    goal_pos: tuple[float, float] = GOAL_POS
    action_low: float = -1.0
    action_high: float = 1.0
    grasp_radius: float = 0.05
    success_radius: float = 0.05
    slot_half_width: float = 0.015
    grid_size: int = 16

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}, expected one of {TASKS}")
        if self.obs_mode not in OBS_MODES:
            raise ValueError(f"unknown obs_mode {self.obs_mode!r}, expected one of {OBS_MODES}")
        if self.episode_length < 1 or self.dt <= 0.0:
            raise ValueError("episode_length must be >= 1 and dt positive")
        x0, y0, x1, y1 = self.object_region
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate object_region {self.object_region}")
        for name, positions in (("demo", self.demo_positions), ("eval", self.eval_positions)):
            for p in positions:
                if not _in_region(p, self.object_region):
                    raise ValueError(f"{name} position {p} outside object_region")
        if self.eval_positions and len(self.eval_positions) != 10:
            raise ValueError(f"need exactly 10 eval positions, got {len(self.eval_positions)}")
        if set(self.demo_positions) & set(self.eval_positions):
            raise ValueError("demo and eval positions must be disjoint")


@dataclass(frozen=True)
class EnvState:
    agent_pos: np.ndarray
    object_pos: np.ndarray
    goal_pos: np.ndarray
    carrying: bool
    t: int


def _in_region(p, region) -> bool:
    x0, y0, x1, y1 = region
    return x0 <= p[0] <= x1 and y0 <= p[1] <= y1


def task_config(task: str, obs_mode: str = "state") -> TaskConfig:
    """Canonical configuration for a task, with fixed demo and eval positions."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}, expected one of {TASKS}")
    demos = tuple((OBJECT_STRIP_X, y) for y in _DEMO_YS[task])
    evals = tuple((OBJECT_STRIP_X, y) for y in _EVAL_YS[task])
    return TaskConfig(task=task, obs_mode=obs_mode, demo_positions=demos, eval_positions=evals)


def observation_dim(cfg: TaskConfig) -> int:
    return 7 if cfg.obs_mode == "state" else cfg.grid_size * cfg.grid_size


def reset(
    cfg: TaskConfig,
    rng: np.random.Generator | None = None,
    position_override=None,
) -> tuple[EnvState, np.ndarray]:
    """Start an episode: agent at its fixed start, object placed or sampled."""
    if position_override is not None:
        obj = np.asarray(position_override, dtype=np.float64)
        if obj.shape != (2,):
            raise ValueError(f"position must be 2-D, got shape {obj.shape}")
        if not _in_region(obj, cfg.object_region):
            raise ValueError(f"position {tuple(obj)} outside object_region {cfg.object_region}")
        obj = obj.copy()
    elif rng is not None:
        x0, y0, x1, y1 = cfg.object_region
        obj = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
    else:
        raise ValueError("need a position_override or an rng to place the object")
    state = EnvState(
        agent_pos=np.array(cfg.agent_start, dtype=np.float64),
        object_pos=obj,
        goal_pos=np.array(cfg.goal_pos, dtype=np.float64),
        carrying=False,
        t=0,
    )
    return state, observe(state, cfg)


def step(state: EnvState, action, cfg: TaskConfig) -> tuple[EnvState, np.ndarray, bool]:
    """Advance one timestep under velocity control; pure in all arguments."""
    a = np.clip(np.asarray(action, dtype=np.float64), cfg.action_low, cfg.action_high)
    if a.shape != (2,):
        raise ValueError(f"action must be 2-D, got shape {a.shape}")
    agent = np.clip(state.agent_pos + cfg.dt * a, WORKSPACE_LOW, WORKSPACE_HIGH)
    obj = state.object_pos
    carrying = state.carrying
    if cfg.task in ("push", "insert"):
        if not carrying and np.linalg.norm(agent - obj) <= cfg.grasp_radius:
            carrying = True
        if carrying:
            obj = agent.copy()
            if cfg.task == "insert" and _in_slot(obj, state.goal_pos, cfg):
                carrying = False
    nxt = replace(state, agent_pos=agent, object_pos=obj, carrying=carrying, t=state.t + 1)
    done = success(nxt, cfg) or nxt.t >= cfg.episode_length
    return nxt, observe(nxt, cfg), done


def _in_slot(obj, goal, cfg: TaskConfig) -> bool:
    return bool(np.all(np.abs(obj - goal) <= cfg.slot_half_width))


def success(state: EnvState, cfg: TaskConfig) -> bool:
    """Closed-ball success predicates (boundary counts as success)."""
    if cfg.task == "reach":
        return bool(np.linalg.norm(state.agent_pos - state.object_pos) <= cfg.success_radius)
    if cfg.task == "push":
        return bool(np.linalg.norm(state.object_pos - state.goal_pos) <= cfg.success_radius)
    return _in_slot(state.object_pos, state.goal_pos, cfg)


def observe(state: EnvState, cfg: TaskConfig) -> np.ndarray:
    if cfg.obs_mode == "state":
        return np.concatenate(
            [state.agent_pos, state.object_pos, state.goal_pos, [1.0 if state.carrying else 0.0]]
        )
    G = cfg.grid_size
    grid = np.zeros((G, G))

    def put(pos, value):
        ix = min(int(pos[0] * G), G - 1)
        iy = min(int(pos[1] * G), G - 1)
        grid[ix, iy] = max(grid[ix, iy], value)

    put(state.goal_pos, GRID_GOAL)
    put(state.object_pos, GRID_OBJECT)
    put(state.agent_pos, GRID_AGENT)
    return grid.reshape(-1)


def scripted_expert(state: EnvState, cfg: TaskConfig) -> np.ndarray:
    """Deadbeat proportional controller: head for the object, then the goal.

    (target - agent) / dt saturates to a full-speed move until within one
    step of the target, then lands exactly on it.
    """
    if cfg.task == "reach" or not state.carrying:
        target = state.object_pos
    else:
        target = state.goal_pos
    return np.clip((target - state.agent_pos) / cfg.dt, cfg.action_low, cfg.action_high)


def run_expert_episode(cfg: TaskConfig, position) -> tuple[list, list, bool]:
    """Roll the scripted expert from a fixed object position.

    Returns (observations, actions, succeeded) with one observation per
    action (the pre-step observation at each decision point).
    """
    state, obs = reset(cfg, position_override=position)
    observations, actions = [], []
    done = False
    while not done:
        a = scripted_expert(state, cfg)
        observations.append(obs)
        actions.append(a)
        state, obs, done = step(state, a, cfg)
    return observations, actions, success(state, cfg)
