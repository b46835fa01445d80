"""Demonstration sets: 1-3 expert trajectories plus a text file format.

The on-disk format is line-delimited decimal text so diffs are readable:

    demos v1 task=insert obs_dim=7 action_dim=2 trajectories=3
    trajectory 0 steps=20
    0.05 0.55 0.7 0.4 0.25 0.55 0.0 | 1.0 -1.0
    ...

Floats are written with shortest round-trip precision, so load(save(x))
reproduces x bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["Trajectory", "DemoSet", "save_demos", "load_demos", "DEMO_FORMAT_VERSION"]

DEMO_FORMAT_VERSION = 1

MAX_TRAJECTORIES = 3


@dataclass(frozen=True)
class Trajectory:
    observations: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=np.float64)
        act = np.asarray(self.actions, dtype=np.float64)
        if obs.ndim != 2 or act.ndim != 2:
            raise ValueError("observations and actions must be 2-D (steps x dim)")
        if obs.shape[0] != act.shape[0]:
            raise ValueError(
                f"step count mismatch: {obs.shape[0]} observations vs {act.shape[0]} actions"
            )
        if obs.shape[0] == 0:
            raise ValueError("empty trajectory")
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "actions", act)

    def __len__(self) -> int:
        return self.observations.shape[0]


@dataclass(frozen=True)
class DemoSet:
    trajectories: tuple[Trajectory, ...]
    task: str
    action_low: float = -1.0
    action_high: float = 1.0

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        if not 1 <= len(trajs) <= MAX_TRAJECTORIES:
            raise ValueError(f"need 1-{MAX_TRAJECTORIES} trajectories, got {len(trajs)}")
        obs_dim = trajs[0].observations.shape[1]
        action_dim = trajs[0].actions.shape[1]
        for i, tr in enumerate(trajs):
            if tr.observations.shape[1] != obs_dim or tr.actions.shape[1] != action_dim:
                raise ValueError(f"trajectory {i} dimensions differ from trajectory 0")
            if np.any(tr.actions < self.action_low) or np.any(tr.actions > self.action_high):
                raise ValueError(f"trajectory {i} has actions outside bounds")
        object.__setattr__(self, "trajectories", trajs)

    @property
    def obs_dim(self) -> int:
        return self.trajectories[0].observations.shape[1]

    @property
    def action_dim(self) -> int:
        return self.trajectories[0].actions.shape[1]

    @property
    def count(self) -> int:
        return len(self.trajectories)

    def all_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """All (observation, action) rows across trajectories, in demo order."""
        obs = np.concatenate([t.observations for t in self.trajectories], axis=0)
        act = np.concatenate([t.actions for t in self.trajectories], axis=0)
        return obs, act


def _fmt(values: np.ndarray) -> str:
    return " ".join(repr(float(v)) for v in values)


def save_demos(path, demos: DemoSet) -> None:
    lines = [
        f"demos v{DEMO_FORMAT_VERSION} task={demos.task} "
        f"obs_dim={demos.obs_dim} action_dim={demos.action_dim} "
        f"trajectories={demos.count}"
    ]
    for idx, traj in enumerate(demos.trajectories):
        lines.append(f"trajectory {idx} steps={len(traj)}")
        for o, a in zip(traj.observations, traj.actions):
            lines.append(f"{_fmt(o)} | {_fmt(a)}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_header(line: str) -> dict:
    parts = line.split()
    if len(parts) != 6 or parts[0] != "demos":
        raise ValueError(f"malformed demo header: {line!r}")
    if parts[1] != f"v{DEMO_FORMAT_VERSION}":
        raise ValueError(f"unsupported demo format version {parts[1]!r}")
    fields = {}
    for p in parts[2:]:
        key, _, value = p.partition("=")
        if not value:
            raise ValueError(f"malformed header field {p!r}")
        fields[key] = value
    for key in ("task", "obs_dim", "action_dim", "trajectories"):
        if key not in fields:
            raise ValueError(f"demo header missing {key!r}")
    return fields


def load_demos(path) -> DemoSet:
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise ValueError(f"empty demo file {path}")
    fields = _parse_header(lines[0])
    obs_dim = int(fields["obs_dim"])
    action_dim = int(fields["action_dim"])
    n_traj = int(fields["trajectories"])

    trajectories = []
    pos = 1
    for idx in range(n_traj):
        if pos >= len(lines):
            raise ValueError(f"demo file ends before trajectory {idx}")
        marker = lines[pos].split()
        if len(marker) != 3 or marker[0] != "trajectory" or int(marker[1]) != idx:
            raise ValueError(f"expected 'trajectory {idx} steps=N', got {lines[pos]!r}")
        steps = int(marker[2].partition("=")[2])
        pos += 1
        obs_rows, act_rows = [], []
        for s in range(steps):
            if pos >= len(lines):
                raise ValueError(f"trajectory {idx} truncated at step {s}")
            left, sep, right = lines[pos].partition("|")
            if not sep:
                raise ValueError(f"record missing '|' separator: {lines[pos]!r}")
            o = [float(v) for v in left.split()]
            a = [float(v) for v in right.split()]
            if len(o) != obs_dim or len(a) != action_dim:
                raise ValueError(
                    f"record {s} of trajectory {idx} has {len(o)}/{len(a)} values, "
                    f"expected {obs_dim}/{action_dim}"
                )
            obs_rows.append(o)
            act_rows.append(a)
            pos += 1
        trajectories.append(Trajectory(np.array(obs_rows), np.array(act_rows)))
    if pos != len(lines):
        raise ValueError(f"unexpected trailing content at line {pos + 1}")
    return DemoSet(trajectories=tuple(trajectories), task=fields["task"])
