"""Training orchestration: demos, pretraining, the online loop, eval, sweeps.

The training loop runs the two-phase recipe end to end: scripted demos
are behavior-cloned into an encoder, the encoder is frozen, a
non-parametric base policy is built over demo features, and a residual
learner trains online against trajectory-matching rewards computed at
episode end. Everything an invocation emits (metrics, transition log,
checkpoint) is a pure function of (config, seed).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .base_policies import (
    build_vinn_index,
    open_loop_act,
    open_loop_bank,
    select_open_loop,
    vinn_act,
)
from .config import RunConfig, format_config
from .demos import DemoSet, Trajectory, load_demos, save_demos
from .encoders import Encoder, bc_pretrain, encode, freeze
from .envs import observation_dim, reset, run_expert_episode, step, success, task_config
from .nets import (
    adam_init,
    backward,
    clone_net,
    forward,
    load_checkpoint,
    net_from_tensors,
    net_parameters,
    net_tensors,
    save_checkpoint,
)
from .ot import ot_rewards
from .residual import (
    Batch,
    ReplayBuffer,
    Transition,
    actor_update,
    adam_step,
    compose_action,
    critic_update,
    guidance_mask,
    label_episode,
    make_residual_actor_critic,
    nstep_target,
    residual_act,
    sample_batch,
    soft_q_filter,
    update_targets,
)

ACTION_DIM = 2
METRICS_HEADER = "episode,env_steps,ot_reward_total,eval_success,mean_abs_offset,lambda,wall_secs"
TRANSITIONS_HEADER = "episode,t,base_x,base_y,exec_x,exec_y,offset_x,offset_y"
SUCCESS_THRESHOLD = 0.8
EVAL_WINDOW = 10
# Episode labeling runs Sinkhorn on ~60x60 costs at small epsilon; the
# plan is rounded to exact marginals before rewards are read off, so a
# slightly looser convergence tolerance changes nothing downstream.
LABELING_MAX_ITERS = 20000
LABELING_TOL = 1e-5


def record_demos(cfg: RunConfig, out_path) -> DemoSet:
    """Roll the scripted expert from every demo position and save the set."""
    env_cfg = task_config(cfg.task, cfg.obs_mode)
    trajs = []
    for pos in env_cfg.demo_positions:
        obs, acts, ok = run_expert_episode(env_cfg, pos)
        if not ok:
            raise RuntimeError(
                f"scripted expert failed on {cfg.task} at object position {tuple(pos)}"
            )
        trajs.append(Trajectory(observations=np.array(obs), actions=np.array(acts)))
    demos = DemoSet(trajectories=tuple(trajs), task=cfg.task)
    save_demos(out_path, demos)
    return demos


def pretrain(cfg: RunConfig, demos_path, out_path):
    """Behavior-clone an encoder and actor on the demos, checkpoint both."""
    demos = load_demos(demos_path)
    if demos.task != cfg.task:
        raise ValueError(f"demo file is for task {demos.task!r}, config says {cfg.task!r}")
    encoder, actor, history = bc_pretrain(
        demos,
        epochs=cfg.bc_epochs,
        lr=cfg.bc_lr,
        seed=cfg.seed,
        z_dim=cfg.feature_dim,
        hidden_dim=cfg.bc_hidden_dim,
    )
    tensors = {
        **net_tensors(encoder.net, "encoder"),
        **net_tensors(actor, "bc_actor"),
        "meta.task": np.array(demos.task),
        "meta.obs_dim": np.array(demos.obs_dim),
        "meta.z_dim": np.array(encoder.z_dim),
        "meta.final_loss": np.array(history[-1]),
    }
    save_checkpoint(out_path, tensors)
    return encoder, actor, history


def _load_pretrained(path):
    tensors = load_checkpoint(path)
    obs_dim = int(tensors["meta.obs_dim"])
    z_dim = int(tensors["meta.z_dim"])
    encoder = Encoder(
        kind="mlp", obs_dim=obs_dim, z_dim=z_dim, net=net_from_tensors(tensors, "encoder")
    )
    return encoder, net_from_tensors(tensors, "bc_actor"), str(tensors["meta.task"])


def _frozen_copy(encoder: Encoder) -> Encoder:
    return freeze(
        Encoder(
            kind=encoder.kind,
            obs_dim=encoder.obs_dim,
            z_dim=encoder.z_dim,
            net=clone_net(encoder.net) if encoder.net is not None else None,
        )
    )


class _BasePolicy:
    """The three base-policy kinds behind one query interface.

    Holds its own frozen encoder copy so the base is immutable even when
    the learner's encoder keeps training.
    """

    def __init__(self, kind: str, demos: DemoSet, encoder: Encoder, cfg: RunConfig, bc_actor):
        self.kind = kind
        self.encoder = encoder
        if kind == "open_loop":
            self.bank = open_loop_bank(demos, encoder)
            self._current = None
        elif kind == "vinn":
            self.index = build_vinn_index(
                demos, encoder, k=cfg.vinn_k, weight_temperature=cfg.vinn_temperature
            )
        elif kind == "bc":
            self.bc_actor = bc_actor
        else:
            raise ValueError(f"unknown base policy {kind!r}")

    def start_episode(self, obs) -> None:
        if self.kind == "open_loop":
            self._current = select_open_loop(self.bank, encode(self.encoder, obs))

    def act(self, obs, t: int) -> np.ndarray:
        if self.kind == "open_loop":
            return open_loop_act(self._current, t)
        z = encode(self.encoder, obs)
        if self.kind == "vinn":
            return vinn_act(self.index, z)
        return np.clip(forward(self.bc_actor, z), -1.0, 1.0)


@dataclass(frozen=True)
class TrainResult:
    metrics_path: str
    transitions_path: str
    checkpoint_path: str
    rows: tuple


def _episode_rewards(encoder, expert_obs, behavior_obs, cfg: RunConfig):
    """Best trajectory-matching reward across demos (highest total wins)."""
    zb = encode(encoder, behavior_obs)
    best = None
    for eobs in expert_obs:
        rew = ot_rewards(
            zb,
            encode(encoder, eobs),
            epsilon=cfg.ot_epsilon,
            scale=cfg.reward_scale,
            max_iters=LABELING_MAX_ITERS,
            tol=LABELING_TOL,
        )
        if best is None or rew.total > best.total:
            best = rew
    return best


def _greedy_rollout(env_cfg, encoder, base, ac, mask, pos, action_repeat: int):
    """One noise-free episode; returns (success, mean |a_r| over the episode)."""
    state, obs = reset(env_cfg, position_override=pos)
    base.start_episode(obs)
    offsets = []
    t, done = 0, False
    while not done:
        a_b = base.act(obs, t)
        a_r = residual_act(ac, encode(encoder, obs), a_b, mask, explore=False)
        a_t = compose_action(a_b, a_r)
        offsets.append(float(np.mean(np.abs(a_r))))
        for _ in range(action_repeat):
            state, obs, done = step(state, a_t, env_cfg)
            if done:
                break
        t += 1
    return success(state, env_cfg), float(np.mean(offsets))


def _update_pair_frozen(ac, buffer, opts, cfg: RunConfig, rng) -> float:
    batch = sample_batch(buffer, cfg.batch_size, cfg.nstep, rng)
    critic_update(ac, batch, opts["critic1"], opts["critic2"], gamma=cfg.gamma)
    lam = 0.0
    if cfg.offset_reg:
        lam = soft_q_filter(ac, batch)
        actor_update(ac, batch, opts["actor"], offset_reg_enabled=True, reg_weight=lam)
    else:
        actor_update(ac, batch, opts["actor"])
    update_targets(ac, cfg.tau)
    return lam


def _update_pair_unfrozen(encoder, ac, buffer, opts, cfg: RunConfig, rng) -> float:
    """Update step for the fix_encoder=false ablation.

    Buffer transitions carry raw observations; features are recomputed
    with the current encoder and the critic losses backpropagate into it
    (the actor loss treats features as constants).
    """
    raw = sample_batch(buffer, cfg.batch_size, cfg.nstep, rng)
    z = forward(encoder.net, raw.z)
    z_boot = forward(encoder.net, raw.z_boot)
    batch = Batch(
        z=z,
        base_action=raw.base_action,
        action=raw.action,
        rewards=raw.rewards,
        valid_counts=raw.valid_counts,
        bootstrap=raw.bootstrap,
        z_boot=z_boot,
        base_action_boot=raw.base_action_boot,
    )
    y = nstep_target(ac, batch, gamma=cfg.gamma)
    v = np.concatenate([z, raw.base_action, raw.action - raw.base_action], axis=1)
    B = len(batch)
    dz = np.zeros_like(z)
    for critic, opt_name in ((ac.critic1, "critic1"), (ac.critic2, "critic2")):
        q = forward(critic, v)[:, 0]
        err = q - y
        loss = float(np.mean(err * err))
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite critic loss {loss}")
        grads, dv = backward(critic, v, (2.0 / B) * err[:, None])
        adam_step(net_parameters(critic), grads, opts[opt_name])
        dz += dv[:, : z.shape[1]]
    enc_grads, _ = backward(encoder.net, raw.z, dz)
    adam_step(net_parameters(encoder.net), enc_grads, opts["encoder"])
    lam = 0.0
    if cfg.offset_reg:
        lam = soft_q_filter(ac, batch)
        actor_update(ac, batch, opts["actor"], offset_reg_enabled=True, reg_weight=lam)
    else:
        actor_update(ac, batch, opts["actor"])
    update_targets(ac, cfg.tau)
    return lam


def train(cfg: RunConfig, demos_path, encoder_path, out_dir) -> TrainResult:
    """Run the online residual learning loop and emit all artifacts.

    Per step: encode, query the base policy, add a masked bounded offset,
    compose, step the env. At episode end the whole episode is labeled
    with trajectory-matching rewards against the nearest demo and pushed
    into replay. Updates run at the configured cadence once the seed
    phase has passed and enough labeled data exists. After each training
    episode one greedy rollout on a rotating held-out position is scored
    into the metrics.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    demos = load_demos(demos_path)
    encoder, bc_actor, ck_task = _load_pretrained(encoder_path)
    if ck_task != cfg.task or demos.task != cfg.task:
        raise ValueError(
            f"artifact mismatch: config task {cfg.task!r}, demos {demos.task!r}, "
            f"encoder checkpoint {ck_task!r}"
        )
    env_cfg = task_config(cfg.task, cfg.obs_mode)
    obs_dim = observation_dim(env_cfg)
    if demos.obs_dim != obs_dim or encoder.obs_dim != obs_dim:
        raise ValueError(
            f"observation dim mismatch: env {obs_dim}, demos {demos.obs_dim}, "
            f"encoder {encoder.obs_dim}"
        )
    if encoder.z_dim != cfg.feature_dim:
        raise ValueError(
            f"artifact mismatch: encoder checkpoint has feature size {encoder.z_dim}, "
            f"config expects {cfg.feature_dim}"
        )
    rng = np.random.default_rng(cfg.seed)

    base_encoder = _frozen_copy(encoder)
    base = _BasePolicy(cfg.base_policy, demos, base_encoder, cfg, bc_actor)
    if cfg.fix_encoder:
        freeze(encoder)

    beta = cfg.offset_bound * (0.5 if cfg.guidance == "semi_guided" else 1.0)
    ac = make_residual_actor_critic(
        encoder.z_dim,
        ACTION_DIM,
        rng,
        hidden_dim=cfg.hidden_dim,
        offset_bound=beta,
        exploration_std=cfg.exploration_std,
        condition_on_base_action=cfg.condition_on_base_action,
        random_init=cfg.actor_random_init,
    )
    mask = guidance_mask(cfg.guidance, ACTION_DIM)
    buffer = ReplayBuffer(cfg.buffer_size)
    opts = {
        "actor": adam_init(net_parameters(ac.actor), lr=cfg.lr),
        "critic1": adam_init(net_parameters(ac.critic1), lr=cfg.lr),
        "critic2": adam_init(net_parameters(ac.critic2), lr=cfg.lr),
    }
    if not cfg.fix_encoder:
        opts["encoder"] = adam_init(net_parameters(encoder.net), lr=cfg.lr)

    expert_obs = [tr.observations for tr in demos.trajectories]
    x0, y0, x1, y1 = env_cfg.object_region
    metrics_lines = [METRICS_HEADER]
    trans_lines = [TRANSITIONS_HEADER]
    rows = []
    env_steps = 0
    last_lambda = 0.0

    for episode in range(cfg.episodes):
        pos = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
        state, obs = reset(env_cfg, position_override=pos)
        base.start_episode(obs)
        episode_obs = []
        transitions = []
        t, done = 0, False
        while not done:
            z = encode(encoder, obs)
            a_b = base.act(obs, t)
            if env_steps < cfg.seed_frames:
                noise = rng.normal(0.0, cfg.exploration_std, ACTION_DIM)
                a_r = mask.multipliers * np.clip(noise, -beta, beta)
            else:
                a_r = residual_act(ac, z, a_b, mask, explore=True, rng=rng)
            a_t = compose_action(a_b, a_r)
            episode_obs.append(obs)
            prev_obs = obs
            for _ in range(cfg.action_repeat):
                state, obs, done = step(state, a_t, env_cfg)
                env_steps += 1
                if (
                    env_steps >= cfg.seed_frames
                    and env_steps % cfg.update_freq == 0
                    and buffer.labeled_size >= cfg.batch_size
                ):
                    if cfg.fix_encoder:
                        last_lambda = _update_pair_frozen(ac, buffer, opts, cfg, rng)
                    else:
                        last_lambda = _update_pair_unfrozen(encoder, ac, buffer, opts, cfg, rng)
                if done:
                    break
            if cfg.fix_encoder:
                tr = Transition(z=z, action=a_t, base_action=a_b, z_next=encode(encoder, obs))
            else:
                tr = Transition(z=prev_obs, action=a_t, base_action=a_b, z_next=obs)
            transitions.append(tr)
            logged = [float(v) for v in (*a_b, *a_t, *a_r)]
            trans_lines.append(f"{episode},{t}," + ",".join(repr(v) for v in logged))
            t += 1
        rew = _episode_rewards(encoder, expert_obs, np.array(episode_obs), cfg)
        buffer.add_episode(label_episode(transitions, rew.per_step))
        eval_pos = env_cfg.eval_positions[episode % len(env_cfg.eval_positions)]
        eval_ok, mean_offset = _greedy_rollout(
            env_cfg, encoder, base, ac, mask, eval_pos, cfg.action_repeat
        )
        row = (episode, env_steps, float(rew.total), int(eval_ok), mean_offset, last_lambda, 0.0)
        rows.append(row)
        metrics_lines.append(
            f"{episode},{env_steps},{row[2]!r},{row[3]},{row[4]!r},{row[5]!r},{row[6]!r}"
        )

    metrics_path = out / "metrics.csv"
    metrics_path.write_text("\n".join(metrics_lines) + "\n", encoding="utf-8")
    transitions_path = out / "transitions.csv"
    transitions_path.write_text("\n".join(trans_lines) + "\n", encoding="utf-8")
    (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")
    checkpoint_path = out / "final.npz"
    tensors = {
        **net_tensors(ac.actor, "actor"),
        **net_tensors(ac.critic1, "critic1"),
        **net_tensors(ac.critic2, "critic2"),
        **net_tensors(ac.target1, "target1"),
        **net_tensors(ac.target2, "target2"),
        **net_tensors(encoder.net, "encoder"),
        **net_tensors(base_encoder.net, "base_encoder"),
        **net_tensors(bc_actor, "bc_actor"),
        "meta.task": np.array(cfg.task),
        "meta.obs_mode": np.array(cfg.obs_mode),
        "meta.base_policy": np.array(cfg.base_policy),
        "meta.guidance": np.array(cfg.guidance),
        "meta.obs_dim": np.array(obs_dim),
        "meta.z_dim": np.array(encoder.z_dim),
        "meta.action_dim": np.array(ACTION_DIM),
        "meta.offset_bound": np.array(beta),
        "meta.exploration_std": np.array(cfg.exploration_std),
        "meta.condition_on_base_action": np.array(cfg.condition_on_base_action),
        "meta.vinn_k": np.array(cfg.vinn_k),
        "meta.vinn_temperature": np.array(cfg.vinn_temperature),
    }
    save_checkpoint(checkpoint_path, tensors)
    return TrainResult(
        metrics_path=str(metrics_path),
        transitions_path=str(transitions_path),
        checkpoint_path=str(checkpoint_path),
        rows=tuple(rows),
    )


def evaluate(cfg: RunConfig, checkpoint_path, demos_path) -> float:
    """Greedy success rate over the task's 10 held-out positions."""
    from .residual import ResidualActorCritic

    tensors = load_checkpoint(checkpoint_path)
    for key, want in (
        ("meta.task", cfg.task),
        ("meta.obs_mode", cfg.obs_mode),
        ("meta.base_policy", cfg.base_policy),
        ("meta.guidance", cfg.guidance),
    ):
        got = str(tensors[key])
        if got != want:
            raise ValueError(
                f"checkpoint/config mismatch: {key.split('.', 1)[1]} is {got!r} "
                f"in the checkpoint but {want!r} in the config"
            )
    demos = load_demos(demos_path)
    if demos.task != cfg.task:
        raise ValueError(f"demo file is for task {demos.task!r}, config says {cfg.task!r}")
    env_cfg = task_config(cfg.task, cfg.obs_mode)
    obs_dim = int(tensors["meta.obs_dim"])
    z_dim = int(tensors["meta.z_dim"])
    if obs_dim != observation_dim(env_cfg):
        raise ValueError(
            f"checkpoint/config mismatch: checkpoint obs_dim {obs_dim}, "
            f"env expects {observation_dim(env_cfg)}"
        )
    encoder = freeze(
        Encoder(kind="mlp", obs_dim=obs_dim, z_dim=z_dim, net=net_from_tensors(tensors, "encoder"))
    )
    base_encoder = freeze(
        Encoder(
            kind="mlp", obs_dim=obs_dim, z_dim=z_dim,
            net=net_from_tensors(tensors, "base_encoder"),
        )
    )
    base = _BasePolicy(
        cfg.base_policy, demos, base_encoder, cfg, net_from_tensors(tensors, "bc_actor")
    )
    ac = ResidualActorCritic(
        actor=net_from_tensors(tensors, "actor"),
        critic1=net_from_tensors(tensors, "critic1"),
        critic2=net_from_tensors(tensors, "critic2"),
        target1=net_from_tensors(tensors, "target1"),
        target2=net_from_tensors(tensors, "target2"),
        z_dim=z_dim,
        action_dim=int(tensors["meta.action_dim"]),
        offset_bound=float(tensors["meta.offset_bound"]),
        exploration_std=float(tensors["meta.exploration_std"]),
        condition_on_base_action=bool(tensors["meta.condition_on_base_action"]),
    )
    mask = guidance_mask(cfg.guidance, ACTION_DIM)
    hits = sum(
        _greedy_rollout(env_cfg, encoder, base, ac, mask, pos, cfg.action_repeat)[0]
        for pos in env_cfg.eval_positions
    )
    return hits / len(env_cfg.eval_positions)


def episodes_to_threshold(success_flags, threshold: float = SUCCESS_THRESHOLD,
                          window: int = EVAL_WINDOW):
    """First episode count at which the trailing-window eval success rate
    reaches the threshold; None when it never does."""
    flags = np.asarray(success_flags, dtype=np.float64)
    for end in range(window, len(flags) + 1):
        if np.mean(flags[end - window : end]) >= threshold:
            return end
    return None


def load_metrics(path):
    """Metrics rows as a list of dicts with typed values."""
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise ValueError(f"unexpected metrics header in {path}")
    names = METRICS_HEADER.split(",")
    out = []
    for line in lines[1:]:
        parts = line.split(",")
        row = dict(zip(names, parts))
        out.append(
            {
                "episode": int(row["episode"]),
                "env_steps": int(row["env_steps"]),
                "ot_reward_total": float(row["ot_reward_total"]),
                "eval_success": int(row["eval_success"]),
                "mean_abs_offset": float(row["mean_abs_offset"]),
                "lambda": float(row["lambda"]),
                "wall_secs": float(row["wall_secs"]),
            }
        )
    return out


def _config_label(cfg: RunConfig) -> str:
    """Readable label from the fields that differ from the defaults,
    ignoring the seed."""
    defaults = RunConfig()
    diffs = []
    for f in dataclasses.fields(RunConfig):
        if f.name == "seed":
            continue
        value = getattr(cfg, f.name)
        if value != getattr(defaults, f.name):
            diffs.append(f"{f.name}={value}")
    return ";".join(diffs) if diffs else "defaults"


def sweep(cfgs, seeds, demos_path, encoder_path, out_dir):
    """Train each distinct config over every seed and tabulate results.

    All configs must share the task and obs_mode so every cell sees the
    same demos and eval positions. Failed cells are recorded with their
    error and the sweep continues. Writes sweep.csv (per cell) and
    summary.csv (per config: median final success and median episodes to
    the success threshold, censored cells counted at the full budget).
    """
    cfgs = list(cfgs)
    seeds = list(seeds)
    if not cfgs or not seeds:
        raise ValueError("sweep needs at least one config and one seed")
    for cfg in cfgs[1:]:
        if cfg.task != cfgs[0].task or cfg.obs_mode != cfgs[0].obs_mode:
            raise ValueError("sweep configs must share task and obs_mode")
    unique = []
    seen = set()
    for cfg in cfgs:
        key = format_config(dataclasses.replace(cfg, seed=0))
        if key not in seen:
            seen.add(key)
            unique.append(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for idx, cfg in enumerate(unique):
        label = _config_label(cfg)
        for seed in seeds:
            run_cfg = dataclasses.replace(cfg, seed=seed)
            cell_dir = out / f"cell{idx}_seed{seed}"
            try:
                res = train(run_cfg, demos_path, encoder_path, cell_dir)
                final = evaluate(run_cfg, res.checkpoint_path, demos_path)
                flags = [r[3] for r in res.rows]
                results.append(
                    {
                        "label": label,
                        "seed": seed,
                        "status": "ok",
                        "final_success": final,
                        "episodes_to_threshold": episodes_to_threshold(flags),
                        "episodes": run_cfg.episodes,
                    }
                )
            except Exception as exc:
                results.append(
                    {
                        "label": label,
                        "seed": seed,
                        "status": f"failed: {exc}",
                        "final_success": None,
                        "episodes_to_threshold": None,
                        "episodes": run_cfg.episodes,
                    }
                )
    cell_lines = ["label,seed,status,final_success,episodes_to_threshold"]
    for r in results:
        final = "" if r["final_success"] is None else repr(r["final_success"])
        ept = "" if r["episodes_to_threshold"] is None else str(r["episodes_to_threshold"])
        status = r["status"].replace(",", ";").replace("\n", " ")
        cell_lines.append(f"{r['label']},{r['seed']},{status},{final},{ept}")
    (out / "sweep.csv").write_text("\n".join(cell_lines) + "\n", encoding="utf-8")
    summary_lines = ["label,seeds_ok,median_final_success,median_episodes_to_threshold"]
    for cfg in unique:
        label = _config_label(cfg)
        cells = [r for r in results if r["label"] == label and r["status"] == "ok"]
        if cells:
            finals = [r["final_success"] for r in cells]
            budgets = [
                r["episodes"] if r["episodes_to_threshold"] is None else r["episodes_to_threshold"]
                for r in cells
            ]
            summary_lines.append(
                f"{label},{len(cells)},{np.median(finals)!r},{np.median(budgets)!r}"
            )
        else:
            summary_lines.append(f"{label},0,,")
    (out / "summary.csv").write_text("\n".join(summary_lines) + "\n", encoding="utf-8")
    return results
