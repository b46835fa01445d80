"""Acceptance gate: the eleven shipping criteria, one test per criterion.

Each test prints a single "criterion N: PASS/FAIL" line on the real stdout
(bypassing capture) so a plain pytest run yields a readable scorecard.
Criteria 6-10 share expensive training runs through session fixtures; a
full run of this file performs every training it reports on, so expect
roughly an hour on a single desktop core.
"""

import math
import time
from dataclasses import replace
from itertools import permutations
from pathlib import Path

import numpy as np
import pytest

from otres.config import RunConfig
from otres.envs import run_expert_episode, step, reset, task_config
from otres.harness import (
    episodes_to_threshold,
    evaluate,
    pretrain,
    record_demos,
    train,
)
from otres.nets import backward, forward, make_dense_net, net_parameters
from otres.ot import ot_rewards, sinkhorn

# Shared settings for the end-to-end runs (criteria 6-10). The smaller
# networks and the larger exploration noise are what make 300-episode
# budgets productive on these tasks; tau is lowered and lr raised to a
# point where runs converge within the budget without the instability
# either extreme shows. bc settings stay at their defaults.
ACC = dict(
    base_policy="vinn",
    feature_dim=32,
    hidden_dim=128,
    exploration_std=0.2,
    tau=0.005,
    lr=2e-4,
    episodes=300,
)
EPISODE_BUDGET = ACC["episodes"]


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")


# ---------------------------------------------------------------------------
# criteria 1-3: transport plans


def test_criterion_01_sinkhorn_feasibility(capsys):
    start = time.perf_counter()
    worst = 0.0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        C = rng.uniform(0.0, 1.0, size=(16, 16))
        plan = sinkhorn(C, epsilon=0.1)
        rows = plan.coupling.sum(axis=1)
        cols = plan.coupling.sum(axis=0)
        dev = max(np.abs(rows - 1.0 / 16).max(), np.abs(cols - 1.0 / 16).max())
        worst = max(worst, dev)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-6 and elapsed < 5.0
    report(capsys, 1, ok, f"max marginal deviation {worst:.2e}, {elapsed:.2f}s for 100 plans")
    assert worst <= 1e-6
    assert elapsed < 5.0


def test_criterion_02_sinkhorn_vs_lp_oracle(capsys):
    epsilons = (1.0, 0.1, 0.01)
    worst_rel = 0.0
    monotone = True
    never_below = True
    for trial in range(50):
        rng = np.random.default_rng(200 + trial)
        C = rng.uniform(0.0, 1.0, size=(3, 3))
        lp = min(sum(C[i, p[i]] for i in range(3)) for p in permutations(range(3))) / 3.0
        gaps = []
        for eps in epsilons:
            plan = sinkhorn(C, epsilon=eps, max_iters=50000, tol=2e-5)
            ent = float(np.sum(plan.coupling * C))
            never_below = never_below and ent >= lp - 1e-9
            gaps.append(ent - lp)
        monotone = monotone and gaps[0] >= gaps[1] - 1e-9 and gaps[1] >= gaps[2] - 1e-9
        worst_rel = max(worst_rel, gaps[2] / max(lp, 1e-12))
    ok = never_below and monotone and worst_rel <= 0.02
    report(
        capsys, 2,
        ok,
        f"entropic >= LP: {never_below}, gap monotone in epsilon: {monotone}, "
        f"worst relative gap at eps=0.01: {worst_rel:.3%}",
    )
    assert never_below
    assert monotone
    assert worst_rel <= 0.02


def test_criterion_03_two_point_closed_form(capsys):
    plan = sinkhorn(np.array([[0.0, 1.0], [1.0, 0.0]]), epsilon=0.5)
    expected = 0.5 / (1.0 + math.exp(-2.0))
    err = max(
        abs(plan.coupling[0, 0] - expected),
        abs(plan.coupling[1, 1] - expected),
        abs(plan.coupling[0, 1] - (0.5 - expected)),
        abs(plan.coupling[1, 0] - (0.5 - expected)),
    )
    ok = err <= 1e-4
    report(capsys, 3, ok, f"diag {plan.coupling[0, 0]:.6f} vs {expected:.6f}, max err {err:.2e}")
    assert err <= 1e-4


# ---------------------------------------------------------------------------
# criterion 4: gradients


def test_criterion_04_gradient_fidelity(capsys):
    h = 1e-5
    worst = 0.0
    for trial in range(100):
        rng = np.random.default_rng(400 + trial)
        in_dim = int(rng.integers(2, 5))
        hidden = int(rng.integers(3, 9))
        out_dim = int(rng.integers(1, 4))
        net = make_dense_net([in_dim, hidden, out_dim], rng, hidden_activation="tanh")
        x = rng.normal(0.0, 1.0, in_dim)

        def loss(n):
            y = forward(n, x)
            return 0.5 * float(np.sum(y * y))

        grads, input_grad = backward(net, x, forward(net, x))
        params = net_parameters(net)
        for p, g in zip(params, grads):
            fd = np.zeros_like(p)
            it = np.nditer(p, flags=["multi_index"])
            while not it.finished:
                idx = it.multi_index
                orig = p[idx]
                p[idx] = orig + h
                up = loss(net)
                p[idx] = orig - h
                down = loss(net)
                p[idx] = orig
                fd[idx] = (up - down) / (2.0 * h)
                it.iternext()
            denom = max(np.linalg.norm(g), np.linalg.norm(fd), 1e-12)
            worst = max(worst, np.linalg.norm(g - fd) / denom)
        fd_x = np.zeros_like(x)
        for i in range(in_dim):
            orig = x[i]
            x[i] = orig + h
            up = loss(net)
            x[i] = orig - h
            down = loss(net)
            x[i] = orig
            fd_x[i] = (up - down) / (2.0 * h)
        denom = max(np.linalg.norm(input_grad), np.linalg.norm(fd_x), 1e-12)
        worst = max(worst, np.linalg.norm(input_grad - fd_x) / denom)
    ok = worst <= 1e-4
    report(capsys, 4, ok, f"worst relative error vs central differences {worst:.2e}")
    assert worst <= 1e-4


# ---------------------------------------------------------------------------
# criterion 5: reward discrimination


def test_criterion_05_reward_discrimination(capsys):
    results = {}
    for task in ("reach", "push", "insert"):
        env_cfg = task_config(task)
        ref_obs, _, ref_ok = run_expert_episode(env_cfg, env_cfg.demo_positions[0])
        assert ref_ok
        ref = np.asarray(ref_obs)
        x0, y0, x1, y1 = env_cfg.object_region
        wins = 0
        for trial in range(100):
            rng = np.random.default_rng(500 + trial)
            pos = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
            expert_obs, _, _ = run_expert_episode(env_cfg, pos)
            state, obs = reset(env_cfg, position_override=pos)
            random_obs = []
            done = False
            while not done:
                random_obs.append(obs)
                state, obs, done = step(state, rng.uniform(-1.0, 1.0, 2), env_cfg)
            expert_total = ot_rewards(np.asarray(expert_obs), ref).total
            random_total = ot_rewards(np.asarray(random_obs), ref).total
            wins += expert_total > random_total
        results[task] = wins
    ok = all(w >= 95 for w in results.values())
    report(capsys, 5, ok, "expert beats random " + ", ".join(f"{t}: {w}/100" for t, w in results.items()))
    assert ok, results


# ---------------------------------------------------------------------------
# criteria 6-10: end-to-end runs (shared artifacts and trainings)


@pytest.fixture(scope="session")
def acc_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def artifacts(acc_dir):
    """Demos and pretrained encoders for both tasks at the shared settings."""
    paths = {}
    for task in ("push", "insert"):
        cfg = RunConfig(task=task, **ACC)
        demos = acc_dir / f"{task}_demos.txt"
        encoder = acc_dir / f"{task}_encoder.npz"
        record_demos(cfg, demos)
        pretrain(cfg, demos, encoder)
        paths[task] = (demos, encoder)
    return paths


def _run(cfg, artifacts, acc_dir, name):
    demos, encoder = artifacts[cfg.task]
    out = acc_dir / name
    start = time.perf_counter()
    result = train(cfg, demos, encoder, out)
    wall = time.perf_counter() - start
    return result, wall


def _final_success(cfg, result, artifacts):
    demos, _ = artifacts[cfg.task]
    return evaluate(cfg, result.checkpoint_path, demos)


def _ept(result):
    flags = [row[3] for row in result.rows]
    reached = episodes_to_threshold(flags)
    return reached if reached is not None else EPISODE_BUDGET


@pytest.fixture(scope="session")
def insert_learner_runs(artifacts, acc_dir):
    runs = []
    for seed in (0, 1, 2):
        cfg = RunConfig(task="insert", guidance="guided", seed=seed, **ACC)
        runs.append((cfg,) + _run(cfg, artifacts, acc_dir, f"insert_learner_s{seed}"))
    return runs


@pytest.fixture(scope="session")
def push_guided_runs(artifacts, acc_dir):
    runs = []
    for seed in (0, 1, 2, 3, 4):
        cfg = RunConfig(task="push", guidance="guided", seed=seed, **ACC)
        runs.append((cfg,) + _run(cfg, artifacts, acc_dir, f"push_guided_s{seed}"))
    return runs


def test_criterion_06_insert_base_vs_learner(capsys, artifacts, acc_dir, insert_learner_runs):
    base_rates = {}
    for base in ("open_loop", "vinn"):
        cfg = RunConfig(task="insert", guidance="guided", seed=0, **{**ACC, "base_policy": base, "episodes": 0})
        result, _ = _run(cfg, artifacts, acc_dir, f"insert_base_{base}")
        base_rates[base] = _final_success(cfg, result, artifacts)
    walls = [wall for _, _, wall in insert_learner_runs]
    reached = sorted(_ept(result) for _, result, _ in insert_learner_runs)
    median_ept = reached[1]
    bases_ok = all(rate <= 0.3 for rate in base_rates.values())
    learner_ok = median_ept < EPISODE_BUDGET
    runtime_ok = all(w < 900.0 for w in walls)
    ok = bases_ok and learner_ok and runtime_ok
    report(
        capsys, 6,
        ok,
        f"bases {base_rates['open_loop']:.1f}/{base_rates['vinn']:.1f} (need <=0.3), "
        f"learner episodes-to-0.8 per seed {reached} (median {median_ept}, budget {EPISODE_BUDGET}), "
        f"slowest run {max(walls):.0f}s",
    )
    assert bases_ok, base_rates
    assert runtime_ok, walls
    # Known shortfall, kept red on purpose: with the slot tolerance at
    # 0.015 the trajectory-matching reward is deceptive around the narrow
    # success basin (near-miss placements score worse than never grasping),
    # so the residual learner never climbs to 0.8 on the held-out positions.
    # The measurements behind that conclusion live outside the package.
    assert learner_ok, (
        f"learner median episodes-to-threshold {median_ept} did not beat the "
        f"{EPISODE_BUDGET}-episode budget; per-seed {reached}"
    )


def test_criterion_07_guided_exploration_ladder(capsys, artifacts, acc_dir, push_guided_runs):
    medians = {}
    medians["guided"] = sorted(_ept(result) for _, result, _ in push_guided_runs)[2]
    for level in ("semi_guided", "unguided"):
        epts = []
        for seed in (0, 1, 2, 3, 4):
            cfg = RunConfig(task="push", guidance=level, seed=seed, **ACC)
            result, _ = _run(cfg, artifacts, acc_dir, f"push_{level}_s{seed}")
            epts.append(_ept(result))
        medians[level] = sorted(epts)[2]
    ordered = medians["guided"] <= medians["semi_guided"] <= medians["unguided"]
    strict = medians["guided"] < medians["unguided"]
    ok = ordered and strict
    report(
        capsys, 7,
        ok,
        "median episodes-to-0.8 "
        + " <= ".join(f"{lvl}={medians[lvl]}" for lvl in ("guided", "semi_guided", "unguided")),
    )
    assert ordered, medians
    assert strict, medians


def test_criterion_08_frozen_encoder_ablation(capsys, artifacts, acc_dir, push_guided_runs):
    frozen = sorted(
        _final_success(cfg, result, artifacts) for cfg, result, _ in push_guided_runs[:3]
    )[1]
    finals = []
    for seed in (0, 1, 2):
        cfg = RunConfig(task="push", guidance="guided", fix_encoder=False, seed=seed, **ACC)
        result, _ = _run(cfg, artifacts, acc_dir, f"push_unfrozen_s{seed}")
        finals.append(_final_success(cfg, result, artifacts))
    unfrozen = sorted(finals)[1]
    ok = frozen >= unfrozen
    report(capsys, 8, ok, f"median final success frozen {frozen:.1f} vs unfrozen {unfrozen:.1f}")
    assert ok, (frozen, unfrozen)


def test_criterion_09_offset_regularization(capsys, artifacts, acc_dir, push_guided_runs):
    def last_window_offset(result):
        return float(np.mean([row[4] for row in result.rows[-10:]]))

    base_offsets = sorted(last_window_offset(result) for _, result, _ in push_guided_runs[:3])
    base_success = sorted(
        _final_success(cfg, result, artifacts) for cfg, result, _ in push_guided_runs[:3]
    )
    reg_offsets, reg_success = [], []
    for seed in (0, 1, 2):
        cfg = RunConfig(task="push", guidance="guided", offset_reg=True, seed=seed, **ACC)
        result, _ = _run(cfg, artifacts, acc_dir, f"push_offreg_s{seed}")
        reg_offsets.append(last_window_offset(result))
        reg_success.append(_final_success(cfg, result, artifacts))
    reg_off, base_off = sorted(reg_offsets)[1], base_offsets[1]
    reg_suc, base_suc = sorted(reg_success)[1], base_success[1]
    shrunk = reg_off <= base_off / 5.0
    not_better = reg_suc <= base_suc
    ok = shrunk and not_better
    report(
        capsys, 9,
        ok,
        f"median final |offset| {reg_off:.4f} vs unregularized {base_off:.4f} (need <=1/5), "
        f"median final success {reg_suc:.1f} vs {base_suc:.1f}",
    )
    assert shrunk, (reg_off, base_off)
    assert not_better, (reg_suc, base_suc)


def test_criterion_10_safety_envelope(capsys, insert_learner_runs):
    beta = 0.3
    checked = 0
    violations = 0
    masked_nonzero = 0
    for _, result, _ in insert_learner_runs:
        lines = Path(result.transitions_path).read_text().splitlines()[1:]
        for line in lines:
            parts = line.split(",")
            base = np.array([float(parts[2]), float(parts[3])])
            executed = np.array([float(parts[4]), float(parts[5])])
            offset = np.array([float(parts[6]), float(parts[7])])
            checked += 1
            if np.any(np.abs(executed - base) > beta) or np.any(np.abs(offset) > beta):
                violations += 1
            if offset[0] != 0.0:
                masked_nonzero += 1
    ok = checked > 0 and violations == 0 and masked_nonzero == 0
    report(
        capsys, 10,
        ok,
        f"{checked} logged steps, {violations} bound violations, "
        f"{masked_nonzero} nonzero masked dimensions",
    )
    assert checked > 0
    assert violations == 0
    assert masked_nonzero == 0


def test_criterion_11_determinism(capsys, acc_dir):
    cfg = RunConfig(
        task="push",
        guidance="guided",
        seed=3,
        base_policy="vinn",
        feature_dim=16,
        hidden_dim=32,
        bc_epochs=300,
        bc_hidden_dim=32,
        episodes=4,
        batch_size=32,
        buffer_size=600,
        seed_frames=60,
    )
    demos = acc_dir / "det_demos.txt"
    encoder = acc_dir / "det_encoder.npz"
    record_demos(cfg, demos)
    pretrain(cfg, demos, encoder)
    first = train(cfg, demos, encoder, acc_dir / "det_a")
    second = train(cfg, demos, encoder, acc_dir / "det_b")
    a = Path(first.metrics_path).read_bytes()
    b = Path(second.metrics_path).read_bytes()
    ok = a == b
    report(capsys, 11, ok, f"metrics files identical: {ok} ({len(a)} bytes)")
    assert ok
