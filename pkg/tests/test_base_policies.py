"""Base policy tests: open-loop replay, selection, retrieval weighting."""

import numpy as np
import pytest

from otres.base_policies import (
    OpenLoopBank,
    OpenLoopPolicy,
    VinnIndex,
    build_vinn_index,
    open_loop_act,
    open_loop_bank,
    open_loop_policy,
    select_open_loop,
    vinn_act,
)
from otres.demos import DemoSet, Trajectory
from otres.encoders import Encoder, bc_pretrain, encode, freeze
from otres.envs import reset, run_expert_episode, step, task_config


def identity_encoder(dim):
    return freeze(Encoder(kind="identity", obs_dim=dim, z_dim=dim))


def expert_demoset(task):
    cfg = task_config(task)
    trajs = tuple(
        Trajectory(np.array(o), np.array(a))
        for o, a, _ in (run_expert_episode(cfg, p) for p in cfg.demo_positions)
    )
    return DemoSet(trajectories=trajs, task=task)


class TestOpenLoop:
    def test_indexing(self):
        seq = np.array([[0.1, 0.0], [0.2, 0.0], [0.3, 0.0]])
        p = OpenLoopPolicy(action_sequence=seq)
        np.testing.assert_array_equal(open_loop_act(p, 1), [0.2, 0.0])

    def test_clamps_past_horizon(self):
        seq = np.array([[0.1, 0.0], [0.2, 0.0], [0.3, 0.0]])
        p = OpenLoopPolicy(action_sequence=seq)
        np.testing.assert_array_equal(open_loop_act(p, 99), [0.3, 0.0])
        assert p.horizon == 3

    def test_negative_timestep_rejected(self):
        p = OpenLoopPolicy(action_sequence=np.zeros((2, 2)))
        with pytest.raises(ValueError, match="timestep"):
            open_loop_act(p, -1)

    def test_replay_reproduces_demo_rollout(self):
        # replaying the recorded actions from the demo's exact start state
        # must retrace the demo observation-for-observation
        cfg = task_config("insert")
        pos = cfg.demo_positions[1]
        demo_obs, demo_act, ok = run_expert_episode(cfg, pos)
        assert ok
        policy = open_loop_policy(Trajectory(np.array(demo_obs), np.array(demo_act)))
        state, obs = reset(cfg, position_override=pos)
        for t in range(policy.horizon):
            np.testing.assert_array_equal(obs, demo_obs[t])
            state, obs, done = step(state, open_loop_act(policy, t), cfg)
        assert done

    def test_sequence_is_immutable(self):
        p = OpenLoopPolicy(action_sequence=np.zeros((2, 2)))
        with pytest.raises(ValueError):
            p.action_sequence[0, 0] = 1.0

    def test_empty_sequence_rejected(self):
        with pytest.raises(ValueError, match="nonempty"):
            OpenLoopPolicy(action_sequence=np.zeros((0, 2)))


class TestOpenLoopBank:
    def test_selects_nearest_first_observation(self):
        trajs = tuple(
            Trajectory(np.full((2, 2), v), np.full((2, 2), v / 10)) for v in (0.1, 0.5, 0.9)
        )
        demos = DemoSet(trajectories=trajs, task="reach")
        bank = open_loop_bank(demos, identity_encoder(2))
        picked = select_open_loop(bank, np.array([0.52, 0.52]))
        np.testing.assert_array_equal(picked.action_sequence, trajs[1].actions)

    def test_tie_resolves_to_lowest_index(self):
        trajs = (
            Trajectory(np.zeros((1, 2)), np.full((1, 2), 0.1)),
            Trajectory(np.ones((1, 2)), np.full((1, 2), 0.2)),
        )
        demos = DemoSet(trajectories=trajs, task="reach")
        bank = open_loop_bank(demos, identity_encoder(2))
        picked = select_open_loop(bank, np.array([0.5, 0.5]))
        np.testing.assert_array_equal(picked.action_sequence, trajs[0].actions)

    def test_dimension_mismatch_rejected(self):
        bank = OpenLoopBank(
            policies=(OpenLoopPolicy(np.zeros((1, 2))),), first_embeddings=np.zeros((1, 3))
        )
        with pytest.raises(ValueError, match="dimension"):
            select_open_loop(bank, np.zeros(2))


class TestVinnAct:
    def test_exact_retrieval_with_k1(self):
        idx = VinnIndex(
            embeddings=np.array([[1.0, 2.0], [3.0, 4.0]]),
            actions=np.array([[0.25, -0.5], [0.9, 0.9]]),
            k=1,
        )
        np.testing.assert_array_equal(vinn_act(idx, [1.0, 2.0]), [0.25, -0.5])

    def test_equal_distances_average(self):
        idx = VinnIndex(
            embeddings=np.array([[-1.0], [1.0]]),
            actions=np.array([[1.0], [3.0]]),
            k=2,
        )
        np.testing.assert_allclose(vinn_act(idx, [0.0]), [2.0], rtol=0, atol=1e-15)

    def test_weight_formula(self):
        # distances (0, ln 3) at temperature 1 give weights (0.75, 0.25),
        # so actions 0 and 4 blend to 1.0
        idx = VinnIndex(
            embeddings=np.array([[0.0], [np.log(3.0)]]),
            actions=np.array([[0.0], [4.0]]),
            k=2,
            weight_temperature=1.0,
        )
        np.testing.assert_allclose(vinn_act(idx, [0.0]), [1.0], rtol=0, atol=1e-12)

    def test_effective_k_capped_at_entry_count(self):
        idx = VinnIndex(
            embeddings=np.array([[0.0], [1.0]]), actions=np.array([[1.0], [1.0]]), k=5
        )
        np.testing.assert_allclose(vinn_act(idx, [0.0]), [1.0])

    def test_output_in_convex_hull_of_neighbors(self):
        rng = np.random.default_rng(23)
        idx = VinnIndex(
            embeddings=rng.normal(size=(40, 6)),
            actions=rng.uniform(-1.0, 1.0, size=(40, 2)),
            k=3,
        )
        for _ in range(50):
            a = vinn_act(idx, rng.normal(size=6))
            assert np.all(a >= idx.actions.min(axis=0) - 1e-12)
            assert np.all(a <= idx.actions.max(axis=0) + 1e-12)

    def test_tie_break_uses_lowest_entry_index(self):
        # three entries equidistant from the query with k=2: the two
        # lowest-index entries win
        idx = VinnIndex(
            embeddings=np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]),
            actions=np.array([[0.0, 0.0], [1.0, 0.0], [100.0, 100.0]]),
            k=2,
        )
        np.testing.assert_allclose(vinn_act(idx, [0.0, 0.0]), [0.5, 0.0], atol=1e-15)

    def test_repeated_queries_bit_identical(self):
        rng = np.random.default_rng(29)
        idx = VinnIndex(
            embeddings=rng.normal(size=(10, 4)), actions=rng.normal(size=(10, 2)), k=3
        )
        z = rng.normal(size=4)
        np.testing.assert_array_equal(vinn_act(idx, z), vinn_act(idx, z))

    def test_distant_entries_do_not_underflow(self):
        idx = VinnIndex(
            embeddings=np.array([[0.0], [5000.0]]),
            actions=np.array([[1.0], [-1.0]]),
            k=2,
        )
        a = vinn_act(idx, [4000.0])
        assert np.all(np.isfinite(a))
        np.testing.assert_allclose(a, [-1.0], atol=1e-12)

    def test_cosine_distance_option(self):
        idx = VinnIndex(
            embeddings=np.array([[1.0, 0.0], [0.0, 1.0]]),
            actions=np.array([[1.0], [-1.0]]),
            k=1,
            distance="cosine",
        )
        # scaling a vector leaves cosine distance unchanged
        np.testing.assert_array_equal(vinn_act(idx, [7.0, 0.0]), [1.0])

    def test_dimension_mismatch_rejected(self):
        idx = VinnIndex(embeddings=np.zeros((2, 3)), actions=np.zeros((2, 2)))
        with pytest.raises(ValueError, match="dimension"):
            vinn_act(idx, np.zeros(4))


class TestVinnIndexValidation:
    def test_k_must_be_positive(self):
        with pytest.raises(ValueError, match="k"):
            VinnIndex(embeddings=np.zeros((1, 2)), actions=np.zeros((1, 2)), k=0)

    def test_temperature_must_be_positive(self):
        with pytest.raises(ValueError, match="temperature"):
            VinnIndex(
                embeddings=np.zeros((1, 2)), actions=np.zeros((1, 2)), weight_temperature=0.0
            )

    def test_entries_must_be_nonempty(self):
        with pytest.raises(ValueError, match="nonempty"):
            VinnIndex(embeddings=np.zeros((0, 2)), actions=np.zeros((0, 2)))

    def test_count_mismatch_rejected(self):
        with pytest.raises(ValueError, match="embeddings"):
            VinnIndex(embeddings=np.zeros((2, 2)), actions=np.zeros((3, 2)))

    def test_unknown_distance_rejected(self):
        with pytest.raises(ValueError, match="distance"):
            VinnIndex(embeddings=np.zeros((1, 2)), actions=np.zeros((1, 2)), distance="l1")

    def test_index_is_immutable(self):
        idx = VinnIndex(embeddings=np.zeros((1, 2)), actions=np.zeros((1, 2)))
        with pytest.raises(ValueError):
            idx.embeddings[0, 0] = 1.0


class TestBuildFromDemos:
    def test_index_covers_every_demo_step(self):
        demos = expert_demoset("push")
        total = sum(len(tr) for tr in demos.trajectories)
        idx = build_vinn_index(demos, identity_encoder(demos.obs_dim))
        assert idx.embeddings.shape == (total, demos.obs_dim)
        assert idx.actions.shape == (total, demos.action_dim)

    def test_vinn_with_trained_encoder_stays_in_bounds(self):
        demos = expert_demoset("push")
        encoder, _, _ = bc_pretrain(demos, epochs=200, seed=0)
        freeze(encoder)
        idx = build_vinn_index(demos, encoder)
        rng = np.random.default_rng(31)
        for _ in range(20):
            z = encode(encoder, rng.uniform(0.0, 1.0, size=demos.obs_dim))
            a = vinn_act(idx, z)
            # convex combinations can overshoot the hull by rounding ulps
            assert np.all(a >= demos.action_low - 1e-12)
            assert np.all(a <= demos.action_high + 1e-12)

    def test_retrieving_demo_features_returns_demo_actions(self):
        demos = expert_demoset("reach")
        idx = build_vinn_index(demos, identity_encoder(demos.obs_dim), k=1)
        obs, act = demos.all_pairs()
        for i in (0, 3, len(obs) - 1):
            np.testing.assert_array_equal(vinn_act(idx, obs[i]), act[i])
