"""Gridworld victim: environment, critic, TD loss, evaluation."""

import numpy as np
import pytest

from poisonlab.diffnum import OptimizerConfig, finite_diff_grad, train_inner
from poisonlab.marl import (
    ACTIONS,
    N_ACTIONS,
    CriticParams,
    GridEnv,
    TDLoss,
    TargetPolicy,
    TargetPolicyLoss,
    UndefinedBaselineError,
    clean_greedy_visited_states,
    collect_dataset,
    evaluate_utility,
    flip_instance,
    greedy_actions,
    joint_value_iteration,
    micro_instance,
    utility_drop,
)
from poisonlab.memory import Edit, Perturbation, apply, full_edit_template

REFIT = OptimizerConfig(method="adam", learning_rate=0.05, steps=0,
                        batch_size=32, seed=0, polish=True)

STAY = ACTIONS.index("stay")


def fit(store, env, delta=None):
    td = TDLoss(store, env)
    return train_inner(td, np.zeros(env.n_agents * N_ACTIONS * env.n_cells), delta, REFIT)


class TestGridEnv:
    def test_wall_clipping(self):
        env = GridEnv(width=3, height=3, n_agents=1)
        # cell 0 is the top-left corner: up and left are walls
        assert env.step_cell(0, ACTIONS.index("up")) == 0
        assert env.step_cell(0, ACTIONS.index("left")) == 0
        assert env.step_cell(0, ACTIONS.index("down")) == 3
        assert env.step_cell(0, ACTIONS.index("right")) == 1
        assert env.step_cell(4, STAY) == 4

    def test_transition_table_matches_step_cell(self):
        env = GridEnv(width=4, height=3, n_agents=1)
        t = env.transition_table()
        for c in range(env.n_cells):
            for a in range(N_ACTIONS):
                assert t[c, a] == env.step_cell(c, a)

    def test_win_requires_coincidence_on_goal(self):
        env = GridEnv(width=3, height=3, n_agents=2, goal_cells=((0, 0),))
        assert env.is_win((0, 0))
        assert not env.is_win((0, 1))
        assert not env.is_win((1, 1))

    def test_action_encoding_roundtrip(self):
        env = GridEnv(n_agents=2)
        for joint in [(0, 0), (1, 4), (4, 2), (3, 3)]:
            assert env.decode_action(env.encode_action(joint)) == joint

    def test_validation(self):
        with pytest.raises(ValueError):
            GridEnv(horizon=0)
        with pytest.raises(ValueError):
            GridEnv(gamma=1.0)
        with pytest.raises(ValueError):
            GridEnv(goal_cells=())


class TestCritic:
    def test_q_tot_is_additive_across_agents(self):
        env = GridEnv(width=2, height=2, n_agents=2)
        rng = np.random.default_rng(0)
        params = CriticParams(
            rng.normal(size=env.n_agents * N_ACTIONS * env.n_cells),
            env.n_agents, N_ACTIONS, env.n_cells,
        )
        cells, acts = (1, 2), (0, 3)
        want = params.q_agent(0, 1)[0] + params.q_agent(1, 2)[3]
        assert params.q_tot(cells, acts) == pytest.approx(want)

    def test_greedy_actions_take_per_agent_argmax(self):
        env = GridEnv(width=2, height=2, n_agents=2)
        table = np.zeros((env.n_agents, N_ACTIONS, env.n_cells))
        table[0, 3, 1] = 1.0  # agent 0 at cell 1 prefers "right"
        table[1, 0, 2] = 1.0  # agent 1 at cell 2 prefers "up"
        acts = greedy_actions(table.ravel(), env, np.array([[1, 2]]))
        assert acts.tolist() == [[3, 0]]


class TestPlanning:
    def test_value_iteration_policy_wins_everywhere_on_micro_env(self):
        env = GridEnv(width=3, height=3, n_agents=1, horizon=6,
                      goal_cells=((0, 0),), gamma=0.9)
        q, _ = joint_value_iteration(env)
        assert evaluate_utility(q.ravel(), env) == 1.0

    def test_offline_training_recovers_planner_utility(self):
        env = GridEnv(width=3, height=3, n_agents=1, horizon=6,
                      goal_cells=((0, 0),), gamma=0.9)
        store = collect_dataset(env, 400, seed=0)
        theta = fit(store, env)
        assert evaluate_utility(theta, env) == 1.0


class TestCollectDataset:
    def test_deterministic_given_seed(self):
        env = GridEnv(width=3, height=3, n_agents=1)
        a = collect_dataset(env, 50, seed=4)
        b = collect_dataset(env, 50, seed=4)
        np.testing.assert_array_equal(a.replay.joint_obs, b.replay.joint_obs)
        np.testing.assert_array_equal(a.replay.rewards, b.replay.rewards)

    def test_rewards_mark_wins(self):
        env = GridEnv(width=3, height=3, n_agents=1, goal_cells=((0, 0),))
        store = collect_dataset(env, 200, seed=1)
        r = store.replay
        # this environment pays reward_win exactly on terminal transitions
        np.testing.assert_array_equal(r.rewards[r.done], 1.0)
        np.testing.assert_array_equal(r.rewards[~r.done], 0.0)


class TestEvaluation:
    def test_utility_drop_arithmetic(self):
        assert utility_drop(1.0, 0.5) == pytest.approx(0.5)
        assert utility_drop(0.8, 0.8) == 0.0
        assert utility_drop(0.5, 0.75) == pytest.approx(-0.5)

    def test_utility_drop_rejects_zero_baseline(self):
        with pytest.raises(UndefinedBaselineError):
            utility_drop(0.0, 0.0)

    def test_visited_states_exclude_wins(self):
        env = GridEnv(width=3, height=3, n_agents=1, horizon=6,
                      goal_cells=((0, 0),), gamma=0.9)
        q, _ = joint_value_iteration(env)
        states = clean_greedy_visited_states(q.ravel(), env)
        assert states
        assert all(not env.is_win(s) for s in states)


class TestFlipInstance:
    """Hand-checkable arithmetic on a four-transition buffer."""

    def test_clean_critic_values(self):
        env, store, gamma = flip_instance()
        theta = fit(store, env)
        q = theta.reshape(1, N_ACTIONS, env.n_cells)
        assert q[0, ACTIONS.index("left"), 1] == pytest.approx(1.0, abs=1e-9)
        assert q[0, ACTIONS.index("down"), 1] == pytest.approx(gamma**2, abs=1e-9)

    def test_reward_edit_flips_greedy_action(self):
        env, store, gamma = flip_instance()
        clean = fit(store, env)
        assert evaluate_utility(clean, env) > 0.0
        # -0.05 on the terminal record: Q(1,left) 1.0 -> 0.95 < 0.99^2
        delta = Perturbation(mode="modify", edits=(Edit(0, "reward", [-0.05]),))
        poisoned = fit(store, env, delta)
        q = poisoned.reshape(1, N_ACTIONS, env.n_cells)
        assert q[0, ACTIONS.index("left"), 1] == pytest.approx(0.95, abs=1e-9)
        assert evaluate_utility(poisoned, env) < evaluate_utility(clean, env)

    def test_apply_then_refit_equals_refit_with_delta(self):
        env, store, gamma = flip_instance()
        delta = Perturbation(mode="modify", edits=(Edit(0, "reward", [-0.05]),))
        via_delta = fit(store, env, delta)
        via_apply = fit(apply(store, delta), env)
        np.testing.assert_allclose(via_delta, via_apply, atol=1e-12)


class TestMicroInstance:
    def test_reward_trap_freezes_agent(self):
        env, store, gamma = micro_instance()
        clean = fit(store, env)
        assert evaluate_utility(clean, env) == 1.0
        trap = Perturbation(mode="modify", edits=(Edit(15, "reward", [0.05]),))
        poisoned = fit(store, env, trap)
        q = poisoned.reshape(1, N_ACTIONS, env.n_cells)
        # the self-loop bootstrap lifts Q(4, stay) to its fixed point
        # r / (1 - gamma) = 0.05 / 0.05 = 1.0, beating every exit action
        assert q[0, STAY, 4] == pytest.approx(1.0, abs=1e-9)
        assert np.argmax(q[0, :, 4]) == STAY
        # starts routing through cell 4 (cells 4, 5, 7, 8) now time out
        assert evaluate_utility(poisoned, env) == pytest.approx(5 / 9)


class TestTdLoss:
    def test_grad_theta_matches_finite_differences(self):
        env, store, _ = micro_instance()
        td = TDLoss(store, env)
        rng = np.random.default_rng(5)
        theta = 0.1 * rng.normal(size=N_ACTIONS * env.n_cells)
        g = td.grad_theta(theta, None)
        fd = finite_diff_grad(lambda x: td.value(x, None), theta, 1e-6)
        np.testing.assert_allclose(g, fd, atol=1e-5)

    def test_grad_delta_matches_finite_differences(self):
        env, store, _ = micro_instance()
        td = TDLoss(store, env)
        rng = np.random.default_rng(6)
        theta = 0.1 * rng.normal(size=N_ACTIONS * env.n_cells)
        template = full_edit_template(store, field="reward")
        probe = template.with_free_vector(0.02 * rng.normal(size=20))
        g = td.grad_delta(theta, probe)
        fd = finite_diff_grad(
            lambda x: td.value(theta, probe.with_free_vector(x)),
            probe.free_vector(), 1e-6,
        )
        np.testing.assert_allclose(g, fd, atol=1e-5)


class TestTargetPolicyLoss:
    def test_zero_when_target_strictly_greedy(self):
        env = GridEnv(width=2, height=2, n_agents=1, goal_cells=((0, 0),))
        target = TargetPolicy.from_rule(env, rule="freeze")
        table = np.zeros((1, N_ACTIONS, env.n_cells))
        table[0, STAY, :] = 1.0  # stay beats everything by 1.0 > margin
        loss = TargetPolicyLoss(env, target, key_states=((1,), (2,)), margin=0.1)
        assert loss.value(table.ravel(), None) == 0.0

    def test_hinge_value_by_hand(self):
        env = GridEnv(width=2, height=2, n_agents=1, goal_cells=((0, 0),))
        target = TargetPolicy.from_rule(env, rule="freeze")
        loss = TargetPolicyLoss(env, target, key_states=((1,),), margin=0.1)
        # all-zero critic: hinge = margin + 0 - 0 = margin
        assert loss.value(np.zeros(N_ACTIONS * env.n_cells), None) == pytest.approx(0.1)

    def test_rejects_empty_key_states(self):
        env = GridEnv(width=2, height=2, n_agents=1)
        target = TargetPolicy.from_rule(env, rule="freeze")
        with pytest.raises(ValueError):
            TargetPolicyLoss(env, target, key_states=(), margin=0.1)

    def test_anti_rendezvous_needs_two_agents(self):
        env = GridEnv(width=2, height=2, n_agents=1)
        with pytest.raises(ValueError):
            TargetPolicy.from_rule(env, rule="anti_rendezvous")
