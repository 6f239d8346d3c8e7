"""Cooperative rendezvous gridworld victim.

Two (by default) agents on a small grid must co-occupy a goal cell within a
short horizon. Training is offline: an epsilon-greedy-around-optimal
behavior policy fills a replay buffer; a value-decomposed linear critic
Q_tot(s, u) = sum_i Q_i(o_i, u_i) is fit by minimizing the squared Bellman
residual over the buffer; execution is decentralized per-agent greedy.

The attack surface is the buffer: reward and observation fields are
differentiable inputs of the training loss, so perturbations flow through
retraining into the executed policy. The attack's upper loss pushes the
critic's greedy action toward an adversarial target policy at key states,
with true utility measured separately by exhaustive greedy rollouts.
"""

from __future__ import annotations

import dataclasses
import itertools

import numpy as np

from . import _kernels
from .diffnum import DiffLoss, OptimizerConfig, batch_schedule
from .memory import MemoryStore, Perturbation, ReplayData, apply

ACTIONS = ("up", "down", "left", "right", "stay")
N_ACTIONS = 5
_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1), (0, 0))


class UndefinedBaselineError(ValueError):
    """Utility drop requested against a zero clean win rate."""


@dataclasses.dataclass(frozen=True)
class GridEnv:
    """Deterministic multi-agent gridworld with wall clipping."""

    width: int = 4
    height: int = 4
    n_agents: int = 2
    horizon: int = 6
    goal_cells: tuple[tuple[int, int], ...] = ((0, 0),)
    reward_win: float = 1.0
    step_penalty: float = 0.0
    gamma: float = 0.99
    epsilon_behavior: float = 0.2

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not self.goal_cells:
            raise ValueError("need at least one goal cell")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")

    def max_goal_distance(self) -> int:
        """Largest Manhattan distance from any cell to its nearest goal.
        A solvable-from-everywhere map satisfies max_goal_distance() <=
        horizon; short-horizon diagnostic instances may violate it."""
        return max(
            min(abs(r - gr) + abs(c - gc) for gr, gc in self.goal_cells)
            for r in range(self.height)
            for c in range(self.width)
        )

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    @property
    def n_actions(self) -> int:
        return N_ACTIONS

    @property
    def obs_dim(self) -> int:
        return self.n_agents * self.n_cells

    @property
    def goal_cell_ids(self) -> tuple[int, ...]:
        return tuple(r * self.width + c for r, c in self.goal_cells)

    def step_cell(self, cell: int, action: int) -> int:
        r, c = divmod(cell, self.width)
        dr, dc = _MOVES[action]
        r = min(max(r + dr, 0), self.height - 1)
        c = min(max(c + dc, 0), self.width - 1)
        return r * self.width + c

    def is_win(self, cells: tuple[int, ...]) -> bool:
        return len(set(cells)) == 1 and cells[0] in self.goal_cell_ids

    def all_joint_states(self) -> list[tuple[int, ...]]:
        return list(itertools.product(range(self.n_cells), repeat=self.n_agents))

    def encode_action(self, actions: tuple[int, ...]) -> int:
        code = 0
        for a in actions:
            code = code * N_ACTIONS + a
        return code

    def decode_action(self, code: int) -> tuple[int, ...]:
        out = []
        for _ in range(self.n_agents):
            out.append(code % N_ACTIONS)
            code //= N_ACTIONS
        return tuple(reversed(out))

    def one_hot(self, cells: tuple[int, ...] | np.ndarray) -> np.ndarray:
        v = np.zeros(self.obs_dim)
        for i, c in enumerate(cells):
            v[i * self.n_cells + int(c)] = 1.0
        return v

    def transition_table(self) -> np.ndarray:
        """next_cell[cell, action] for single-agent moves."""
        t = np.empty((self.n_cells, N_ACTIONS), dtype=np.int64)
        for c in range(self.n_cells):
            for a in range(N_ACTIONS):
                t[c, a] = self.step_cell(c, a)
        return t


@dataclasses.dataclass(frozen=True, eq=False)
class CriticParams:
    """Value-decomposed linear critic over one-hot observations.

    Flat layout: theta[(agent * n_actions + action) * n_cells + cell], so
    Q_i(cell, action) is a table lookup and Q_tot sums the per-agent tables.
    """

    theta: np.ndarray
    n_agents: int
    n_actions: int
    n_cells: int

    def __post_init__(self):
        th = np.array(self.theta, dtype=np.float64, copy=True)
        if th.shape != (self.n_agents * self.n_actions * self.n_cells,):
            raise ValueError("theta length does not match critic shape")
        if not np.all(np.isfinite(th)):
            raise ValueError("critic parameters must be finite")
        th.setflags(write=False)
        object.__setattr__(self, "theta", th)

    @classmethod
    def zeros(cls, env: GridEnv) -> "CriticParams":
        return cls(
            np.zeros(env.n_agents * N_ACTIONS * env.n_cells),
            env.n_agents,
            N_ACTIONS,
            env.n_cells,
        )

    def table(self) -> np.ndarray:
        return self.theta.reshape(self.n_agents, self.n_actions, self.n_cells)

    def q_agent(self, agent: int, cell: int) -> np.ndarray:
        return self.table()[agent, :, cell]

    def q_tot(self, cells: tuple[int, ...], actions: tuple[int, ...]) -> float:
        t = self.table()
        return float(sum(t[i, actions[i], cells[i]] for i in range(self.n_agents)))


def _as_theta(params, env: GridEnv) -> np.ndarray:
    if isinstance(params, CriticParams):
        return params.theta
    theta = np.asarray(params, dtype=np.float64)
    if theta.shape != (env.n_agents * N_ACTIONS * env.n_cells,):
        raise ValueError("theta length does not match the environment")
    return theta


@dataclasses.dataclass(frozen=True, eq=False)
class TargetPolicy:
    """Adversarial joint action per joint state.

    Rules: "anti_rendezvous" picks the joint move maximizing the summed
    pairwise distance of the next cells (needs >= 2 agents);
    "anti_goal" maximizes summed distance of next cells to the nearest
    goal; "freeze" is all-stay. Ties break toward the lowest encoded joint
    action, so the mapping is deterministic.
    """

    rule: str
    actions: dict

    @classmethod
    def from_rule(cls, env: GridEnv, rule: str = "anti_rendezvous") -> "TargetPolicy":
        if rule == "anti_rendezvous" and env.n_agents < 2:
            raise ValueError("anti_rendezvous needs at least 2 agents")
        if rule not in ("anti_rendezvous", "anti_goal", "freeze"):
            raise ValueError(f"unknown target policy rule {rule!r}")
        stay = tuple([ACTIONS.index("stay")] * env.n_agents)
        mapping: dict = {}
        for state in env.all_joint_states():
            if rule == "freeze":
                mapping[state] = stay
                continue
            best_score, best_act = -np.inf, stay
            for joint in itertools.product(range(N_ACTIONS), repeat=env.n_agents):
                nxt = tuple(env.step_cell(c, a) for c, a in zip(state, joint))
                if rule == "anti_rendezvous":
                    score = sum(
                        _manhattan(env, nxt[i], nxt[j])
                        for i in range(env.n_agents)
                        for j in range(i + 1, env.n_agents)
                    )
                else:
                    score = sum(
                        min(_manhattan(env, c, g) for g in env.goal_cell_ids)
                        for c in nxt
                    )
                if score > best_score:
                    best_score, best_act = score, joint
            mapping[state] = best_act
        return cls(rule=rule, actions=mapping)

    def joint_action(self, state: tuple[int, ...]) -> tuple[int, ...]:
        return self.actions[state]


def _manhattan(env: GridEnv, a: int, b: int) -> int:
    ra, ca = divmod(a, env.width)
    rb, cb = divmod(b, env.width)
    return abs(ra - rb) + abs(ca - cb)


# ---------------------------------------------------------------------------
# planning and data collection
# ---------------------------------------------------------------------------


def joint_value_iteration(
    env: GridEnv, gamma: float | None = None, tol: float = 1e-12, max_iter: int = 500
) -> tuple[np.ndarray, np.ndarray]:
    """Exact Q and greedy joint policy on the joint-state MDP.

    Returns (q, pi): q has shape (n_states, n_joint_actions) with winning
    states absorbing at value zero; pi is the argmax joint action code
    (lowest code on ties).
    """
    gamma = env.gamma if gamma is None else gamma
    states = env.all_joint_states()
    s_index = {s: k for k, s in enumerate(states)}
    n_s = len(states)
    n_a = N_ACTIONS**env.n_agents

    nxt = np.empty((n_s, n_a), dtype=np.int64)
    rew = np.zeros((n_s, n_a))
    win_next = np.zeros((n_s, n_a), dtype=bool)
    win_here = np.array([env.is_win(s) for s in states])
    for k, s in enumerate(states):
        for code in range(n_a):
            joint = env.decode_action(code)
            ns = tuple(env.step_cell(c, a) for c, a in zip(s, joint))
            nxt[k, code] = s_index[ns]
            win_next[k, code] = env.is_win(ns)
            rew[k, code] = env.reward_win if env.is_win(ns) else env.step_penalty

    v = np.zeros(n_s)
    for _ in range(max_iter):
        q = rew + gamma * np.where(win_next, 0.0, v[nxt])
        q[win_here] = 0.0
        v_new = q.max(axis=1)
        if np.max(np.abs(v_new - v)) < tol:
            v = v_new
            break
        v = v_new
    q = rew + gamma * np.where(win_next, 0.0, v[nxt])
    q[win_here] = 0.0
    return q, q.argmax(axis=1)


def collect_dataset(
    env: GridEnv, n: int, seed: int, epsilon: float | None = None
) -> MemoryStore:
    """Fill a replay buffer with epsilon-greedy-around-optimal rollouts.

    Episodes start from uniform joint states; each agent independently
    explores with probability epsilon, otherwise plays its component of the
    optimal joint action from exact value iteration. Deterministic given
    the seed (fixed draw order: start cells, then per step one uniform and
    one action draw per agent).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    epsilon = env.epsilon_behavior if epsilon is None else epsilon
    _, pi = joint_value_iteration(env)
    states = env.all_joint_states()
    s_index = {s: k for k, s in enumerate(states)}
    rng = np.random.default_rng(seed)

    obs, acts, rews, nobs, dones = [], [], [], [], []
    while len(rews) < n:
        cells = tuple(int(c) for c in rng.integers(env.n_cells, size=env.n_agents))
        if env.is_win(cells):
            continue
        for _ in range(env.horizon):
            explore = rng.random(env.n_agents) < epsilon
            random_actions = rng.integers(N_ACTIONS, size=env.n_agents)
            opt = env.decode_action(int(pi[s_index[cells]]))
            joint = tuple(
                int(random_actions[i]) if explore[i] else opt[i]
                for i in range(env.n_agents)
            )
            nxt = tuple(env.step_cell(c, a) for c, a in zip(cells, joint))
            won = env.is_win(nxt)
            obs.append(env.one_hot(cells))
            acts.append(env.encode_action(joint))
            rews.append(env.reward_win if won else env.step_penalty)
            nobs.append(env.one_hot(nxt))
            dones.append(won)
            cells = nxt
            if won or len(rews) >= n:
                break

    data = ReplayData(
        joint_obs=np.asarray(obs),
        joint_actions=np.asarray(acts, dtype=np.int64),
        rewards=np.asarray(rews),
        next_joint_obs=np.asarray(nobs),
        done=np.asarray(dones, dtype=bool),
    )
    return MemoryStore(kind="replay", data=data)


# ---------------------------------------------------------------------------
# training loss
# ---------------------------------------------------------------------------


class TDLoss(DiffLoss):
    """Squared Bellman residual of the decomposed critic over a buffer.

    L(theta, delta) = mean_b (Q_tot(o_b, u_b) - y_b)^2 with
    y_b = r_b + gamma * (1 - done_b) * sum_i max_a Q_i(o'_b,i, a), on the
    buffer perturbed by delta (reward and obs fields). The max branch is
    treated as locally constant, which makes all derivatives exact wherever
    the argmax is unique: the gradient matches finite differences of the
    value, the Hessian is the positive semi-definite Gauss-Newton form
    (2/N) sum u_b u_b^T, and reward/obs mixed derivatives are analytic.

    Next-state observations are never perturbed, so the bootstrap side
    always uses integer cell indices; that keeps an indexed fast path
    (compiled kernel) available whenever delta touches rewards only.
    """

    def __init__(self, store: MemoryStore, env: GridEnv, gamma: float | None = None):
        r = store.replay
        self.env = env
        self.gamma = env.gamma if gamma is None else gamma
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        self.store = store
        self.n = len(r)
        self.n_samples = self.n
        n_ag, n_c = env.n_agents, env.n_cells

        self.obs_idx = self._one_hot_indices(r.joint_obs, n_ag, n_c, "joint_obs")
        self.next_idx = self._one_hot_indices(
            r.next_joint_obs, n_ag, n_c, "next_joint_obs"
        )
        self.act_idx = np.empty((self.n, n_ag), dtype=np.int64)
        for b in range(self.n):
            self.act_idx[b] = env.decode_action(int(r.joint_actions[b]))
        self.done_f = r.done.astype(np.float64)
        self.agent_base = np.arange(n_ag) * N_ACTIONS * n_c
        self.cur_flat = (
            self.agent_base[None, :] + self.act_idx * n_c + self.obs_idx
        )
        self.n_params = n_ag * N_ACTIONS * n_c

    @staticmethod
    def _one_hot_indices(obs: np.ndarray, n_agents: int, n_cells: int, name: str):
        idx = np.empty((obs.shape[0], n_agents), dtype=np.int64)
        for i in range(n_agents):
            block = obs[:, i * n_cells : (i + 1) * n_cells]
            idx[:, i] = block.argmax(axis=1)
            hot = np.zeros_like(block)
            hot[np.arange(obs.shape[0]), idx[:, i]] = 1.0
            if not np.array_equal(hot, block):
                raise ValueError(f"{name} must be one-hot per agent block")
        return idx

    # -- perturbed views ---------------------------------------------------

    def _materialize(self, delta: Perturbation | None):
        """(rewards, obs or None): obs is None when still exactly one-hot."""
        r = self.store.replay
        if delta is None or delta.n_edits == 0:
            return r.rewards, None
        if all(e.field == "reward" for e in delta.edits):
            rewards = r.rewards.copy()
            for e in delta.edits:
                rewards[e.record_index] += e.delta_values[0]
            return rewards, None
        poisoned = apply(self.store, delta).replay
        return poisoned.rewards, poisoned.joint_obs

    def _q_current(self, theta3, obs, idx):
        """Q_tot at taken actions for records idx (obs=None: indexed path)."""
        env = self.env
        if obs is None:
            return theta3.reshape(-1)[self.cur_flat[idx]].sum(axis=1)
        q = np.zeros(idx.size)
        for i in range(env.n_agents):
            rows = theta3[i, self.act_idx[idx, i], :]
            block = obs[idx, i * env.n_cells : (i + 1) * env.n_cells]
            q += np.sum(rows * block, axis=1)
        return q

    def _bootstrap(self, theta3, idx):
        """(bootstrap value, per-agent argmax flat indices) for records idx."""
        env = self.env
        boot = np.zeros(idx.size)
        best_flat = np.empty((idx.size, env.n_agents), dtype=np.int64)
        for i in range(env.n_agents):
            cand = theta3[i][:, self.next_idx[idx, i]]  # (A, B)
            best_a = cand.argmax(axis=0)
            boot += cand[best_a, np.arange(idx.size)]
            best_flat[:, i] = (
                self.agent_base[i] + best_a * env.n_cells + self.next_idx[idx, i]
            )
        return boot, best_flat

    def _residual(self, theta, delta, idx):
        theta3 = theta.reshape(self.env.n_agents, N_ACTIONS, self.env.n_cells)
        rewards, obs = self._materialize(delta)
        q = self._q_current(theta3, obs, idx)
        boot, best_flat = self._bootstrap(theta3, idx)
        not_done = 1.0 - self.done_f[idx]
        e = q - (rewards[idx] + self.gamma * not_done * boot)
        return e, best_flat, not_done, obs

    # -- DiffLoss contract -------------------------------------------------

    def value(self, theta, delta):
        idx = np.arange(self.n)
        e, _, _, _ = self._residual(np.asarray(theta, dtype=np.float64), delta, idx)
        return float(np.mean(e * e))

    def _accumulate(self, weights, best_flat, not_done, obs, idx):
        """(2/B) * sum_b weights_b * u_b over records idx, as a flat vector."""
        env = self.env
        coef = 2.0 / idx.size
        g = np.zeros(self.n_params)
        g2 = g.reshape(env.n_agents * N_ACTIONS, env.n_cells)
        if obs is None:
            for i in range(env.n_agents):
                np.add.at(g, self.cur_flat[idx, i], coef * weights)
        else:
            for i in range(env.n_agents):
                block = obs[idx, i * env.n_cells : (i + 1) * env.n_cells]
                np.add.at(
                    g2,
                    i * N_ACTIONS + self.act_idx[idx, i],
                    coef * weights[:, None] * block,
                )
        for i in range(env.n_agents):
            np.add.at(
                g, best_flat[:, i], -coef * weights * self.gamma * not_done
            )
        return g

    def grad_theta(self, theta, delta, idx=None):
        idx = np.arange(self.n) if idx is None else np.asarray(idx)
        e, best_flat, not_done, obs = self._residual(
            np.asarray(theta, dtype=np.float64), delta, idx
        )
        return self._accumulate(e, best_flat, not_done, obs, idx)

    def hvp_theta(self, theta, delta, v):
        theta = np.asarray(theta, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        idx = np.arange(self.n)
        _, best_flat, not_done, obs = self._residual(theta, delta, idx)
        v3 = v.reshape(self.env.n_agents, N_ACTIONS, self.env.n_cells)
        s = self._q_current(v3, obs, idx)
        s -= (
            self.gamma
            * not_done
            * v.reshape(-1)[best_flat].sum(axis=1)
        )
        return self._accumulate(s, best_flat, not_done, obs, idx)

    def grad_delta(self, theta, delta):
        theta = np.asarray(theta, dtype=np.float64)
        idx = np.arange(self.n)
        e, _, _, _ = self._residual(theta, delta, idx)
        theta2 = theta.reshape(self.env.n_agents * N_ACTIONS, self.env.n_cells)
        out = []
        coef = 2.0 / self.n
        for edit in delta.edits:
            b = edit.record_index
            if edit.field == "reward":
                out.append(np.array([-coef * e[b]]))
            else:
                grads = [
                    coef * e[b] * theta2[i * N_ACTIONS + self.act_idx[b, i], :]
                    for i in range(self.env.n_agents)
                ]
                out.append(np.concatenate(grads))
        if not out:
            return np.zeros(0)
        return np.concatenate(out)

    def mixed_vjp(self, theta, delta, v):
        theta = np.asarray(theta, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        idx = np.arange(self.n)
        e, best_flat, not_done, obs = self._residual(theta, delta, idx)
        v3 = v.reshape(self.env.n_agents, N_ACTIONS, self.env.n_cells)
        s = self._q_current(v3, obs, idx)
        s -= self.gamma * not_done * v.reshape(-1)[best_flat].sum(axis=1)
        theta2 = theta.reshape(self.env.n_agents * N_ACTIONS, self.env.n_cells)
        v2 = v.reshape(self.env.n_agents * N_ACTIONS, self.env.n_cells)
        coef = 2.0 / self.n
        out = []
        for edit in delta.edits:
            b = edit.record_index
            if edit.field == "reward":
                out.append(np.array([-coef * s[b]]))
            else:
                grads = [
                    coef
                    * (
                        s[b] * theta2[i * N_ACTIONS + self.act_idx[b, i], :]
                        + e[b] * v2[i * N_ACTIONS + self.act_idx[b, i], :]
                    )
                    for i in range(self.env.n_agents)
                ]
                out.append(np.concatenate(grads))
        if not out:
            return np.zeros(0)
        return np.concatenate(out)

    # -- training paths ----------------------------------------------------

    def run_training(self, theta0, delta, cfg: OptimizerConfig):
        rewards, obs = self._materialize(delta)
        if obs is not None:
            return None  # dense observations: generic optimizer path
        batches = batch_schedule(self.n, cfg.batch_size, cfg.steps, cfg.seed)
        offsets = np.zeros(len(batches) + 1, dtype=np.int64)
        for k, b in enumerate(batches):
            offsets[k + 1] = offsets[k] + b.size
        indices = np.concatenate(batches) if batches else np.zeros(0, dtype=np.int64)
        # kernels take writable, contiguous buffers and update theta in place
        return _kernels.td_adam_train(
            np.array(theta0, dtype=np.float64, copy=True),
            np.ascontiguousarray(self.obs_idx),
            np.ascontiguousarray(self.act_idx),
            np.ascontiguousarray(self.next_idx),
            np.array(rewards, dtype=np.float64, copy=True),
            np.ascontiguousarray(self.done_f),
            self.gamma,
            N_ACTIONS,
            self.env.n_cells,
            0 if cfg.method == "sgd" else 1,
            cfg.learning_rate,
            offsets,
            indices,
        )

    def exact_refit(self, theta, delta, max_rounds: int = 60):
        """Iterated frozen-branch least squares.

        Freeze the bootstrap argmax at the current parameters, solve the
        resulting linear least-squares problem exactly, and repeat until the
        argmax pattern stabilizes. At a stable pattern the solution is an
        exact stationary point of the piecewise-quadratic residual, which
        pins down theta*(delta) far more tightly than stochastic steps.
        Returns the best iterate by loss (guards against branch cycling).
        """
        theta = np.array(theta, dtype=np.float64, copy=True)
        rewards, obs = self._materialize(delta)
        idx = np.arange(self.n)
        best_theta, best_loss = theta, self.value(theta, delta)
        seen: set[bytes] = set()
        for _ in range(max_rounds):
            theta3 = theta.reshape(self.env.n_agents, N_ACTIONS, self.env.n_cells)
            _, best_flat = self._bootstrap(theta3, idx)
            pattern = best_flat.tobytes()
            if pattern in seen:
                break
            seen.add(pattern)
            u = np.zeros((self.n, self.n_params))
            if obs is None:
                for i in range(self.env.n_agents):
                    u[np.arange(self.n), self.cur_flat[:, i]] += 1.0
            else:
                for i in range(self.env.n_agents):
                    block = obs[:, i * self.env.n_cells : (i + 1) * self.env.n_cells]
                    rows = (i * N_ACTIONS + self.act_idx[:, i]) * self.env.n_cells
                    for b in range(self.n):
                        u[b, rows[b] : rows[b] + self.env.n_cells] += block[b]
            for i in range(self.env.n_agents):
                u[np.arange(self.n), best_flat[:, i]] -= self.gamma * (
                    1.0 - self.done_f
                )
            theta_new = np.linalg.lstsq(u, rewards, rcond=None)[0]
            loss_new = self.value(theta_new, delta)
            if loss_new < best_loss - 1e-15:
                best_theta, best_loss = theta_new, loss_new
            theta = theta_new
        return best_theta


class TargetPolicyLoss(DiffLoss):
    """Hinge margin loss steering the critic's greedy action to a target.

    mean over key states s of max(0, margin + max_{u != a_T} Q_tot(s, u)
    - Q_tot(s, a_T)): zero exactly when the target action is the strict
    greedy choice with the demanded margin everywhere. Piecewise linear in
    theta, so the Hessian vanishes almost everywhere and the loss never
    reads the memory.
    """

    n_samples = 0

    def __init__(
        self,
        env: GridEnv,
        target: TargetPolicy,
        key_states: tuple[tuple[int, ...], ...],
        margin: float = 0.1,
    ):
        if not key_states:
            raise ValueError("key_states must be non-empty")
        if margin < 0:
            raise ValueError("margin must be >= 0")
        self.env = env
        self.target = target
        self.key_states = tuple(tuple(int(c) for c in s) for s in key_states)
        self.margin = margin
        self._joint_actions = list(
            itertools.product(range(N_ACTIONS), repeat=env.n_agents)
        )

    def _joint_q(self, theta3, state):
        q = np.zeros(len(self._joint_actions))
        for k, joint in enumerate(self._joint_actions):
            q[k] = sum(
                theta3[i, joint[i], state[i]] for i in range(self.env.n_agents)
            )
        return q

    def value(self, theta, delta):
        theta3 = np.asarray(theta, dtype=np.float64).reshape(
            self.env.n_agents, N_ACTIONS, self.env.n_cells
        )
        total = 0.0
        for state in self.key_states:
            q = self._joint_q(theta3, state)
            a_t = self.env.encode_action(self.target.joint_action(state))
            rival = np.delete(q, a_t).max()
            total += max(0.0, self.margin + rival - q[a_t])
        return total / len(self.key_states)

    def grad_theta(self, theta, delta, idx=None):
        theta3 = np.asarray(theta, dtype=np.float64).reshape(
            self.env.n_agents, N_ACTIONS, self.env.n_cells
        )
        g = np.zeros((self.env.n_agents, N_ACTIONS, self.env.n_cells))
        k_states = len(self.key_states)
        for state in self.key_states:
            q = self._joint_q(theta3, state)
            a_t = self.env.encode_action(self.target.joint_action(state))
            masked = q.copy()
            masked[a_t] = -np.inf
            rival = int(masked.argmax())
            if self.margin + q[rival] - q[a_t] <= 0.0:
                continue
            rival_joint = self._joint_actions[rival]
            target_joint = self.target.joint_action(state)
            for i in range(self.env.n_agents):
                g[i, rival_joint[i], state[i]] += 1.0 / k_states
                g[i, target_joint[i], state[i]] -= 1.0 / k_states
        return g.reshape(-1)

    def hvp_theta(self, theta, delta, v):
        # piecewise linear: curvature is zero wherever it is defined
        return np.zeros_like(np.asarray(v, dtype=np.float64))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def greedy_actions(theta, env: GridEnv, cells: np.ndarray) -> np.ndarray:
    """Decentralized greedy per-agent actions for joint cell rows."""
    theta3 = _as_theta(theta, env).reshape(env.n_agents, N_ACTIONS, env.n_cells)
    acts = np.empty_like(cells)
    for i in range(env.n_agents):
        acts[:, i] = theta3[i][:, cells[:, i]].argmax(axis=0)
    return acts


def evaluate_utility(theta, env: GridEnv, episodes: int = 0, seed: int = 0) -> float:
    """Win rate of decentralized greedy execution.

    Deterministic environment and policy make sampling unnecessary:
    episodes collapse to one rollout per distinct joint start state, and
    the returned value is the exact win fraction over all of them (the
    ``episodes``/``seed`` arguments are accepted for interface stability).
    A start is a win if all agents co-occupy a goal cell within horizon.
    """
    trans = env.transition_table()
    starts = np.array(env.all_joint_states(), dtype=np.int64)
    cells = starts.copy()
    won = np.array([env.is_win(tuple(s)) for s in starts])
    for _ in range(env.horizon):
        if won.all():
            break
        acts = greedy_actions(theta, env, cells)
        cells = np.where(won[:, None], cells, trans[cells, acts])
        same = (cells == cells[:, :1]).all(axis=1)
        on_goal = np.isin(cells[:, 0], np.asarray(env.goal_cell_ids))
        won |= same & on_goal
    return float(won.mean())


def utility_drop(clean_wr: float, poisoned_wr: float) -> float:
    """Relative decline (clean - poisoned) / clean of the win rate."""
    if clean_wr == 0:
        raise UndefinedBaselineError("clean win rate is zero; drop undefined")
    return (clean_wr - poisoned_wr) / clean_wr


def clean_greedy_visited_states(
    theta, env: GridEnv
) -> tuple[tuple[int, ...], ...]:
    """All non-winning joint states visited by greedy rollouts from every
    start: the default key states for the attack's upper loss."""
    trans = env.transition_table()
    starts = np.array(env.all_joint_states(), dtype=np.int64)
    cells = starts.copy()
    won = np.array([env.is_win(tuple(s)) for s in starts])
    visited: set[tuple[int, ...]] = set(
        tuple(int(c) for c in row) for row, w in zip(cells, won) if not w
    )
    for _ in range(env.horizon):
        acts = greedy_actions(theta, env, cells)
        cells = np.where(won[:, None], cells, trans[cells, acts])
        same = (cells == cells[:, :1]).all(axis=1)
        on_goal = np.isin(cells[:, 0], np.asarray(env.goal_cell_ids))
        won |= same & on_goal
        visited |= set(
            tuple(int(c) for c in row) for row, w in zip(cells, won) if not w
        )
    return tuple(sorted(visited))


# ---------------------------------------------------------------------------
# hand-built micro instances (shared by tests and verification oracles)
# ---------------------------------------------------------------------------


def _store_from_rows(env: GridEnv, rows) -> MemoryStore:
    obs, acts, rews, nobs, dones = [], [], [], [], []
    for cell, action, nxt, reward, done in rows:
        obs.append(env.one_hot((cell,)))
        acts.append(env.encode_action((action,)))
        rews.append(reward)
        nobs.append(env.one_hot((nxt,)))
        dones.append(done)
    return MemoryStore(
        kind="replay",
        data=ReplayData(
            joint_obs=np.asarray(obs),
            joint_actions=np.asarray(acts, dtype=np.int64),
            rewards=np.asarray(rews),
            next_joint_obs=np.asarray(nobs),
            done=np.asarray(dones, dtype=bool),
        ),
    )


def micro_instance() -> tuple[GridEnv, MemoryStore, float]:
    """Single-agent 3x3 instance: 20 hand-written transitions, tabular
    critic (45 parameters), gamma 0.95.

    Small enough for exhaustive attack enumeration, rich enough to contain
    a self-loop reward trap: the (cell 4, stay) transition at record 15
    bootstraps onto itself, so a +0.05 reward edit there lifts the fitted
    Q(4, stay) to a fixed point near 1.0, freezing the agent at cell 4.
    """
    env = GridEnv(
        width=3,
        height=3,
        n_agents=1,
        horizon=4,
        goal_cells=((0, 0),),
        gamma=0.95,
    )
    rows = [
        (8, 0, 5, 0.0, False),
        (5, 0, 2, 0.0, False),
        (2, 2, 1, 0.0, False),
        (1, 2, 0, 1.0, True),
        (6, 0, 3, 0.0, False),
        (3, 0, 0, 1.0, True),
        (7, 0, 4, 0.0, False),
        (4, 0, 1, 0.0, False),
        (1, 2, 0, 1.0, True),
        (4, 2, 3, 0.0, False),
        (3, 0, 0, 1.0, True),
        (2, 2, 1, 0.0, False),
        (1, 2, 0, 1.0, True),
        (5, 4, 5, 0.0, False),
        (5, 2, 4, 0.0, False),
        (4, 4, 4, 0.0, False),
        (4, 0, 1, 0.0, False),
        (1, 1, 4, 0.0, False),
        (8, 2, 7, 0.0, False),
        (7, 3, 8, 0.0, False),
    ]
    return env, _store_from_rows(env, rows), 0.95


def flip_instance() -> tuple[GridEnv, MemoryStore, float]:
    """Four transitions, horizon 2: lowering the terminal reward of record 0
    by 0.05 flips the greedy action at cell 1 from left (straight to goal)
    to down (a detour too long for the horizon), hand-checkable arithmetic:
    fitted Q(1,left) drops 1.0 -> 0.95 below Q(1,down) = 0.99^2 = 0.9801.
    """
    env = GridEnv(
        width=3,
        height=3,
        n_agents=1,
        horizon=2,
        goal_cells=((0, 0),),
        gamma=0.99,
    )
    rows = [
        (1, 2, 0, 1.0, True),
        (1, 1, 4, 0.0, False),
        (4, 2, 3, 0.0, False),
        (3, 0, 0, 1.0, True),
    ]
    return env, _store_from_rows(env, rows), 0.99
