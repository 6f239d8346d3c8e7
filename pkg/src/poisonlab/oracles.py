"""Independent verification oracles.

Everything here answers "what is the exact right answer?" by brute force or
closed-form algebra, sharing no numerical code with the solver paths it
checks (only the environment definition and plain data containers). The
quadratic oracle factors the bilevel problem densely; the enumeration
oracle retrains and evaluates every candidate perturbation on a micro
instance from scratch with its own least-squares fitted-Q solver.
"""

from __future__ import annotations

import dataclasses
import itertools

import numpy as np

from .marl import GridEnv
from .memory import Edit, MemoryStore, Perturbation


class NotSpdError(ValueError):
    """Lower-level curvature matrix is not symmetric positive definite."""


class EnumerationCapError(ValueError):
    """Brute-force instance exceeds the candidate guard."""


@dataclasses.dataclass(frozen=True, eq=False)
class QuadraticBilevel:
    """Exactly solvable bilevel instance.

    Lower: L_S(theta, delta) = 0.5 theta' A theta - (b + C delta)' theta,
    minimized at theta*(delta) = A^{-1}(b + C delta).
    Upper: 0.5 |theta - t|^2 + lam * 0.5 |delta|^2.
    """

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    t: np.ndarray
    lam: float = 0.0

    def __post_init__(self):
        for name in ("a", "b", "c", "t"):
            object.__setattr__(
                self, name, np.asarray(getattr(self, name), dtype=np.float64)
            )
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        n = self.a.shape[0]
        if self.a.shape != (n, n) or self.b.shape != (n,) or self.t.shape != (n,):
            raise ValueError("inconsistent shapes")
        if self.c.shape[0] != n:
            raise ValueError("coupling matrix rows must match theta dim")


def solve_quadratic_closed_form(qb: QuadraticBilevel):
    """Dense exact solution: (delta_star, theta_star, hypergrad_fn).

    hypergrad_fn(delta) evaluates the exact total derivative
    C' A^{-1} (theta*(delta) - t) + lam * delta at any delta.
    """
    a = qb.a
    if not np.allclose(a, a.T, atol=1e-10):
        raise NotSpdError("A is not symmetric")
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotSpdError("A is not positive definite") from exc

    def a_solve(x):
        y = np.linalg.solve(chol, x)
        return np.linalg.solve(chol.T, y)

    a_inv_c = np.column_stack([a_solve(col) for col in qb.c.T]) if qb.c.size else qb.c
    a_inv_b = a_solve(qb.b)
    m = qb.c.shape[1]
    gram = a_inv_c.T @ a_inv_c + qb.lam * np.eye(m)
    rhs = a_inv_c.T @ (qb.t - a_inv_b)
    delta_star = np.linalg.solve(gram, rhs)
    theta_star = a_inv_b + a_inv_c @ delta_star

    def hypergrad(delta: np.ndarray) -> np.ndarray:
        delta = np.asarray(delta, dtype=np.float64)
        theta = a_inv_b + a_inv_c @ delta
        return a_inv_c.T @ (theta - qb.t) + qb.lam * delta

    return delta_star, theta_star, hypergrad


# ---------------------------------------------------------------------------
# brute-force enumeration oracle for the micro MARL instance
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class GridSpec:
    """Discrete search space: every subset of <= max_edits records, each
    assigned one nonzero level; the zero level means "leave alone"."""

    levels: tuple[float, ...] = (-0.05, 0.05)
    max_edits: int = 2
    candidate_cap: int = 10_000

    def nonzero_levels(self) -> tuple[float, ...]:
        return tuple(v for v in self.levels if v != 0.0)


def _decode_buffer(env: GridEnv, buffer: MemoryStore):
    """Pull (cells, per-agent actions, rewards, next_cells, done) out of a
    replay store with this oracle's own one-hot / base-A decoding."""
    data = buffer.replay
    n = len(data)
    n_ag, n_c, n_a = env.n_agents, env.n_cells, env.n_actions
    if data.joint_obs.shape[1] != n_ag * n_c:
        raise ValueError("buffer obs width does not match env")
    cells = np.zeros((n, n_ag), dtype=np.int64)
    nxt = np.zeros((n, n_ag), dtype=np.int64)
    actions = np.zeros((n, n_ag), dtype=np.int64)
    for i in range(n_ag):
        block = data.joint_obs[:, i * n_c : (i + 1) * n_c]
        nblock = data.next_joint_obs[:, i * n_c : (i + 1) * n_c]
        cells[:, i] = np.argmax(block, axis=1)
        nxt[:, i] = np.argmax(nblock, axis=1)
        # encoded joint action is agent-0 major base n_actions
        actions[:, i] = (data.joint_actions // n_a ** (n_ag - 1 - i)) % n_a
    return cells, actions, data.rewards.copy(), nxt, data.done.copy()


def _oracle_fit_q(env, cells, actions, rewards, nxt, done, max_rounds=60):
    """Least-squares fitted Q under frozen greedy bootstrap, iterated to a
    self-consistent argmax pattern. Independent of the solver-side trainer:
    builds the design matrix explicitly and uses minimum-norm lstsq.

    Returns Q as an (n_agents, n_cells, n_actions) table.
    """
    n = cells.shape[0]
    n_ag, n_c, n_a = env.n_agents, env.n_cells, env.n_actions
    dim = n_ag * n_c * n_a

    def col(agent, cell, action):
        return (agent * n_c + cell) * n_a + action

    def argmax_pattern(q):
        # round before argmax: exact ties (and exact zeros at unvisited
        # coordinates) must not flip on least-squares noise, or the pattern
        # iteration cycles between equally-valid branches
        return np.argmax(np.round(q, 9)[np.arange(n_ag)[None, :], nxt, :], axis=2)

    def solve(pattern):
        m = np.zeros((n, dim))
        for b in range(n):
            for i in range(n_ag):
                m[b, col(i, cells[b, i], actions[b, i])] += 1.0
                if not done[b]:
                    m[b, col(i, nxt[b, i], pattern[b, i])] -= env.gamma
        theta, *_ = np.linalg.lstsq(m, rewards, rcond=None)
        return theta.reshape(n_ag, n_c, n_a)

    # iterate the greedy-bootstrap pattern to a self-consistent fixed point:
    # the returned Q must satisfy argmax(Q) == pattern it was fitted under
    q = np.zeros((n_ag, n_c, n_a))
    seen = set()
    for _ in range(max_rounds):
        pattern = argmax_pattern(q)
        q = solve(pattern)
        if np.array_equal(argmax_pattern(q), pattern):
            return q
        key = pattern.tobytes()
        if key in seen:
            break
        seen.add(key)
    # pattern cycling without a fixed point: the instance is outside the
    # oracle's guarantees
    raise ValueError("fitted-Q pattern iteration did not reach a fixed point")


def _oracle_win_rate(env: GridEnv, q: np.ndarray) -> float:
    """Greedy-rollout win fraction over every joint start state, computed
    with a plain per-state loop (no vectorized shortcuts shared with the
    victim's evaluator)."""
    q = np.round(q, 9)  # canonical tie-breaking, immune to lstsq noise
    wins = 0
    starts = list(itertools.product(range(env.n_cells), repeat=env.n_agents))
    for start in starts:
        cells = list(start)
        won = env.is_win(cells)
        t = 0
        while not won and t < env.horizon:
            nxt = []
            for i, cell in enumerate(cells):
                row = q[i, cell]
                act = int(np.argmax(row))  # first max = lowest action index
                nxt.append(env.step_cell(cell, act))
            cells = nxt
            won = env.is_win(cells)
            t += 1
        wins += won
    return wins / len(starts)


def brute_force_marl(
    env: GridEnv, buffer: MemoryStore, grid: GridSpec
) -> tuple[Perturbation, float]:
    """Exact best reward perturbation over the discrete grid.

    Enumerates every record subset of size <= max_edits and every nonzero
    level assignment in lexicographic order, fully refits the critic and
    re-evaluates greedy rollouts per candidate, and returns the first
    candidate attaining the maximum relative utility drop (strict-greater
    comparison keeps the earliest, making ties deterministic).
    """
    n = buffer.element_count
    levels = grid.nonzero_levels()
    n_candidates = sum(
        len(list(itertools.combinations(range(n), k))) * len(levels) ** k
        for k in range(grid.max_edits + 1)
    )
    if n_candidates > grid.candidate_cap:
        raise EnumerationCapError(
            f"{n_candidates} candidates exceed cap {grid.candidate_cap}"
        )

    cells, actions, rewards, nxt, done = _decode_buffer(env, buffer)
    clean_q = _oracle_fit_q(env, cells, actions, rewards, nxt, done)
    clean_wr = _oracle_win_rate(env, clean_q)
    if clean_wr == 0.0:
        raise ValueError("clean utility is zero; relative drop undefined")

    best_delta = Perturbation.empty("modify")
    best_drop = 0.0
    for k in range(grid.max_edits + 1):
        for subset in itertools.combinations(range(n), k):
            for assignment in itertools.product(levels, repeat=k):
                if k == 0:
                    drop = 0.0
                    cand = Perturbation.empty("modify")
                else:
                    r = rewards.copy()
                    for idx, lv in zip(subset, assignment):
                        r[idx] += lv
                    q = _oracle_fit_q(env, cells, actions, r, nxt, done)
                    wr = _oracle_win_rate(env, q)
                    drop = (clean_wr - wr) / clean_wr
                    cand = Perturbation(
                        mode="modify",
                        edits=tuple(
                            Edit(record_index=idx, field="reward", delta_values=[lv])
                            for idx, lv in zip(subset, assignment)
                        ),
                    )
                if drop > best_drop:
                    best_drop = drop
                    best_delta = cand
    return best_delta, best_drop


def oracle_utility_drop(
    env: GridEnv, buffer: MemoryStore, delta: Perturbation
) -> float:
    """Relative utility drop of one reward perturbation, fully recomputed
    by the oracle's own fit + rollout pipeline."""
    cells, actions, rewards, nxt, done = _decode_buffer(env, buffer)
    clean_q = _oracle_fit_q(env, cells, actions, rewards, nxt, done)
    clean_wr = _oracle_win_rate(env, clean_q)
    if clean_wr == 0.0:
        raise ValueError("clean utility is zero; relative drop undefined")
    r = rewards.copy()
    for e in delta.edits:
        if e.field != "reward":
            raise ValueError("oracle evaluates reward edits only")
        r[e.record_index] += float(e.delta_values[0])
    q = _oracle_fit_q(env, cells, actions, r, nxt, done)
    return (clean_wr - _oracle_win_rate(env, q)) / clean_wr


def grid_snap(delta: Perturbation, grid: GridSpec) -> Perturbation:
    """Nearest-level discretization of a continuous reward perturbation.

    Each edit value snaps to the closest grid level (including zero);
    zero-snapped edits are dropped; if more than max_edits survive, the
    largest-magnitude ones win (ties to lower record index).
    """
    if delta.mode != "modify":
        raise ValueError("grid snapping applies to modify-mode deltas")
    all_levels = tuple(sorted(set(grid.levels) | {0.0}))
    snapped: list[tuple[float, int, Edit]] = []
    for e in delta.edits:
        v = float(e.delta_values[0])
        lv = min(all_levels, key=lambda g: (abs(g - v), abs(g)))
        if lv != 0.0:
            snapped.append(
                (abs(lv), e.record_index,
                 Edit(record_index=e.record_index, field=e.field, delta_values=[lv]))
            )
    snapped.sort(key=lambda t: (-t[0], t[1]))
    kept = tuple(e for _, _, e in snapped[: grid.max_edits])
    if not kept:
        return Perturbation.empty("modify")
    return Perturbation(mode="modify", edits=kept)
