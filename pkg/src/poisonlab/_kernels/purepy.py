"""Pure numpy implementation of the temporal-difference training kernel.

This is the reference semantics for the compiled extension: same batch
schedule, same accumulation order per parameter slot, same Adam arithmetic.
The compiled module must agree with this one to float precision.

The kernel covers the indexed fast path only: one-hot observations encoded
as integer feature indices, additive critics, squared Bellman residual with
a decentralized max bootstrap. Dense-observation cases go through the
generic optimizer loop instead.
"""

from __future__ import annotations

import numpy as np


def td_adam_train(
    theta0: np.ndarray,
    obs_idx: np.ndarray,
    act_idx: np.ndarray,
    next_idx: np.ndarray,
    rewards: np.ndarray,
    done: np.ndarray,
    gamma: float,
    n_actions: int,
    n_cells: int,
    method: int,
    learning_rate: float,
    batch_offsets: np.ndarray,
    batch_indices: np.ndarray,
) -> np.ndarray:
    """Run the full inner training loop and return final parameters.

    theta layout: theta[(agent * n_actions + action) * n_cells + cell].
    ``method`` 0 = sgd, 1 = adam. Batches are encoded as a flat index array
    with offsets: step t uses batch_indices[batch_offsets[t]:batch_offsets[t+1]].
    """
    theta = np.array(theta0, dtype=np.float64, copy=True)
    n_agents = obs_idx.shape[1]
    p = theta.size
    steps = batch_offsets.size - 1

    # precomputed flat feature index of (agent, taken action, current cell)
    agent_base = np.arange(n_agents) * n_actions * n_cells
    cur_flat = agent_base[None, :] + act_idx * n_cells + obs_idx  # (N, n_agents)

    if method == 1:
        m = np.zeros(p)
        v = np.zeros(p)
        b1, b2, eps = 0.9, 0.999, 1e-8

    for step in range(steps):
        idx = batch_indices[batch_offsets[step] : batch_offsets[step + 1]]
        bsz = idx.size

        theta3 = theta.reshape(n_agents, n_actions, n_cells)
        q = theta[cur_flat[idx]].sum(axis=1)  # (B,)

        boot = np.zeros(bsz)
        best_flat = np.empty((bsz, n_agents), dtype=np.int64)
        for i in range(n_agents):
            cand = theta3[i][:, next_idx[idx, i]]  # (A, B)
            best_a = np.argmax(cand, axis=0)
            boot += cand[best_a, np.arange(bsz)]
            best_flat[:, i] = agent_base[i] + best_a * n_cells + next_idx[idx, i]

        not_done = 1.0 - done[idx]
        y = rewards[idx] + gamma * not_done * boot
        e = q - y
        coef = 2.0 / bsz

        g = np.zeros(p)
        for i in range(n_agents):
            np.add.at(g, cur_flat[idx, i], coef * e)
        for i in range(n_agents):
            np.add.at(g, best_flat[:, i], -coef * e * gamma * not_done)

        if method == 0:
            theta -= learning_rate * g
        else:
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            mhat = m / (1.0 - b1 ** (step + 1))
            vhat = v / (1.0 - b2 ** (step + 1))
            theta -= learning_rate * mhat / (np.sqrt(vhat) + eps)

    return theta
