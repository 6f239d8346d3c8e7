"""Benchmark the compiled TD training kernel against the numpy reference.

Runs the same seeded workload (gridworld replay buffer, Adam steps) through
both backends, checks they agree to float precision, and reports wall-clock
speedup. Usage::

    python3 benchmarks/bench_td_kernel.py [--buffer 4000] [--steps 400] [--reps 5]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from poisonlab._kernels import purepy
from poisonlab.diffnum import batch_schedule
from poisonlab.marl import ACTIONS, GridEnv, TDLoss, collect_dataset

try:
    from poisonlab._kernels import _core
except ImportError:
    _core = None


def build_workload(n_buffer: int, steps: int, batch_size: int, seed: int):
    env = GridEnv(gamma=0.99)
    store = collect_dataset(env, n_buffer, seed=seed)
    td = TDLoss(store, env)
    theta0 = np.zeros(env.n_agents * len(ACTIONS) * env.n_cells)
    batches = batch_schedule(n_buffer, batch_size, steps, seed)
    offsets = np.zeros(len(batches) + 1, dtype=np.int64)
    for k, b in enumerate(batches):
        offsets[k + 1] = offsets[k] + b.size
    indices = np.concatenate(batches)
    args = (
        theta0,
        np.ascontiguousarray(td.obs_idx),
        np.ascontiguousarray(td.act_idx),
        np.ascontiguousarray(td.next_idx),
        np.array(store.replay.rewards, dtype=np.float64, copy=True),
        np.ascontiguousarray(td.done_f),
        env.gamma,
        len(ACTIONS),
        env.n_cells,
        1,
        0.05,
        offsets,
        indices,
    )
    return td, args


def time_backend(fn, args, reps: int) -> tuple[float, np.ndarray]:
    best = float("inf")
    out = None
    for _ in range(reps):
        call_args = (np.array(args[0], copy=True),) + args[1:]
        t0 = time.perf_counter()
        out = fn(*call_args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--buffer", type=int, default=4000)
    ap.add_argument("--steps", type=int, default=400)
    ap.add_argument("--batch-size", type=int, default=256)
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args_ns = ap.parse_args()

    _, args = build_workload(args_ns.buffer, args_ns.steps, args_ns.batch_size, args_ns.seed)
    t_py, out_py = time_backend(purepy.td_adam_train, args, args_ns.reps)
    print(f"python backend : {t_py * 1e3:9.2f} ms "
          f"({args_ns.steps} steps, buffer {args_ns.buffer})")

    if _core is None:
        print("compiled backend unavailable; install with the extension built")
        return 1

    t_cy, out_cy = time_backend(_core.td_adam_train, args, args_ns.reps)
    diff = float(np.max(np.abs(out_py - out_cy)))
    print(f"cython backend : {t_cy * 1e3:9.2f} ms")
    print(f"speedup        : {t_py / t_cy:9.2f}x")
    print(f"max |theta diff|: {diff:.3e}")
    if diff > 1e-10:
        print("PARITY FAILURE: backends disagree")
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
