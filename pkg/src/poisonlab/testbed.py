"""Analytic quadratic victim for end-to-end solver validation.

Lower level: L_S(theta, delta) = 0.5 theta' A theta - (b + C delta)' theta,
whose unique minimizer is theta*(delta) = A^{-1}(b + C delta). Upper level:
L_A(theta) = 0.5 |theta - t|^2 with regularizer 0.5 |delta|^2. Everything
about this instance has a closed form, which the independent oracle module
computes; this module only provides the same instance through the generic
loss interfaces so the full attack pipeline can be run against it.
"""

from __future__ import annotations

import numpy as np

from .bilevel import BilevelProblem, HypergradConfig
from .diffnum import DiffLoss, OptimizerConfig
from .memory import (
    CovertnessBudget,
    MemoryStore,
    Perturbation,
    ReplayData,
    full_edit_template,
)


class QuadraticLowerLoss(DiffLoss):
    """0.5 theta' A theta - (b + C delta)' theta as a memory-coupled loss.

    The perturbation's free vector is read as delta directly: the backing
    replay store exists so projection and serialization plumbing see a
    normal modify-mode perturbation.
    """

    def __init__(self, a: np.ndarray, b: np.ndarray, c: np.ndarray):
        self.a = np.asarray(a, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.c = np.asarray(c, dtype=np.float64)
        self.n_samples = self.c.shape[1]

    def _delta(self, delta: Perturbation | None) -> np.ndarray:
        # scatter by record so sparse perturbations (zero edits projected
        # away) still read as the dense delta vector
        out = np.zeros(self.c.shape[1])
        if delta is not None:
            for e in delta.edits:
                out[e.record_index] += e.delta_values[0]
        return out

    def value(self, theta, delta):
        theta = np.asarray(theta, float)
        rhs = self.b + self.c @ self._delta(delta)
        return float(0.5 * theta @ self.a @ theta - rhs @ theta)

    def grad_theta(self, theta, delta, idx=None):
        theta = np.asarray(theta, float)
        return self.a @ theta - (self.b + self.c @ self._delta(delta))

    def hvp_theta(self, theta, delta, v):
        return self.a @ np.asarray(v, float)

    def mixed_vjp(self, theta, delta, v):
        # d/d delta of grad_theta . v = -C' v
        return -(self.c.T @ np.asarray(v, float))

    def grad_delta(self, theta, delta):
        return -(self.c.T @ np.asarray(theta, float))

    def exact_refit(self, theta, delta):
        return np.linalg.solve(self.a, self.b + self.c @ self._delta(delta))

    def quadratic_coeffs(self, delta):
        return self.a, -(self.b + self.c @ self._delta(delta))


class QuadraticUpperLoss(DiffLoss):
    """0.5 |theta - t|^2; does not read the memory."""

    n_samples = 0

    def __init__(self, t: np.ndarray):
        self.t = np.asarray(t, dtype=np.float64)

    def value(self, theta, delta):
        d = np.asarray(theta, float) - self.t
        return 0.5 * float(d @ d)

    def grad_theta(self, theta, delta, idx=None):
        return np.asarray(theta, float) - self.t

    def hvp_theta(self, theta, delta, v):
        return np.asarray(v, dtype=np.float64).copy()

    # grad_delta/mixed_vjp intentionally unimplemented: no memory path

    def quadratic_coeffs(self, delta):
        return np.eye(self.t.size), -self.t


def quadratic_store(n_delta: int) -> MemoryStore:
    """Minimal replay store whose reward coordinates carry delta."""
    obs = np.zeros((n_delta, 1))
    acts = np.zeros((n_delta, 1), dtype=np.int64)
    rewards = np.zeros(n_delta)
    done = np.ones(n_delta, dtype=bool)
    return MemoryStore(
        kind="replay",
        data=ReplayData(
            joint_obs=obs,
            joint_actions=acts,
            rewards=rewards,
            next_joint_obs=obs,
            done=done,
        ),
    )


def make_quadratic_problem(
    a: np.ndarray,
    b: np.ndarray,
    c: np.ndarray,
    t: np.ndarray,
    lam: float,
    budget: CovertnessBudget | None = None,
    inner_cfg: OptimizerConfig | None = None,
) -> tuple[BilevelProblem, Perturbation, HypergradConfig]:
    """Assemble the quadratic instance as a standard bilevel problem.

    Returns (problem, zero perturbation template, solver config tuned for
    the exactly-solvable instance). The regularizer closures implement
    0.5 |delta|^2 so the analytic delta* = argmin matches the oracle.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    n_delta = c.shape[1]
    store = quadratic_store(n_delta)
    if budget is None:
        budget = CovertnessBudget(
            rho_max=1.0, linf_max=1e9, l2_max=1e9, dsem_max=1.0, p=2.0
        )
    if inner_cfg is None:
        inner_cfg = OptimizerConfig(
            method="sgd", learning_rate=0.1, steps=400, batch_size=n_delta,
            seed=0, polish=True,
        )
    problem = BilevelProblem(
        lower=QuadraticLowerLoss(a, b, c),
        upper=QuadraticUpperLoss(t),
        memory=store,
        budget=budget,
        inner_cfg=inner_cfg,
        theta0=np.zeros(a.shape[0]),
        lam=lam,
        regularizer=lambda d: 0.5 * float(d.free_vector() @ d.free_vector()),
        regularizer_grad=lambda d: d.free_vector(),
    )
    template = full_edit_template(store, "reward")
    cfg = HypergradConfig(damping=0.0, cg_tol=1e-12, stale_tol=1e-6)
    return problem, template, cfg
