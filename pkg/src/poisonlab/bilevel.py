"""Bilevel attack optimization.

The attacker perturbs a memory store; the victim retrains on the perturbed
store; the attacker wants the retrained parameters to score badly. Formally

    minimize_delta   U(theta*(delta), delta) + lam * R(delta)
    subject to       theta*(delta) in argmin_theta  L(theta, delta)

with U the attack loss, L the victim's training loss and R the covertness
regularizer. Two solvers are provided: implicit differentiation through the
inner optimum (conjugate-gradient Hessian solves, no unrolling), and a
penalty reformulation that needs only first derivatives of L. A slow
finite-difference hypergradient (full retrain per probe) serves as the
oracle both solvers are checked against.
"""

from __future__ import annotations

import dataclasses
from typing import Callable

import numpy as np

from .diffnum import DiffLoss, OptimizerConfig, TrainingDivergedError, train_inner
from .memory import (
    CovertnessBudget,
    MemoryStore,
    Perturbation,
    align_free_vector,
    covertness_cost,
    covertness_grad,
    project,
)


class StaleThetaError(RuntimeError):
    """Hypergradient requested at parameters that do not minimize the lower
    loss (the implicit-function step is meaningless there)."""


class NumericalFailureError(RuntimeError):
    """A linear-algebra routine produced a non-finite value."""


@dataclasses.dataclass(frozen=True)
class HypergradConfig:
    """Outer-gradient solver settings.

    ``damping`` is a Tikhonov term added to the lower Hessian (stabilizes
    rank-deficient or mildly indefinite problems; signal components living
    in the data row space are unaffected by null-space damping).
    ``stale_tol`` bounds the lower gradient norm accepted as "trained".
    ``penalty_gamma0`` and ``penalty_growth`` drive the penalty solver.
    """

    method: str = "ift_cg"  # "ift_cg" | "pbgd" | "finite_diff"
    cg_tol: float = 1e-10
    cg_max_iter: int = 400
    damping: float = 1e-3
    stale_tol: float = 0.05
    penalty_gamma0: float = 10.0
    penalty_growth: float = 1.06
    fd_step: float = 1e-3

    def __post_init__(self):
        if self.method not in ("ift_cg", "pbgd", "finite_diff"):
            raise ValueError(f"unknown hypergradient method {self.method!r}")
        if self.damping < 0:
            raise ValueError("damping must be >= 0")
        if self.cg_tol <= 0 or self.cg_max_iter < 1:
            raise ValueError("bad cg settings")
        if self.penalty_gamma0 <= 0 or self.penalty_growth <= 1:
            raise ValueError("bad penalty schedule")


@dataclasses.dataclass(frozen=True)
class CgResult:
    x: np.ndarray
    n_iter: int
    residual_norm: float
    converged: bool
    flag: str  # "converged" | "maxiter" | "negative_curvature"


@dataclasses.dataclass(frozen=True, eq=False)
class BilevelProblem:
    """One attack instance: losses, memory, budget and inner trainer.

    ``lower`` trains the victim and ``upper`` scores the attack, both under
    the :class:`~poisonlab.diffnum.DiffLoss` contract. ``regularizer`` (and
    ``regularizer_grad`` over free coordinates) defaults to the covertness
    cost of ``budget``; analytic testbeds may substitute their own.
    """

    lower: DiffLoss
    upper: DiffLoss
    memory: MemoryStore
    budget: CovertnessBudget
    inner_cfg: OptimizerConfig
    theta0: np.ndarray
    lam: float = 0.0
    regularizer: Callable[[Perturbation], float] | None = None
    regularizer_grad: Callable[[Perturbation], np.ndarray] | None = None
    #: optional repair step applied before budget projection (e.g. pulling
    #: injected embeddings back inside the semantic budget instead of
    #: letting projection drop them)
    feasibility_clamp: Callable[[Perturbation], Perturbation] | None = None

    def __post_init__(self):
        object.__setattr__(self, "theta0", np.asarray(self.theta0, dtype=np.float64))
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if (self.regularizer is None) != (self.regularizer_grad is None):
            raise ValueError("regularizer and regularizer_grad come as a pair")

    def reg_cost(self, delta: Perturbation) -> float:
        if self.regularizer is not None:
            return float(self.regularizer(delta))
        return covertness_cost(self.memory, delta, self.budget)

    def reg_grad(self, delta: Perturbation) -> np.ndarray:
        if self.regularizer_grad is not None:
            return np.asarray(self.regularizer_grad(delta), dtype=np.float64)
        return covertness_grad(self.memory, delta, self.budget)

    def inner_solve(self, delta: Perturbation | None) -> np.ndarray:
        return train_inner(self.lower, self.theta0, delta, self.inner_cfg)

    def attack_objective(self, theta: np.ndarray, delta: Perturbation) -> float:
        return float(self.upper.value(theta, delta) + self.lam * self.reg_cost(delta))

    def true_objective(self, delta: Perturbation) -> tuple[float, np.ndarray]:
        """Retrain, then score: the quantity every attack ultimately reports."""
        theta = self.inner_solve(delta)
        return self.attack_objective(theta, delta), theta


@dataclasses.dataclass(frozen=True, eq=False)
class AttackResult:
    """Outcome of an attack run.

    ``trajectory`` holds one row per accepted outer step:
    (outer_step, upper_loss, reg_cost, hypergrad_norm). The line-search
    contract makes upper_loss + lam * reg_cost non-increasing down the rows.
    """

    delta_star: Perturbation
    theta_star: np.ndarray
    trajectory: tuple[tuple[int, float, float, float], ...]
    converged: bool
    n_retrains: int
    diagnostics: dict

    @property
    def final_upper(self) -> float:
        return self.trajectory[-1][1]

    @property
    def final_reg(self) -> float:
        return self.trajectory[-1][2]


def cg_solve(
    matvec: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 400,
    damping: float = 0.0,
) -> CgResult:
    """Conjugate gradients on (H + damping I) x = b with H given as a matvec.

    Stops early with flag "negative_curvature" if a search direction shows
    non-positive curvature (the damped operator is not PSD there); the
    iterate found so far is returned and remains usable as a descent
    surrogate. NaN from the operator raises NumericalFailureError.
    """
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return CgResult(x, 0, 0.0, True, "converged")
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    for k in range(1, max_iter + 1):
        ap = matvec(p) + damping * p
        if not np.all(np.isfinite(ap)):
            raise NumericalFailureError("non-finite Hessian-vector product")
        p_ap = float(p @ ap)
        if p_ap <= 0:
            return CgResult(x, k - 1, float(np.sqrt(rs)), False, "negative_curvature")
        alpha = rs / p_ap
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = float(r @ r)
        if np.sqrt(rs_new) <= tol * bnorm:
            return CgResult(x, k, float(np.sqrt(rs_new)), True, "converged")
        p = r + (rs_new / rs) * p
        rs = rs_new
    return CgResult(x, max_iter, float(np.sqrt(rs)), False, "maxiter")


def _upper_direct_grad(
    upper: DiffLoss, theta: np.ndarray, delta: Perturbation
) -> np.ndarray | None:
    """d upper / d delta when the attack loss reads the memory directly."""
    try:
        return upper.grad_delta(theta, delta)
    except NotImplementedError:
        return None


def implicit_hypergradient(
    problem: BilevelProblem,
    theta_star: np.ndarray,
    delta: Perturbation,
    cfg: HypergradConfig,
) -> tuple[np.ndarray, CgResult]:
    """Total derivative of the attacker objective over delta's free coords.

    Implicit function theorem at the trained parameters: solve
    (H + damping I) x = dU/dtheta with H the lower-loss Hessian, then
    combine -(d^2 L / d delta d theta)^T x with the direct dU/d delta term
    (present when the attack loss reads the memory, e.g. soft retrieval)
    and lam * dR/d delta.
    """
    gnorm = float(np.linalg.norm(problem.lower.grad_theta(theta_star, delta)))
    if gnorm > cfg.stale_tol:
        raise StaleThetaError(
            f"lower gradient norm {gnorm:.3e} exceeds stale_tol {cfg.stale_tol:.3e};"
            " re-run train_inner before differentiating"
        )
    g_up = problem.upper.grad_theta(theta_star, delta)
    cg = cg_solve(
        lambda v: problem.lower.hvp_theta(theta_star, delta, v),
        g_up,
        tol=cfg.cg_tol,
        max_iter=cfg.cg_max_iter,
        damping=cfg.damping,
    )
    hg = -problem.lower.mixed_vjp(theta_star, delta, cg.x)
    direct = _upper_direct_grad(problem.upper, theta_star, delta)
    if direct is not None:
        hg = hg + direct
    if problem.lam != 0.0:
        hg = hg + problem.lam * problem.reg_grad(delta)
    return hg, cg


def finite_diff_hypergradient(
    problem: BilevelProblem, delta: Perturbation, h: float = 1e-3
) -> np.ndarray:
    """Central-difference hypergradient with a full inner retrain per probe.

    The independent oracle: slow (2 retrains per free coordinate) but makes
    no implicit-function assumptions beyond retrain determinism.
    """
    base = delta.free_vector()
    g = np.zeros_like(base)
    for i in range(base.size):
        e = np.zeros_like(base)
        e[i] = h
        up, _ = problem.true_objective(delta.with_free_vector(base + e))
        dn, _ = problem.true_objective(delta.with_free_vector(base - e))
        g[i] = (up - dn) / (2.0 * h)
    return g


# ---------------------------------------------------------------------------
# attack drivers
# ---------------------------------------------------------------------------


def _feasible(problem: BilevelProblem, delta: Perturbation) -> Perturbation:
    if problem.feasibility_clamp is not None:
        delta = problem.feasibility_clamp(delta)
    return project(delta, problem.budget, memory=problem.memory)


def _gradient_point(template: Perturbation, feasible: Perturbation) -> Perturbation:
    """The feasible point re-expressed over the template's full coordinates.

    Materializes to the same store as ``feasible`` (projection-zeroed edits
    come back as explicit zero edits), so derivatives evaluated here are
    valid at the feasible point while covering every candidate coordinate.
    Falls back to the feasible point itself if an injection was dropped
    outright (its coordinates then see no gradient this step).
    """
    if template.mode == "inject" and feasible.n_injections != template.n_injections:
        return feasible
    return template.with_free_vector(align_free_vector(template, feasible))


def _scatter_gradient(
    template: Perturbation, feasible: Perturbation, g: np.ndarray
) -> np.ndarray:
    """Lift a gradient over ``feasible``'s coordinates to template size
    (prefix alignment for surviving injections, zeros elsewhere)."""
    full = np.zeros(template.free_vector().size)
    full[: g.size] = g
    return full


def hypergrad_attack(
    problem: BilevelProblem,
    delta0: Perturbation,
    cfg: HypergradConfig | None = None,
    outer_steps: int = 40,
    outer_lr: float = 0.5,
    max_backtracks: int = 12,
    n_restarts: int = 1,
    restart_scale: float = 0.5,
    seed: int = 0,
) -> AttackResult:
    """Projected hypergradient descent with a backtracking line search.

    The optimizer state is the full free-coordinate vector of ``delta0``
    (typically a dense zero template); every evaluation first projects onto
    the covertness budget, so reported objectives always belong to feasible
    perturbations, while gradients flow to all candidate coordinates. Steps
    are accepted only if the true retrained objective improves (halving the
    step otherwise), making the accepted trajectory monotone non-increasing
    with every value backed by a real retrain. Restarts jitter the start
    and keep the best run.
    """
    cfg = cfg or HypergradConfig()
    rng = np.random.default_rng(seed)

    best: tuple[float, Perturbation, np.ndarray, list, bool] | None = None
    total_retrains = 0
    all_flags: list[str] = []
    best_restart = 0
    for restart in range(n_restarts):
        x = delta0.free_vector()
        if restart > 0 and x.size:
            jitter = restart_scale * problem.budget.linf_max
            x = x + rng.normal(0.0, jitter, size=x.shape)

        delta = _feasible(problem, delta0.with_free_vector(x))
        obj, theta = problem.true_objective(delta)
        total_retrains += 1
        traj = [(0, obj - problem.lam * problem.reg_cost(delta), problem.reg_cost(delta), 0.0)]
        converged = False
        for it in range(1, outer_steps + 1):
            point = _gradient_point(delta0, delta)
            try:
                if cfg.method == "finite_diff":
                    hg = finite_diff_hypergradient(problem, point, cfg.fd_step)
                    total_retrains += 2 * point.free_vector().size
                    all_flags.append("finite_diff")
                else:
                    hg, cg = implicit_hypergradient(problem, theta, point, cfg)
                    all_flags.append(cg.flag)
            except StaleThetaError:
                # inner trainer failed to pin down a stationary point at this
                # perturbation (argmax-pattern cycling); keep the best
                # feasible point found so far
                all_flags.append("stale_theta")
                break
            if hg.size != x.size:
                hg = _scatter_gradient(delta0, delta, hg)
            if not np.any(hg) or x.size == 0:
                converged = True
                break
            accepted = False
            step = outer_lr
            for _ in range(max_backtracks):
                x_new = x - step * hg
                cand = _feasible(problem, delta0.with_free_vector(x_new))
                cand_obj, cand_theta = problem.true_objective(cand)
                total_retrains += 1
                if cand_obj < obj - 1e-12:
                    x, delta, theta, obj = x_new, cand, cand_theta, cand_obj
                    reg = problem.reg_cost(delta)
                    traj.append((it, obj - problem.lam * reg, reg, float(np.linalg.norm(hg))))
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                converged = True
                break
        if best is None or obj < best[0]:
            best = (obj, delta, theta, traj, converged)
            best_restart = restart

    assert best is not None
    obj, delta, theta, traj, converged = best
    return AttackResult(
        delta_star=delta,
        theta_star=theta,
        trajectory=tuple(traj),
        converged=converged,
        n_retrains=total_retrains,
        diagnostics={
            "method": cfg.method,
            "objective": obj,
            "cg_flags": all_flags,
            "best_restart": best_restart,
        },
    )


class _PenalizedLoss(DiffLoss):
    """U(theta) + gamma * L(theta, delta), minimized over theta."""

    def __init__(self, upper: DiffLoss, lower: DiffLoss, gamma: float):
        self.upper = upper
        self.lower = lower
        self.gamma = gamma
        self.n_samples = 0

    def value(self, theta, delta):
        return self.upper.value(theta, delta) + self.gamma * self.lower.value(theta, delta)

    def grad_theta(self, theta, delta, idx=None):
        return self.upper.grad_theta(theta, delta) + self.gamma * self.lower.grad_theta(
            theta, delta
        )

    def exact_refit(self, theta, delta):
        qu = self.upper.quadratic_coeffs(delta)
        ql = self.lower.quadratic_coeffs(delta)
        if qu is None or ql is None:
            return None
        a = qu[0] + self.gamma * ql[0]
        c = qu[1] + self.gamma * ql[1]
        return np.linalg.solve(a, -c)

    def run_training(self, theta0, delta, cfg):
        # fixed-lr SGD goes unstable once gamma scales the curvature past
        # 2/lr; use the closed form whenever both levels expose one
        return self.exact_refit(theta0, delta)


def pbgd_attack(
    problem: BilevelProblem,
    delta0: Perturbation,
    cfg: HypergradConfig | None = None,
    outer_steps: int = 200,
    outer_lr: float = 0.2,
) -> AttackResult:
    """Penalty-based bilevel descent.

    Replaces the inner argmin constraint with the value-function penalty
    gamma * (L(theta, delta) - L(theta~(delta), delta)) where theta~ is a
    lookahead inner minimizer; theta itself descends the penalized
    objective U + gamma L (descending L alone would collapse the penalty
    difference to zero and silence the delta gradient). gamma grows
    geometrically per outer step, and the best delta under the true
    retrained objective is returned. Needs only first derivatives of the
    lower loss, which makes it the natural cross-check for the implicit
    solver.
    """
    cfg = cfg or HypergradConfig()
    retrains = 0
    x = delta0.free_vector()
    delta = _feasible(problem, delta0.with_free_vector(x))
    obj, theta = problem.true_objective(delta)
    retrains += 1
    reg = problem.reg_cost(delta)
    traj = [(0, obj - problem.lam * reg, reg, 0.0)]
    best = (obj, delta, theta)

    gamma = cfg.penalty_gamma0
    for it in range(1, outer_steps + 1):
        point = _gradient_point(delta0, delta)
        theta_tilde = problem.inner_solve(point)
        pen = _PenalizedLoss(problem.upper, problem.lower, gamma)
        try:
            theta_pen = train_inner(pen, theta_tilde, point, problem.inner_cfg)
        except TrainingDivergedError:
            # penalty coefficient outgrew the optimizer's stable range;
            # the best feasible point so far stands
            break
        retrains += 2
        if not np.all(np.isfinite(theta_pen)):
            raise NumericalFailureError("penalty term diverged")
        g = problem.lam * problem.reg_grad(point) + gamma * (
            problem.lower.grad_delta(theta_pen, point)
            - problem.lower.grad_delta(theta_tilde, point)
        )
        direct = _upper_direct_grad(problem.upper, theta_pen, point)
        if direct is not None:
            g = g + direct
        if g.size != x.size:
            g = _scatter_gradient(delta0, delta, g)
        gnorm = float(np.linalg.norm(g))
        if gnorm == 0.0:
            break
        x = x - outer_lr * g
        delta = _feasible(problem, delta0.with_free_vector(x))
        obj, theta = problem.true_objective(delta)
        retrains += 1
        if obj < best[0]:
            best = (obj, delta, theta)
            reg = problem.reg_cost(delta)
            traj.append((it, obj - problem.lam * reg, reg, gnorm))
        gamma *= cfg.penalty_growth

    obj, delta, theta = best
    return AttackResult(
        delta_star=delta,
        theta_star=theta,
        trajectory=tuple(traj),
        converged=True,
        n_retrains=retrains,
        diagnostics={"method": "pbgd", "objective": obj, "final_gamma": gamma},
    )
