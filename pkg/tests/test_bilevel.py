"""CG solver, implicit hypergradients, and the attack drivers."""

import dataclasses

import numpy as np
import pytest

from poisonlab.bilevel import (
    HypergradConfig,
    StaleThetaError,
    cg_solve,
    finite_diff_hypergradient,
    hypergrad_attack,
    implicit_hypergradient,
    pbgd_attack,
)
from poisonlab.diffnum import OptimizerConfig
from poisonlab.memory import CovertnessBudget, perturbation_norms, poison_rate
from poisonlab.oracles import QuadraticBilevel, solve_quadratic_closed_form
from poisonlab.testbed import make_quadratic_problem

LOOSE_BUDGET = CovertnessBudget(rho_max=1.0, linf_max=10.0, l2_max=100.0)
EXACT_INNER = OptimizerConfig(method="sgd", learning_rate=0.1, steps=0,
                              batch_size=4, seed=0, polish=True)


def identity_instance(n=4, lam=0.0, t=None):
    t = np.arange(1.0, n + 1.0) if t is None else np.asarray(t, dtype=np.float64)
    return make_quadratic_problem(
        np.eye(n), np.zeros(n), np.eye(n), t, lam=lam,
        budget=LOOSE_BUDGET, inner_cfg=EXACT_INNER,
    )


def random_spd_instance(n=5, m=3, lam=0.0, seed=1):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(n, n))
    a = g @ g.T + n * np.eye(n)
    b = rng.normal(size=n)
    c = rng.normal(size=(n, m))
    t = rng.normal(size=n)
    problem, template, cfg = make_quadratic_problem(
        a, b, c, t, lam=lam, budget=LOOSE_BUDGET, inner_cfg=EXACT_INNER,
    )
    return problem, template, cfg, QuadraticBilevel(a, b, c, t, lam=lam)


class TestCgSolve:
    def test_identity_converges_in_one_iteration(self):
        b = np.array([1.0, -2.0, 3.0])
        res = cg_solve(lambda v: v, b, tol=1e-12, max_iter=10)
        np.testing.assert_allclose(res.x, b, atol=1e-12)
        assert res.n_iter == 1
        assert res.converged

    def test_diagonal_system(self):
        d = np.array([2.0, 4.0])
        res = cg_solve(lambda v: d * v, np.array([2.0, 4.0]), tol=1e-12, max_iter=10)
        np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-12)

    def test_matches_dense_solve_on_random_spd(self):
        rng = np.random.default_rng(2)
        g = rng.normal(size=(8, 8))
        h = g @ g.T + 8 * np.eye(8)
        b = rng.normal(size=8)
        res = cg_solve(lambda v: h @ v, b, tol=1e-12, max_iter=100)
        np.testing.assert_allclose(res.x, np.linalg.solve(h, b), atol=1e-9)

    def test_damping_shifts_the_operator(self):
        rng = np.random.default_rng(3)
        g = rng.normal(size=(5, 5))
        h = g @ g.T + np.eye(5)
        b = rng.normal(size=5)
        lam = 0.25
        res = cg_solve(lambda v: h @ v, b, tol=1e-12, max_iter=100, damping=lam)
        np.testing.assert_allclose(res.x, np.linalg.solve(h + lam * np.eye(5), b),
                                   atol=1e-9)


class TestImplicitHypergradient:
    def test_identity_instance_gradient_at_zero(self):
        # theta*(0) = 0, so dU/d(delta) = C'A^{-1}(theta - t) = -t
        problem, template, cfg = identity_instance(n=3, t=[1.0, -0.5, 2.0])
        theta = problem.inner_solve(template)
        hg, cg = implicit_hypergradient(problem, theta, template, cfg)
        np.testing.assert_allclose(hg, [-1.0, 0.5, -2.0], atol=1e-8)
        assert cg.converged

    def test_matches_closed_form_at_random_points(self):
        problem, template, cfg, qb = random_spd_instance(lam=0.3)
        _, _, hypergrad_fn = solve_quadratic_closed_form(qb)
        rng = np.random.default_rng(4)
        for _ in range(3):
            x = rng.normal(size=template.free_vector().size)
            point = template.with_free_vector(x)
            theta = problem.inner_solve(point)
            hg, _ = implicit_hypergradient(problem, theta, point, cfg)
            np.testing.assert_allclose(hg, hypergrad_fn(x), atol=1e-8)

    def test_matches_finite_differences(self):
        problem, template, cfg, _ = random_spd_instance(lam=0.1, seed=6)
        point = template.with_free_vector(np.array([0.2, -0.1, 0.4]))
        theta = problem.inner_solve(point)
        hg, _ = implicit_hypergradient(problem, theta, point, cfg)
        fd = finite_diff_hypergradient(problem, point, h=1e-4)
        np.testing.assert_allclose(hg, fd, atol=1e-6)

    def test_stale_theta_rejected(self):
        problem, template, cfg = identity_instance(n=3)
        with pytest.raises(StaleThetaError):
            implicit_hypergradient(problem, np.full(3, 50.0), template, cfg)


class TestHypergradAttack:
    def test_identity_converges_to_ridge_solution(self):
        t = np.array([1.0, -0.5, 0.25, 2.0])
        for lam in (0.0, 0.5):
            problem, template, cfg = identity_instance(n=4, lam=lam, t=t)
            res = hypergrad_attack(problem, template, cfg,
                                   outer_steps=60, outer_lr=1.0 / (1.0 + lam))
            np.testing.assert_allclose(res.delta_star.free_vector(), t / (1.0 + lam),
                                       atol=1e-3)

    def test_trajectory_objective_monotone_nonincreasing(self):
        problem, template, cfg, _ = random_spd_instance(seed=8)
        res = hypergrad_attack(problem, template, cfg, outer_steps=25, outer_lr=0.5)
        uppers = [u + problem.lam * r for _, u, r, _ in res.trajectory]
        assert all(b <= a + 1e-12 for a, b in zip(uppers, uppers[1:]))
        assert res.n_retrains >= len(res.trajectory)

    def test_huge_lambda_keeps_delta_near_zero(self):
        problem, template, cfg = identity_instance(n=3, lam=1e6)
        res = hypergrad_attack(problem, template, cfg, outer_steps=10, outer_lr=1e-6)
        assert np.linalg.norm(res.delta_star.free_vector()) <= 1e-3

    def test_result_respects_budget(self):
        problem, template, cfg, _ = random_spd_instance(seed=9)
        tight = CovertnessBudget(rho_max=1.0, linf_max=0.05, l2_max=0.08)
        problem = dataclasses.replace(problem, budget=tight)
        res = hypergrad_attack(problem, template, cfg, outer_steps=15, outer_lr=0.5)
        linf, l2 = perturbation_norms(res.delta_star)
        assert linf <= tight.linf_max + 1e-12
        assert l2 <= tight.l2_max + 1e-12
        assert poison_rate(problem.memory, res.delta_star) <= tight.rho_max + 1e-12

    def test_finite_diff_method_dispatch(self):
        t = np.array([1.0, -2.0, 0.5])
        problem, template, cfg = identity_instance(n=3, t=t)
        fd_cfg = dataclasses.replace(cfg, method="finite_diff", fd_step=1e-4)
        res = hypergrad_attack(problem, template, fd_cfg, outer_steps=40, outer_lr=1.0)
        assert res.diagnostics["method"] == "finite_diff"
        assert "finite_diff" in res.diagnostics["cg_flags"]
        np.testing.assert_allclose(res.delta_star.free_vector(), t, atol=1e-3)

    def test_restarts_are_deterministic_given_seed(self):
        problem, template, cfg, _ = random_spd_instance(seed=10)
        r1 = hypergrad_attack(problem, template, cfg, outer_steps=10, outer_lr=0.5,
                              n_restarts=3, seed=42)
        r2 = hypergrad_attack(problem, template, cfg, outer_steps=10, outer_lr=0.5,
                              n_restarts=3, seed=42)
        np.testing.assert_array_equal(r1.delta_star.free_vector(),
                                      r2.delta_star.free_vector())
        assert r1.trajectory == r2.trajectory


class TestPbgdAttack:
    def test_agrees_with_implicit_path(self):
        t = np.array([1.0, -0.5, 0.25, 2.0])
        for lam in (0.0, 1.0):
            problem, template, cfg = identity_instance(n=4, lam=lam, t=t)
            ift = hypergrad_attack(problem, template, cfg,
                                   outer_steps=60, outer_lr=1.0 / (1.0 + lam))
            pbgd = pbgd_attack(problem, template, cfg, outer_steps=200, outer_lr=0.2)
            np.testing.assert_allclose(
                pbgd.delta_star.free_vector(), ift.delta_star.free_vector(), atol=1e-3
            )

    def test_reaches_ridge_solution(self):
        t = np.array([2.0, -1.0, 0.5])
        problem, template, cfg = identity_instance(n=3, lam=0.5, t=t)
        res = pbgd_attack(problem, template, cfg, outer_steps=200, outer_lr=0.2)
        np.testing.assert_allclose(res.delta_star.free_vector(), t / 1.5, atol=1e-3)


class TestHypergradConfig:
    def test_rejects_unknown_method(self):
        with pytest.raises(ValueError):
            HypergradConfig(method="exact")

    def test_rejects_negative_damping(self):
        with pytest.raises(ValueError):
            HypergradConfig(damping=-1.0)

    def test_rejects_bad_cg_settings(self):
        with pytest.raises(ValueError):
            HypergradConfig(cg_tol=0.0)
        with pytest.raises(ValueError):
            HypergradConfig(cg_max_iter=0)
