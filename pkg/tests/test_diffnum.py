"""Inner training loop, batch scheduling, and the finite-difference oracle."""

import numpy as np
import pytest

from poisonlab.diffnum import (
    DiffLoss,
    OptimizerConfig,
    TrainingDivergedError,
    batch_schedule,
    finite_diff_grad,
    train_inner,
)


class ConvexQuadratic(DiffLoss):
    """0.5 theta' A theta - b' theta, minimized at solve(A, b)."""

    def __init__(self, a, b, n_samples=0):
        self.a = np.asarray(a, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.n_samples = n_samples

    def value(self, theta, delta):
        return 0.5 * theta @ self.a @ theta - self.b @ theta

    def grad_theta(self, theta, delta, idx=None):
        return self.a @ theta - self.b

    def hvp_theta(self, theta, delta, v):
        return self.a @ v

    def exact_refit(self, theta, delta):
        return np.linalg.solve(self.a, self.b)


@pytest.fixture
def spd_instance():
    rng = np.random.default_rng(0)
    g = rng.normal(size=(4, 4))
    a = g @ g.T + 4 * np.eye(4)
    b = rng.normal(size=4)
    return a, b, np.linalg.solve(a, b)


class TestTrainInner:
    def test_sgd_reaches_minimizer(self, spd_instance):
        a, b, want = spd_instance
        cfg = OptimizerConfig(method="sgd", learning_rate=0.05, steps=2000, batch_size=4)
        theta = train_inner(ConvexQuadratic(a, b), np.zeros(4), None, cfg)
        np.testing.assert_allclose(theta, want, atol=1e-6)

    def test_adam_reaches_minimizer(self, spd_instance):
        a, b, want = spd_instance
        cfg = OptimizerConfig(method="adam", learning_rate=0.05, steps=3000, batch_size=4)
        theta = train_inner(ConvexQuadratic(a, b), np.zeros(4), None, cfg)
        np.testing.assert_allclose(theta, want, atol=1e-5)

    def test_polish_pins_exact_fixed_point(self, spd_instance):
        a, b, want = spd_instance
        cfg = OptimizerConfig(method="sgd", learning_rate=0.05, steps=3, polish=True)
        theta = train_inner(ConvexQuadratic(a, b), np.zeros(4), None, cfg)
        np.testing.assert_allclose(theta, want, atol=1e-12)

    def test_zero_steps_with_polish_is_pure_refit(self, spd_instance):
        a, b, want = spd_instance
        cfg = OptimizerConfig(method="sgd", learning_rate=0.05, steps=0, polish=True)
        theta = train_inner(ConvexQuadratic(a, b), np.zeros(4), None, cfg)
        np.testing.assert_allclose(theta, want, atol=1e-12)

    def test_deterministic_given_seed(self, spd_instance):
        a, b, _ = spd_instance
        loss = ConvexQuadratic(a, b, n_samples=16)
        cfg = OptimizerConfig(method="adam", learning_rate=0.03, steps=50,
                              batch_size=4, seed=7)
        t1 = train_inner(loss, np.zeros(4), None, cfg)
        t2 = train_inner(loss, np.zeros(4), None, cfg)
        np.testing.assert_array_equal(t1, t2)

    def test_divergence_raises_with_step_index(self, spd_instance):
        a, b, _ = spd_instance
        # lr far beyond 2/L on a stiff quadratic: iterates blow up to inf
        stiff = ConvexQuadratic(1e6 * a, b)
        cfg = OptimizerConfig(method="sgd", learning_rate=10.0, steps=500)
        with np.errstate(over="ignore"), pytest.raises(TrainingDivergedError) as exc_info:
            train_inner(stiff, np.ones(4), None, cfg)
        assert exc_info.value.step >= 0

    def test_theta0_not_mutated(self, spd_instance):
        a, b, _ = spd_instance
        theta0 = np.ones(4)
        keep = theta0.copy()
        train_inner(ConvexQuadratic(a, b), theta0,
                    None, OptimizerConfig(method="sgd", learning_rate=0.01, steps=5))
        np.testing.assert_array_equal(theta0, keep)


class TestOptimizerConfig:
    def test_rejects_negative_steps(self):
        with pytest.raises(ValueError):
            OptimizerConfig(steps=-1)

    def test_rejects_unknown_method(self):
        with pytest.raises(ValueError):
            OptimizerConfig(method="rmsprop")


class TestBatchSchedule:
    def test_each_epoch_covers_every_sample(self):
        batches = batch_schedule(n_samples=10, batch_size=5, steps=4, seed=0)
        assert len(batches) == 4
        first_epoch = np.concatenate(batches[:2])
        assert sorted(first_epoch.tolist()) == list(range(10))
        second_epoch = np.concatenate(batches[2:])
        assert sorted(second_epoch.tolist()) == list(range(10))

    def test_reproducible_from_seed(self):
        a = batch_schedule(20, 6, 7, seed=3)
        b = batch_schedule(20, 6, 7, seed=3)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_batch_size_capped_at_n(self):
        batches = batch_schedule(3, 100, 2, seed=0)
        assert all(b.size == 3 for b in batches)

    def test_zero_samples_yields_empty_batches(self):
        batches = batch_schedule(0, 4, 3, seed=0)
        assert len(batches) == 3
        assert all(b.size == 0 for b in batches)


class TestFiniteDiffGrad:
    def test_exact_on_quadratic(self):
        # central differences are exact for quadratics up to roundoff
        x = np.array([1.0, -2.0, 0.5])
        g = finite_diff_grad(lambda v: float(v @ v), x, h=1e-5)
        np.testing.assert_allclose(g, 2 * x, atol=1e-9)

    def test_zero_on_constant(self):
        g = finite_diff_grad(lambda v: 3.5, np.ones(4), h=1e-4)
        np.testing.assert_array_equal(g, np.zeros(4))

    def test_rejects_nonpositive_h(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda v: 0.0, np.ones(2), h=0.0)
