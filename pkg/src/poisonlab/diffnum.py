"""Flat-vector numerical substrate: loss contracts with analytic first and
second derivatives, deterministic inner-loop optimizers, and a central
finite-difference oracle.

Parameter vectors are plain 1-D float64 numpy arrays. Every loss in this
package implements :class:`DiffLoss` with closed-form derivatives; there is
no autodiff tape.
"""

from __future__ import annotations

import dataclasses
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

if TYPE_CHECKING:
    from .memory import Perturbation


class TrainingDivergedError(RuntimeError):
    """Inner training hit a non-finite loss or gradient.

    Carries the optimizer step index at which divergence was detected.
    """

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite value at inner step {step}")


class OracleFailureError(RuntimeError):
    """A verification oracle evaluated to a non-finite value."""


@dataclasses.dataclass(frozen=True)
class OptimizerConfig:
    """Inner-loop optimizer settings.

    ``polish`` asks the trainer to finish with an exact refit when the loss
    supports one (piecewise-linear-in-theta losses admit a closed-form
    least-squares fixed point); it is ignored otherwise.
    """

    method: str = "adam"
    learning_rate: float = 0.01
    steps: int = 100
    batch_size: int = 64
    seed: int = 0
    polish: bool = False

    def __post_init__(self):
        if self.method not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer method {self.method!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class DiffLoss:
    """Evaluation contract for a twice-differentiable loss L(theta, delta).

    ``theta`` is a flat float64 vector. ``delta`` is a
    :class:`~poisonlab.memory.Perturbation` (or None for losses that ignore
    the memory). Derivatives are analytic; ``grad_delta`` and ``mixed_vjp``
    are laid out over the perturbation's free coordinates in
    ``delta.free_vector()`` order.

    Subclasses may support minibatching by exposing ``n_samples`` and
    honoring the ``idx`` argument of ``grad_theta``.
    """

    #: number of addends in the loss mean; 0 disables minibatching
    n_samples: int = 0

    def value(self, theta: np.ndarray, delta: "Perturbation | None") -> float:
        raise NotImplementedError

    def grad_theta(
        self,
        theta: np.ndarray,
        delta: "Perturbation | None",
        idx: np.ndarray | None = None,
    ) -> np.ndarray:
        raise NotImplementedError

    def grad_delta(self, theta: np.ndarray, delta: "Perturbation") -> np.ndarray:
        raise NotImplementedError

    def hvp_theta(
        self, theta: np.ndarray, delta: "Perturbation | None", v: np.ndarray
    ) -> np.ndarray:
        """Hessian-vector product (d^2 L / d theta^2) v."""
        raise NotImplementedError

    def mixed_vjp(
        self, theta: np.ndarray, delta: "Perturbation", v: np.ndarray
    ) -> np.ndarray:
        """d/d delta of (grad_theta(L) . v), over delta's free coordinates."""
        raise NotImplementedError

    def exact_refit(
        self, theta: np.ndarray, delta: "Perturbation | None"
    ) -> np.ndarray | None:
        """Closed-form stationary point, or None if unsupported."""
        return None

    def quadratic_coeffs(
        self, delta: "Perturbation | None"
    ) -> tuple[np.ndarray, np.ndarray] | None:
        """(A, c) with L = 0.5 theta' A theta + c' theta + const, when the
        loss is globally quadratic in theta. None otherwise. Lets loss sums
        be minimized exactly."""
        return None

    def run_training(
        self,
        theta0: np.ndarray,
        delta: "Perturbation | None",
        cfg: OptimizerConfig,
    ) -> np.ndarray | None:
        """Optional fused training path (compiled kernel). None = no fast path."""
        return None


def batch_schedule(
    n_samples: int, batch_size: int, steps: int, seed: int
) -> list[np.ndarray]:
    """Minibatch index arrays for ``steps`` optimizer steps.

    Samples without replacement inside each epoch: every epoch is a fresh
    seeded permutation split into consecutive chunks, so coverage per epoch
    is exact and the schedule is reproducible from the seed alone.
    """
    rng = np.random.default_rng(seed)
    batches: list[np.ndarray] = []
    if n_samples <= 0:
        return [np.empty(0, dtype=np.int64) for _ in range(steps)]
    bs = min(batch_size, n_samples)
    while len(batches) < steps:
        perm = rng.permutation(n_samples)
        for start in range(0, n_samples, bs):
            batches.append(perm[start : start + bs].astype(np.int64))
            if len(batches) == steps:
                break
    return batches


def _adam_sgd_loop(
    loss: DiffLoss,
    theta0: np.ndarray,
    delta: "Perturbation | None",
    cfg: OptimizerConfig,
) -> np.ndarray:
    theta = np.array(theta0, dtype=np.float64, copy=True)
    batches = batch_schedule(loss.n_samples, cfg.batch_size, cfg.steps, cfg.seed)
    if cfg.method == "adam":
        m = np.zeros_like(theta)
        v = np.zeros_like(theta)
        b1, b2, eps = 0.9, 0.999, 1e-8
    for step, idx in enumerate(batches):
        g = loss.grad_theta(theta, delta, idx if idx.size else None)
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(step)
        if cfg.method == "sgd":
            theta -= cfg.learning_rate * g
        else:
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1 ** (step + 1))
            vhat = v / (1 - b2 ** (step + 1))
            theta -= cfg.learning_rate * mhat / (np.sqrt(vhat) + eps)
    return theta


def train_inner(
    loss: DiffLoss,
    theta0: np.ndarray,
    delta: "Perturbation | None",
    cfg: OptimizerConfig,
) -> np.ndarray:
    """Train victim parameters to (approximately) minimize ``loss`` at ``delta``.

    Deterministic given (inputs, cfg.seed). Raises
    :class:`TrainingDivergedError` if a non-finite loss or gradient shows up.
    When ``cfg.polish`` is set and the loss supports an exact refit, the
    stochastic phase is finished off with the closed-form fixed point, which
    pins stationarity down to machine precision.
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    if not np.all(np.isfinite(theta0)):
        raise ValueError("theta0 must be finite")

    theta = loss.run_training(theta0, delta, cfg)
    if theta is None:
        theta = _adam_sgd_loop(loss, theta0, delta, cfg)

    if cfg.polish:
        polished = loss.exact_refit(theta, delta)
        if polished is not None:
            theta = polished

    final = loss.value(theta, delta)
    if not np.isfinite(final):
        raise TrainingDivergedError(cfg.steps)
    return theta


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: Sequence[float] | np.ndarray, h: float
) -> np.ndarray:
    """Central-difference gradient (f(x+h e_i) - f(x-h e_i)) / 2h.

    The independent oracle used everywhere analytic derivatives are checked.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        fp = f(x + e)
        fm = f(x - e)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleFailureError(f"non-finite oracle value near coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return g
