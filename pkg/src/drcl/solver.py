"""Douglas-Rachford splitting for continual learning, plus coupled-gradient baselines.

For each task the learner minimizes

    L_t(x) + lam * sum_i F_i |x_i - x_old_i|

by alternating a gradient-approximated proximal step on the task loss
(plasticity), a reflection, a closed-form weighted soft-threshold around the
previous task's parameters (stability), and a consensus correction of the
anchor ``y``. The SGD and EWC baselines instead fold the task gradient and
the penalty gradient into a single update vector.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError, DivergenceError, NumericalError
from .fisher import ImportanceWeights
from .model import Batch, NetworkSpec, loss_and_grad

REGULARIZERS = ("l1_weighted", "l2_weighted", "none")


@dataclass(frozen=True)
class SolverConfig:
    """Hyperparameters of one task's optimization.

    ``gamma`` defaults to ``eta``. ``residual_tol`` defaults to
    ``1e-4 * sqrt(d)``. ``inner_batches_per_iter=None`` splits each epoch
    evenly over the ``max_iter`` splitting iterations.
    """

    eta: float = 5e-3
    gamma: float | None = None
    lam: float = 10.0
    max_iter: int = 5
    residual_tol: float | None = None
    regularizer: str = "l1_weighted"
    inner_batches_per_iter: int | None = None
    batch_size: int = 32
    epochs: int = 1
    warm_start: bool = True
    exact_quadratic_prox: bool = False
    divergence_factor: float = 1e6

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigError(f"eta must be > 0, got {self.eta}")
        if self.gamma is not None and not self.gamma >= 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if not self.lam >= 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.max_iter < 1:
            raise ConfigError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.residual_tol is not None and self.residual_tol < 0:
            raise ConfigError(f"residual_tol must be >= 0, got {self.residual_tol}")
        if self.regularizer not in REGULARIZERS:
            raise ConfigError(f"regularizer must be one of {REGULARIZERS}, got {self.regularizer!r}")
        if self.inner_batches_per_iter is not None and self.inner_batches_per_iter < 1:
            raise ConfigError(f"inner_batches_per_iter must be >= 1, got {self.inner_batches_per_iter}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")

    @property
    def step(self) -> float:
        return self.eta if self.gamma is None else self.gamma

    def tol(self, d: int) -> float:
        return 1e-4 * math.sqrt(d) if self.residual_tol is None else self.residual_tol

    @property
    def stability_active(self) -> bool:
        return self.regularizer != "none" and self.lam > 0


@dataclass
class SolverState:
    """One completed splitting iteration.

    ``y`` is the anchor the iteration started from (y_k); ``x`` and ``z`` are
    the plasticity proposal and stability output it produced; ``y_next`` is
    the corrected anchor.
    """

    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    x_old: np.ndarray
    tau: np.ndarray
    y_next: np.ndarray | None = None
    residuals: list = field(default_factory=list)
    iter: int = 0


@dataclass(frozen=True)
class IterationRecord:
    epoch: int
    iter: int
    residual: float
    loss: float
    sparsity_fraction: float


@dataclass
class TaskTrace:
    records: list = field(default_factory=list)
    states: list = field(default_factory=list)
    y_final: np.ndarray | None = None
    stopped_early: bool = False

    @property
    def residuals(self):
        return [r.residual for r in self.records]


def _finite(v, what):
    if not np.all(np.isfinite(v)):
        raise NumericalError(f"non-finite values in {what}")


def _same_length(*vs):
    n = np.asarray(vs[0]).shape
    for v in vs[1:]:
        if np.asarray(v).shape != n:
            raise DataError(f"length mismatch: {n} vs {np.asarray(v).shape}")


def plasticity_step(y: np.ndarray, grad: np.ndarray, cfg: SolverConfig) -> np.ndarray:
    """Gradient approximation of ``prox_{gamma L}(y)``: ``y - gamma * grad``."""
    _finite(grad, "plasticity gradient")
    _same_length(y, grad)
    return y - cfg.step * grad


def reflect(x_next: np.ndarray, y: np.ndarray) -> np.ndarray:
    _same_length(x_next, y)
    return 2.0 * x_next - y


def soft_threshold(u, tau):
    return np.sign(u) * np.maximum(np.abs(u) - tau, 0.0)


def prox_l1_weighted(y_tilde: np.ndarray, x_old: np.ndarray, tau) -> np.ndarray:
    """``x_old + S_tau(y_tilde - x_old)`` coordinatewise.

    Coordinates with ``|y_tilde - x_old| <= tau`` return ``x_old`` exactly.
    The shrink branch is evaluated as ``y_tilde - sign(u) * tau`` so that a
    zero threshold reproduces ``y_tilde`` bit for bit.
    """
    y_tilde, x_old = np.asarray(y_tilde, dtype=np.float64), np.asarray(x_old, dtype=np.float64)
    _same_length(y_tilde, x_old)
    tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), y_tilde.shape)
    if np.any(tau < 0):
        raise ConfigError("soft-threshold levels must be non-negative")
    u = y_tilde - x_old
    keep = np.abs(u) <= tau
    return np.where(keep, x_old, y_tilde - np.sign(u) * tau)


def prox_l2_weighted(y_tilde: np.ndarray, x_old: np.ndarray, gamma: float, lam: float,
                     f: ImportanceWeights | np.ndarray) -> np.ndarray:
    """Minimizer of ``(lam/2) F (x - x_old)**2 + (x - y_tilde)**2 / (2 gamma)``."""
    if not gamma > 0:
        raise ConfigError(f"gamma must be > 0, got {gamma}")
    f = f.f if isinstance(f, ImportanceWeights) else np.asarray(f, dtype=np.float64)
    _same_length(y_tilde, x_old)
    c = gamma * lam * f
    z = (y_tilde + c * x_old) / (1.0 + c)
    _finite(z, "l2 prox output")
    return z


def consensus_update(y: np.ndarray, z_next: np.ndarray, x_next: np.ndarray) -> tuple[np.ndarray, float]:
    """``y + (z - x)`` and the residual ``||y_next - y||``."""
    _same_length(y, z_next, x_next)
    y_next = y + (z_next - x_next)
    return y_next, float(np.linalg.norm(y_next - y))


def thresholds(weights: ImportanceWeights | np.ndarray, cfg: SolverConfig) -> np.ndarray:
    """Per-parameter soft-threshold levels ``tau_i = gamma * lam * F_i``."""
    f = weights.f if isinstance(weights, ImportanceWeights) else np.asarray(weights, dtype=np.float64)
    return cfg.step * cfg.lam * f


def check_stability_condition(state: SolverState) -> np.ndarray:
    """Per coordinate: ``|2x - y - x_old| < tau`` implies ``z == x_old``."""
    inside = np.abs(2.0 * state.x - state.y - state.x_old) < state.tau
    return ~inside | (state.z == state.x_old)


def sgd_baseline_step(x: np.ndarray, grad_total: np.ndarray, eta: float) -> np.ndarray:
    _finite(x, "parameters")
    _finite(grad_total, "gradient")
    return x - eta * grad_total


def ewc_penalty_grad(x: np.ndarray, x_old: np.ndarray, weights: ImportanceWeights | np.ndarray,
                     lam: float) -> np.ndarray:
    """Gradient of ``(lam/2) sum_i F_i (x_i - x_old_i)**2``."""
    f = weights.f if isinstance(weights, ImportanceWeights) else np.asarray(weights, dtype=np.float64)
    return lam * f * (x - x_old)


class MLPObjective:
    """Task loss of the MLP on a fixed training set, evaluated on index subsets."""

    def __init__(self, data: Batch, spec: NetworkSpec):
        if len(data) == 0:
            raise DataError("empty task dataset")
        self.data, self.spec = data, spec
        self.n = len(data)

    def loss_and_grad(self, x, idx=None):
        batch = self.data if idx is None else self.data.subset(idx)
        return loss_and_grad(x, batch, self.spec)


class QuadraticObjective:
    """``f(x) = 0.5 x^T A x - b^T x`` with an exact proximal map.

    Used as a convex surrogate task where splitting converges provably.
    """

    n = 1

    def __init__(self, A, b):
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        self.b = np.atleast_1d(np.asarray(b, dtype=np.float64))

    def value(self, x):
        return float(0.5 * x @ self.A @ x - self.b @ x)

    def grad(self, x):
        return self.A @ x - self.b

    def loss_and_grad(self, x, idx=None):
        return self.value(x), self.grad(x)

    def prox(self, v, gamma):
        d = self.b.size
        return np.linalg.solve(self.A + np.eye(d) / gamma, self.b + v / gamma)


def batch_schedule(n: int, cfg: SolverConfig, rng: np.random.Generator):
    """Index groups for one epoch: ``max_iter`` groups of mini-batches.

    Batches wrap around the shuffled epoch when the groups need more batches
    than one pass provides.
    """
    perm = rng.permutation(n)
    batches = [perm[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
    inner = cfg.inner_batches_per_iter or math.ceil(len(batches) / cfg.max_iter)
    return [[batches[(k * inner + j) % len(batches)] for j in range(inner)] for k in range(cfg.max_iter)]


def _as_objective(task_data, spec):
    if isinstance(task_data, Batch):
        if spec is None:
            raise ConfigError("a NetworkSpec is required to train on a Batch")
        return MLPObjective(task_data, spec)
    return task_data


def _mean_loss_grad(obj, x, group):
    total_loss, total_grad = 0.0, None
    for idx in group:
        loss, grad = obj.loss_and_grad(x, idx)
        total_loss += loss
        total_grad = grad if total_grad is None else total_grad + grad
    return total_loss / len(group), total_grad / len(group)


def _schedules(obj, cfg, rng):
    for epoch in range(cfg.epochs):
        if obj.n == 1 or cfg.exact_quadratic_prox:
            groups = [[None]] * cfg.max_iter
        else:
            groups = batch_schedule(obj.n, cfg, rng)
        for k, group in enumerate(groups):
            yield epoch, k, group


class _DivergenceGuard:
    def __init__(self, factor):
        self.factor, self.initial = factor, None

    def __call__(self, residual, iteration):
        if not math.isfinite(residual):
            raise DivergenceError(f"non-finite residual at iteration {iteration}", iteration)
        if self.initial is None:
            self.initial = residual
        elif self.initial > 0 and residual > self.factor * self.initial:
            raise DivergenceError(
                f"residual {residual:.3e} exceeded {self.factor:g}x the initial {self.initial:.3e} "
                f"at iteration {iteration}", iteration)


def run_task(x_old: np.ndarray, weights: ImportanceWeights | None, task_data, cfg: SolverConfig,
             spec: NetworkSpec | None = None, seed: int = 0, y0: np.ndarray | None = None,
             keep_states: bool = False) -> tuple[np.ndarray, TaskTrace]:
    """Train one task with Douglas-Rachford splitting; return ``(z_star, trace)``.

    ``task_data`` is a :class:`Batch` (with ``spec``) or any objective exposing
    ``n`` and ``loss_and_grad(x, idx)``; a :class:`QuadraticObjective` plus
    ``cfg.exact_quadratic_prox`` solves the plasticity prox exactly.

    The anchor starts at ``x_old`` (or ``y0`` to warm-start). Each iteration
    averages the gradients of its mini-batch group at ``y``. Iteration stops
    after ``epochs * max_iter`` steps or once ``||y_{k+1} - y_k||`` falls below
    the residual tolerance.

    With no active stability term (``lam == 0`` or regularizer ``none``) the
    stability prox is the identity, the anchor update reduces to
    ``y_{k+1} = x_{k+1}`` and the plasticity iterate is returned, which makes
    the run identical to plain gradient descent.
    """
    obj = _as_objective(task_data, spec)
    x_old = np.asarray(x_old, dtype=np.float64)
    d = x_old.size
    if weights is None:
        weights = ImportanceWeights.zeros(d)
    if len(weights) != d:
        raise DataError(f"importance weights have length {len(weights)}, parameters {d}")
    if cfg.exact_quadratic_prox and not hasattr(obj, "prox"):
        raise ConfigError("exact_quadratic_prox requires an objective with an exact prox")

    active = cfg.stability_active
    gamma = cfg.step
    tau = thresholds(weights, cfg) if active else np.zeros(d)
    tol = cfg.tol(d)
    rng = np.random.default_rng(seed)
    guard = _DivergenceGuard(cfg.divergence_factor)
    trace = TaskTrace()

    y = x_old.copy() if y0 is None else np.array(y0, dtype=np.float64)
    x_next = z = y
    for step, (epoch, k, group) in enumerate(_schedules(obj, cfg, rng)):
        if epoch > 0 and k == 0 and not cfg.warm_start:
            y = (z if active else x_next).copy()
        if cfg.exact_quadratic_prox:
            loss = obj.value(y)
            x_next = obj.prox(y, gamma)
        else:
            loss, grad = _mean_loss_grad(obj, y, group)
            x_next = plasticity_step(y, grad, cfg)
        y_tilde = reflect(x_next, y)
        if not active:
            z = y_tilde
            y_next = x_next
            residual = float(np.linalg.norm(y_next - y))
        else:
            if cfg.regularizer == "l1_weighted":
                z = prox_l1_weighted(y_tilde, x_old, tau)
            else:
                z = prox_l2_weighted(y_tilde, x_old, gamma, cfg.lam, weights)
            y_next, residual = consensus_update(y, z, x_next)
        guard(residual, step)
        out = z if active else x_next
        trace.records.append(IterationRecord(epoch, k, residual, float(loss),
                                             float(np.mean(out == x_old))))
        if keep_states:
            trace.states.append(SolverState(x=x_next, z=z, y=y, x_old=x_old, tau=tau, y_next=y_next,
                                            residuals=trace.residuals, iter=step))
        y = y_next
        if residual < tol:
            trace.stopped_early = True
            break
    trace.y_final = y
    return (z if active else x_next), trace


def run_task_coupled(x_old: np.ndarray, task_data, cfg: SolverConfig, spec: NetworkSpec | None = None,
                     seed: int = 0, ewc_weights: ImportanceWeights | None = None, ewc_lambda: float = 0.0,
                     x0: np.ndarray | None = None) -> tuple[np.ndarray, TaskTrace]:
    """SGD (``ewc_lambda == 0``) or EWC on the same batch schedule as :func:`run_task`.

    The EWC penalty ``(ewc_lambda/2) sum F_i (x_i - x_old_i)**2`` is added to the
    task loss, so its gradient joins the task gradient in one update vector.
    Stopping uses ``||x_{k+1} - x_k||`` against the same tolerance.
    """
    obj = _as_objective(task_data, spec)
    x_old = np.asarray(x_old, dtype=np.float64)
    d = x_old.size
    penalize = ewc_weights is not None and ewc_lambda > 0
    tol = cfg.tol(d)
    rng = np.random.default_rng(seed)
    guard = _DivergenceGuard(cfg.divergence_factor)
    trace = TaskTrace()

    x = x_old.copy() if x0 is None else np.array(x0, dtype=np.float64)
    for step, (epoch, k, group) in enumerate(_schedules(obj, replace(cfg, exact_quadratic_prox=False), rng)):
        loss, grad = _mean_loss_grad(obj, x, group)
        if penalize:
            grad = grad + ewc_penalty_grad(x, x_old, ewc_weights, ewc_lambda)
        x_new = sgd_baseline_step(x, grad, cfg.eta)
        residual = float(np.linalg.norm(x_new - x))
        guard(residual, step)
        trace.records.append(IterationRecord(epoch, k, residual, float(loss),
                                             float(np.mean(x_new == x_old))))
        x = x_new
        if residual < tol:
            trace.stopped_early = True
            break
    trace.y_final = x
    return x, trace
