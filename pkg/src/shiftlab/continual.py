"""Sequential-task training with Fisher-preconditioned updates.

Co-natural gradient descent (plain gradients rescaled after a damped
diagonal-Fisher solve), a rolling Fisher estimate across tasks, a quadratic
weight-anchoring penalty, reservoir-sampled experience replay, and
accuracy/forgetting bookkeeping over task sequences. Task sequences share a
trunk while each task owns a fresh linear head; only trunk parameters
receive Fisher treatment.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .datasets import GroupedDataset, batches, gen_two_domain_gaussian, TwoDomainSpec
from .diffcore import (
    Example,
    ModelSpec,
    ModelState,
    fisher_diag,
    grad_params,
    init_params,
    nll_loss_batch,
    zero_one_loss_batch,
)

EPSILON = 1e-12


@dataclass
class FisherState:
    """Damped diagonal Fisher with a rolling coefficient."""

    diag: np.ndarray
    gamma: float = 0.9
    alpha: float = 1.0

    def __post_init__(self):
        self.diag = np.asarray(self.diag, dtype=float)
        if np.any(self.diag < 0):
            raise ValueError("Fisher diagonal must be nonnegative")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")


def initial_fisher(num_params: int, gamma: float = 0.9, alpha: float = 1.0) -> FisherState:
    """Start the rolling estimate at (alpha/gamma) I so damping is counted once."""
    if math.isinf(alpha):
        diag = np.zeros(num_params)
    else:
        diag = np.full(num_params, alpha / gamma)
    return FisherState(diag, gamma, alpha)


def conatural_delta(grad: np.ndarray, fisher: FisherState, lr: float) -> np.ndarray:
    """Preconditioned update -lr * delta with delta rescaled to the gradient norm.

    Raw delta solves the damped diagonal system (F + alpha I) delta = grad;
    infinite damping degenerates to the plain gradient.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    grad = np.asarray(grad, dtype=float)
    if grad.shape != fisher.diag.shape:
        raise ValueError("gradient and Fisher diagonal lengths must match")
    grad_norm = float(np.linalg.norm(grad))
    if grad_norm == 0.0:
        return np.zeros_like(grad)
    if math.isinf(fisher.alpha):
        return -lr * grad
    raw = grad / (fisher.diag + fisher.alpha + EPSILON)
    delta = raw * (grad_norm / np.linalg.norm(raw))
    return -lr * delta


def conatural_delta_raw(grad: np.ndarray, fisher: FisherState) -> np.ndarray:
    """The pre-renormalization diagonal solve, exposed for residual testing."""
    return np.asarray(grad, dtype=float) / (fisher.diag + fisher.alpha + EPSILON)


def residual_check(grad: np.ndarray, fisher: FisherState, delta_raw: np.ndarray) -> float:
    """Relative norm of grad - (F + alpha I) delta_raw; near zero iff exact."""
    grad = np.asarray(grad, dtype=float)
    residual = grad - (fisher.diag + fisher.alpha) * np.asarray(delta_raw, dtype=float)
    denom = max(float(np.linalg.norm(grad)), EPSILON)
    return float(np.linalg.norm(residual)) / denom


def rolling_fisher_update(fisher: FisherState, new_task_fisher: np.ndarray) -> FisherState:
    """Exponential moving average: gamma * F_new + (1 - gamma) * F_old."""
    new = np.asarray(new_task_fisher, dtype=float)
    if new.shape != fisher.diag.shape:
        raise ValueError("Fisher lengths must match")
    if np.any(new < 0):
        raise ValueError("Fisher diagonal must be nonnegative")
    diag = fisher.gamma * new + (1.0 - fisher.gamma) * fisher.diag
    return FisherState(diag, fisher.gamma, fisher.alpha)


def fisher_renormalize(diag: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Scale the diagonal so it sums to the parameter count.

    Returns (scaled diagonal, ok flag); an all-zero diagonal is returned
    unchanged with ok = False.
    """
    diag = np.asarray(diag, dtype=float)
    total = diag.sum()
    if total == 0:
        return diag.copy(), False
    return diag * (diag.size / total), True


def ewc_loss(
    theta: np.ndarray,
    theta_ref: np.ndarray,
    omega_diag: np.ndarray,
    lambda_reg: float,
) -> Tuple[float, np.ndarray]:
    """Quadratic anchor penalty lambda * sum omega (theta - ref)^2 and its gradient."""
    if lambda_reg < 0:
        raise ValueError("lambda_reg must be nonnegative")
    theta = np.asarray(theta, dtype=float)
    diff = theta - np.asarray(theta_ref, dtype=float)
    omega = np.asarray(omega_diag, dtype=float)
    if diff.shape != omega.shape:
        raise ValueError("lengths must match")
    penalty = float(lambda_reg * np.sum(omega * diff * diff))
    gradient = 2.0 * lambda_reg * omega * diff
    return penalty, gradient


@dataclass
class ReplayMemory:
    """Fixed-capacity uniform sample of the example stream seen so far."""

    capacity: int
    items: List[Example] = field(default_factory=list)
    seen_count: int = 0

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be positive")


def reservoir_add(memory: ReplayMemory, item: Example, rng: np.random.Generator) -> ReplayMemory:
    """Reservoir sampling: every item seen so far kept with equal probability."""
    memory.seen_count += 1
    if len(memory.items) < memory.capacity:
        memory.items.append(item)
    elif rng.random() < memory.capacity / memory.seen_count:
        slot = int(rng.integers(0, memory.capacity))
        memory.items[slot] = item
    return memory


def er_step(
    model: ModelState,
    task_batch: Sequence[Example],
    memory: ReplayMemory,
    lr: float,
    rng: np.random.Generator,
) -> ModelState:
    """Gradient step on the task batch concatenated with a replay batch."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    combined = list(task_batch)
    if memory.items:
        idx = rng.integers(0, len(memory.items), size=len(task_batch))
        combined.extend(memory.items[int(i)] for i in idx)
    n = len(combined)
    grad = grad_params(model, combined, np.full(n, 1.0 / n))
    out = model.copy()
    out.params -= lr * grad
    return out


@dataclass
class ContinualMetrics:
    """accuracy_matrix[task][checkpoint]; checkpoints follow task order."""

    accuracy_matrix: np.ndarray
    task_order: List[int]


def forgetting(metrics: ContinualMetrics, task: int, t: int) -> float:
    """Best past accuracy on a task minus its accuracy at checkpoint t."""
    if t < 1:
        raise ValueError("forgetting needs at least one prior checkpoint")
    history = metrics.accuracy_matrix[task]
    return float(np.max(history[:t]) - history[t])


def average_forgetting(metrics: ContinualMetrics) -> float:
    """End-of-training forgetting averaged over all tasks but the last."""
    num_tasks, num_ckpts = metrics.accuracy_matrix.shape
    if num_tasks < 2:
        return 0.0
    last = num_ckpts - 1
    return float(np.mean([forgetting(metrics, task, last) for task in range(num_tasks - 1)]))


def average_accuracy(metrics: ContinualMetrics) -> float:
    return float(np.mean(metrics.accuracy_matrix[:, -1]))


@dataclass
class ContinualConfig:
    method: str = "finetune"
    hidden_units: int = 16
    lr: float = 0.1
    epochs: int = 3
    batch_size: int = 16
    alpha: float = 1.0
    gamma: float = 0.9
    ewc_lambda: float = 1.0
    replay_capacity: int = 200
    fisher_samples: int = 1000
    grad_noise: float = 0.0
    seed: int = 0

    _METHODS = ("finetune", "conatural", "ewc", "conatural+ewc", "er", "conatural+er")

    def __post_init__(self):
        if self.method not in self._METHODS:
            raise ValueError(f"unknown method: {self.method!r}")


def _infer_dims(tasks: Sequence[GroupedDataset]) -> Tuple[int, int]:
    first = tasks[0].examples[0]
    input_dim = len(np.asarray(first.input))
    num_classes = max(ex.label for t in tasks for ex in t.examples) + 1
    return input_dim, max(num_classes, 2)


class _MultiHeadModel:
    """An MLP trunk shared across tasks with one linear head per task."""

    def __init__(self, input_dim: int, num_classes: int, hidden: int, num_tasks: int, seed: int):
        self.spec = ModelSpec(
            "mlp", input_dim=input_dim, num_classes=num_classes, hidden_units=hidden
        )
        base = init_params(self.spec, seed)
        self.layout = base.layout
        lo, hi = self.layout["hidden.weight"]
        lo2, hi2 = self.layout["hidden.bias"]
        self.trunk_slice = slice(min(lo, lo2), max(hi, hi2))
        self.trunk = base.params[self.trunk_slice].copy()
        self.head_slice = slice(self.trunk_slice.stop, base.params.size)
        self.heads = [
            init_params(self.spec, seed + 1 + t).params[self.head_slice].copy()
            for t in range(num_tasks)
        ]

    def model_for(self, task: int) -> ModelState:
        params = np.concatenate([self.trunk, self.heads[task]])
        return ModelState(self.spec, params, dict(self.layout))

    def apply_update(self, task: int, trunk_update: np.ndarray, head_update: np.ndarray):
        self.trunk += trunk_update
        self.heads[task] += head_update


def _task_accuracy(model: ModelState, dataset: GroupedDataset) -> float:
    errors = zero_one_loss_batch(model, dataset.examples)
    return float(1.0 - errors.mean())


def continual_train(
    tasks: Sequence[GroupedDataset],
    method: str,
    config: ContinualConfig,
    eval_tasks: Optional[Sequence[GroupedDataset]] = None,
) -> ContinualMetrics:
    """Train tasks sequentially, recording per-task accuracy after each task.

    The trunk is updated by the configured rule; heads always take plain
    gradient steps. After each task the trunk Fisher is estimated by Monte
    Carlo, renormalized, and folded into the rolling estimate used for both
    preconditioning and the anchoring penalty.
    """
    if len(tasks) < 1:
        raise ValueError("at least one task required")
    config = ContinualConfig(**{**config.__dict__, "method": method})
    if eval_tasks is None:
        eval_tasks = tasks
    input_dim, num_classes = _infer_dims(tasks)
    net = _MultiHeadModel(input_dim, num_classes, config.hidden_units, len(tasks), config.seed)
    rng = np.random.default_rng(config.seed + 7919)

    use_conatural = method.startswith("conatural")
    use_ewc = method.endswith("ewc")
    use_er = method.endswith("er") and not method.endswith("ewc")

    trunk_size = net.trunk.size
    fisher = initial_fisher(trunk_size, config.gamma, config.alpha)
    trunk_ref = net.trunk.copy()
    memory = ReplayMemory(config.replay_capacity) if use_er else None
    seen_any_task = False

    accuracy_rows = []
    for task_idx, task in enumerate(tasks):
        for epoch in range(config.epochs):
            batch_seed = config.seed * 100003 + task_idx * 131 + epoch
            for idx in batches(task, config.batch_size, seed=batch_seed):
                batch = [task.examples[i] for i in idx]
                model = net.model_for(task_idx)
                if use_er and memory.items:
                    replay_idx = rng.integers(0, len(memory.items), size=len(batch))
                    combined = batch + [memory.items[int(i)] for i in replay_idx]
                else:
                    combined = batch
                n = len(combined)
                grad = grad_params(model, combined, np.full(n, 1.0 / n))
                if config.grad_noise > 0:
                    scale = config.grad_noise * np.linalg.norm(grad)
                    grad = grad + scale * rng.standard_normal(grad.size) / np.sqrt(grad.size)
                trunk_grad = grad[net.trunk_slice].copy()
                head_grad = grad[net.head_slice].copy()
                if use_ewc and seen_any_task:
                    _, penalty_grad = ewc_loss(
                        net.trunk, trunk_ref, fisher.diag, config.ewc_lambda
                    )
                    trunk_grad += penalty_grad
                if use_conatural and seen_any_task:
                    trunk_update = conatural_delta(trunk_grad, fisher, config.lr)
                else:
                    trunk_update = -config.lr * trunk_grad
                net.apply_update(task_idx, trunk_update, -config.lr * head_grad)
                if use_er:
                    for ex in batch:
                        reservoir_add(memory, ex, rng)

        if not math.isinf(config.alpha) and (use_conatural or use_ewc):
            raw_fisher = fisher_diag(
                net.model_for(task_idx), task, config.fisher_samples,
                seed=config.seed + 31 * task_idx,
            )
            trunk_fisher, ok = fisher_renormalize(raw_fisher[net.trunk_slice])
            if ok:
                fisher = rolling_fisher_update(fisher, trunk_fisher)
        trunk_ref = net.trunk.copy()
        seen_any_task = True

        accuracy_rows.append(
            [_task_accuracy(net.model_for(t), eval_tasks[t]) for t in range(len(tasks))]
        )

    matrix = np.array(accuracy_rows).T  # rows = tasks, columns = checkpoints
    return ContinualMetrics(matrix, list(range(len(tasks))))


def rotated_gaussian_tasks(
    num_tasks: int,
    points_per_task: int,
    sigma: float = 0.5,
    seed: int = 0,
    max_angle: float = math.pi / 2,
) -> List[GroupedDataset]:
    """Task sequence of progressively rotated two-Gaussian problems.

    Successive tasks rotate the class layout, so a shared trunk fit to one
    task interferes with the others.
    """
    if num_tasks < 1:
        raise ValueError("num_tasks must be positive")
    tasks = []
    for t in range(num_tasks):
        base = gen_two_domain_gaussian(
            TwoDomainSpec(points_per_task, 0.5, sigma, seed=seed + 977 * t)
        )
        angle = max_angle * t / max(num_tasks - 1, 1)
        rot = np.array(
            [[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]]
        )
        rotated = [
            Example(input=rot @ np.asarray(ex.input, dtype=float), label=ex.label,
                    group=ex.group, id=ex.id)
            for ex in base.examples
        ]
        tasks.append(GroupedDataset(rotated, list(base.group_names)))
    return tasks
