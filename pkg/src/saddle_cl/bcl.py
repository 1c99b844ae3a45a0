"""Balanced continual learning and the baselines it is compared with.

Per batch of the current task, BCL

1. draws a replay batch from the task memory and joins it to the new batch,
2. lets the leader ascend a copy of the joint batch for ``zeta`` steps,
3. descends a temporary copy of the model ``zeta`` steps on the joint batch,
4. evaluates the three H terms and takes one step on the real model along
   the gradient of the H bound.

Baselines: plain sequential training, an L2 pull towards the previous
task's parameters, and naive rehearsal (replay without the game).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .cost import GammaSchedule, batch_task_weights, check_beta
from .game import ascend_batch, estimate_H
from .tensor import (MlpModel, NumericError, apply_update, init_mlp, loss_and_grads,
                     predict)

METHODS = ("bcl", "naive_rehearsal", "sequential", "l2")


@dataclass(frozen=True)
class TrainerConfig:
    zeta: int = 5
    rho: int = 2  # epochs over the new-task buffer
    batch_size: int = 128
    replay_batch_size: int = 0  # 0 -> same as batch_size
    learning_rate: float = 0.001
    beta: float = 1.0
    buffer_capacity: int = 500
    ascent_step: float = 0.01
    inner_step: float = 0.001  # descent step on the temporary model; 0 -> learning_rate
    ascent_rule: str = "plain"
    h_grad_mode: str = "surrogate_full"
    optimizer: str = "sgd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    l2_lambda: float = 1.0
    gamma: str = "uniform"
    normalize_gamma: bool = True  # batch weights sum to one
    seed: int = 0

    def __post_init__(self):
        for name in ("zeta", "rho", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be ≥ 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        for name in ("replay_batch_size", "buffer_capacity", "ascent_step", "inner_step",
                     "l2_lambda"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        check_beta(self.beta)
        if self.ascent_rule not in ("plain", "normalized"):
            raise ValueError("ascent_rule must be 'plain' or 'normalized'")
        if self.h_grad_mode not in ("surrogate_full", "current_batch_only"):
            raise ValueError("h_grad_mode must be 'surrogate_full' or 'current_batch_only'")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        GammaSchedule.parse(self.gamma)

    @property
    def gamma_schedule(self) -> GammaSchedule:
        return GammaSchedule.parse(self.gamma)

    @property
    def temp_step(self) -> float:
        return self.inner_step or self.learning_rate

    @property
    def replay_size(self) -> int:
        return self.replay_batch_size or self.batch_size


@dataclass
class TraceRow:
    k: int
    i: int
    beta_term: float
    forgetting_term: float
    generalization_term: float
    h_total: float
    current_loss: float
    alpha: float


TRACE_FIELDS = tuple(TraceRow.__dataclass_fields__)


# ---------------------------------------------------------------- optimizers


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, model: MlpModel, grads) -> MlpModel:
        return apply_update(model, grads, self.lr)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, model: MlpModel, grads) -> MlpModel:
        if any(not np.all(np.isfinite(g)) for g in grads):
            raise NumericError("non-finite gradient; the update would diverge")
        if self.m is None:
            self.m = [np.zeros_like(g) for g in grads]
            self.v = [np.zeros_like(g) for g in grads]
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        directions = []
        for j, g in enumerate(grads):
            self.m[j] = self.b1 * self.m[j] + (1 - self.b1) * g
            self.v[j] = self.b2 * self.v[j] + (1 - self.b2) * g * g
            directions.append((self.m[j] / c1) / (np.sqrt(self.v[j] / c2) + self.eps))
        return apply_update(model, directions, self.lr)


def make_optimizer(cfg: TrainerConfig):
    if cfg.optimizer == "adam":
        return Adam(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return SGD(cfg.learning_rate)


# -------------------------------------------------------------------- memory


@dataclass
class TaskMemory:
    """Bounded replay store of earlier tasks, balanced per task."""

    capacity: int
    seed: int = 0
    images: Optional[np.ndarray] = None
    targets: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    task_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    masks: Optional[np.ndarray] = None
    tasks_seen: int = 0

    def __len__(self):
        return len(self.targets)

    def counts(self) -> dict:
        ids, n = np.unique(self.task_ids, return_counts=True)
        return dict(zip(ids.tolist(), n.tolist()))

    def sample(self, n: int, rng: np.random.Generator):
        """Uniform draw without replacement of ``min(n, len(self))`` entries."""
        if len(self) == 0 or n == 0:
            return None
        idx = rng.choice(len(self), size=min(n, len(self)), replace=False)
        return self.images[idx], self.targets[idx], self.masks[idx], self.task_ids[idx]


def _quotas(capacity: int, n_tasks: int) -> list:
    base, extra = divmod(capacity, n_tasks)
    return [base + (1 if j < extra else 0) for j in range(n_tasks)]


def update_task_memory(memory: TaskMemory, task, cfg: Optional[TrainerConfig] = None) -> TaskMemory:
    """Return a new memory holding an equal share of every task seen so far.

    Existing per-task entries are down-sampled uniformly to the new quota and
    the finished task fills its own quota from its training set.
    """
    if cfg is not None and cfg.buffer_capacity != memory.capacity:
        memory = replace(memory, capacity=cfg.buffer_capacity)
    if len(memory) and np.any(memory.task_ids >= task.id):
        raise ValueError(f"memory already holds samples of task >= {task.id}")
    seen = memory.tasks_seen + 1
    rng = np.random.default_rng([memory.seed, seen])
    quotas = _quotas(memory.capacity, seen)
    old_ids = sorted(set(memory.task_ids.tolist()))
    keep = []
    for j, tau in enumerate(old_ids):
        where = np.flatnonzero(memory.task_ids == tau)
        take = min(len(where), quotas[j])
        keep.append(np.sort(rng.choice(where, size=take, replace=False)))
    keep = np.concatenate(keep) if keep else np.zeros(0, dtype=np.int64)

    n_new = min(len(task.train), quotas[len(old_ids)] if len(old_ids) < seen else 0)
    new_idx = np.sort(rng.choice(len(task.train), size=n_new, replace=False))
    x_new = task.train.images[new_idx]
    t_new = task.targets(task.train.labels[new_idx])
    m_new = task.mask(n_new)

    if memory.images is None:
        images, targets, ids, masks = x_new, t_new, np.full(n_new, task.id), np.array(m_new)
    else:
        images = np.concatenate([memory.images[keep], x_new])
        targets = np.concatenate([memory.targets[keep], t_new])
        ids = np.concatenate([memory.task_ids[keep], np.full(n_new, task.id)])
        masks = np.concatenate([memory.masks[keep], m_new])
    return TaskMemory(memory.capacity, memory.seed, images, targets.astype(np.int64),
                      ids.astype(np.int64), masks, seen)


# ------------------------------------------------------------------ helpers


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield order[start:start + size]


def _check_task(model: MlpModel, task):
    if len(task.train) == 0:
        raise ValueError("task has no training data")
    if model.out_dim != task.output_dim:
        raise ValueError(f"model has {model.out_dim} outputs, task {task.id} needs {task.output_dim}")


def _joint_batch(task, idx, memory: Optional[TaskMemory], mem_rng, replay_size: int):
    x = task.train.images[idx]
    t = task.targets(task.train.labels[idx])
    mask = task.mask(len(idx))
    ids = np.full(len(idx), task.id)
    drawn = memory.sample(replay_size, mem_rng) if memory is not None else None
    if drawn is None:
        return x, t, np.asarray(mask), ids
    xp, tp, mp, ip = drawn
    return (np.concatenate([xp, x]), np.concatenate([tp, t]),
            np.concatenate([mp, mask]), np.concatenate([ip, ids]))


def _rngs(cfg: TrainerConfig, k: int):
    return np.random.default_rng([cfg.seed, k, 0]), np.random.default_rng([cfg.seed, k, 1])


def _plain_row(k, i, loss, lr) -> TraceRow:
    return TraceRow(k, i, loss, 0.0, 0.0, loss, loss, lr)


# ---------------------------------------------------------------- baselines


def _replay_train(model: MlpModel, task, memory: Optional[TaskMemory], cfg: TrainerConfig,
                  anchor: Optional[MlpModel] = None, lam: float = 0.0):
    _check_task(model, task)
    opt = make_optimizer(cfg)
    batch_rng, mem_rng = _rngs(cfg, task.id)
    anchor_params = anchor.params() if anchor is not None else None
    prox = lam > 0 and anchor is not None and cfg.optimizer == "sgd"
    trace = []
    i = 0
    for _ in range(cfg.rho):
        for idx in _batches(len(task.train), cfg.batch_size, batch_rng):
            x, t, mask, _ = _joint_batch(task, idx, memory, mem_rng, cfg.replay_size)
            loss, gb = loss_and_grads(model, x, t, mask=mask)
            grads = gb.param_grads
            if lam > 0 and anchor is not None:
                loss += l2_penalty(model, anchor, lam)
                if prox:
                    model = _proximal_l2_step(model, grads, anchor_params, lam, cfg.learning_rate)
                else:
                    pen = l2_penalty_grad(model, anchor, lam)
                    model = opt.step(model, [g + p for g, p in zip(grads, pen)])
            else:
                model = opt.step(model, grads)
            trace.append(_plain_row(task.id, i, loss, cfg.learning_rate))
            i += 1
    return model, trace


def sequential_train_task(model: MlpModel, task, cfg: TrainerConfig):
    """Plain descent on the current task only. Returns ``(model, trace)``."""
    return _replay_train(model, task, None, cfg)


def naive_rehearsal_train_task(model: MlpModel, task, memory: TaskMemory, cfg: TrainerConfig):
    """Descent on the mean cross-entropy of new batch joined with a replay batch."""
    return _replay_train(model, task, memory, cfg)


def l2_penalty(model: MlpModel, anchor: MlpModel, lam: float) -> float:
    return lam * sum(float(np.sum((p - a) ** 2)) for p, a in zip(model.params(), anchor.params()))


def l2_penalty_grad(model: MlpModel, anchor: MlpModel, lam: float) -> list:
    return [2.0 * lam * (p - a) for p, a in zip(model.params(), anchor.params())]


def _proximal_l2_step(model, grads, anchor_params, lam, lr) -> MlpModel:
    # implicit step on the quadratic pull: stable for any lambda
    shrink = 1.0 + 2.0 * lr * lam
    if any(not np.all(np.isfinite(g)) for g in grads):
        raise NumericError("non-finite gradient; the update would diverge")
    return model.with_params([(p - lr * g + 2.0 * lr * lam * a) / shrink
                              for p, g, a in zip(model.params(), grads, anchor_params)])


def l2_train_task(model: MlpModel, task, anchor: Optional[MlpModel], lam: float, cfg: TrainerConfig):
    """Sequential training plus ``lam * ||theta - anchor||^2``.

    With SGD the penalty enters through an implicit (proximal) step, which
    stays stable for stiff ``lam``; with Adam its exact gradient
    ``2 lam (theta - anchor)`` is added to the loss gradient.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return _replay_train(model, task, None, cfg, anchor, lam)


# ---------------------------------------------------------------------- BCL


def bcl_train_task(model: MlpModel, task, memory: Optional[TaskMemory], cfg: TrainerConfig):
    """One task of balanced continual learning. Returns ``(model, trace)``.

    The descent direction on the real model is the gradient of the H bound
    with the temporary model treated to first order:
    ``(beta - 2) dJ(theta; b) + dJ(theta_B; b) + dJ(theta; x_pert)``
    (``h_grad_mode="surrogate_full"``), or ``beta dJ(theta; b)`` when
    ``h_grad_mode="current_batch_only"``.
    """
    _check_task(model, task)
    opt = make_optimizer(cfg)
    batch_rng, mem_rng = _rngs(cfg, task.id)
    schedule = cfg.gamma_schedule
    trace = []
    i = 0
    for _ in range(cfg.rho):
        for idx in _batches(len(task.train), cfg.batch_size, batch_rng):
            x, t, mask, ids = _joint_batch(task, idx, memory, mem_rng, cfg.replay_size)
            w = batch_task_weights(ids, schedule, task.id, cfg.normalize_gamma)
            x_pert = ascend_batch(model, x, t, cfg.zeta, cfg.ascent_step, cfg.ascent_rule,
                                  weights=w, mask=mask)
            est, temp = estimate_H(model, x, x_pert, t, cfg.beta, cfg.zeta, cfg.temp_step,
                                   weights=w, mask=mask, return_temp=True)
            _, g_base = loss_and_grads(model, x, t, weights=w, mask=mask)
            if cfg.h_grad_mode == "surrogate_full":
                _, g_temp = loss_and_grads(temp, x, t, weights=w, mask=mask)
                _, g_pert = loss_and_grads(model, x_pert, t, weights=w, mask=mask)
                grads = [(cfg.beta - 2.0) * a + b + c for a, b, c in
                         zip(g_base.param_grads, g_temp.param_grads, g_pert.param_grads)]
            else:
                grads = [cfg.beta * a for a in g_base.param_grads]
            model = opt.step(model, grads)
            trace.append(TraceRow(task.id, i, est.beta_term, est.forgetting_term,
                                  est.generalization_term, est.total, est.base_cost,
                                  cfg.learning_rate))
            i += 1
    return model, trace


# --------------------------------------------------------------- evaluation


@dataclass
class RunMetrics:
    per_task: list  # final test accuracy of tasks 0..upto_k
    ra: float
    accuracy_matrix: Optional[np.ndarray] = None  # row j: accuracies after task j
    wall_time: float = 0.0


def task_accuracy(model: MlpModel, task) -> float:
    ds = task.test
    pred = predict(model, ds.images, task.mask(len(ds)))
    return float(np.mean(pred == task.targets(ds.labels)))


def retained_accuracy(model: MlpModel, stream, upto_k: Optional[int] = None) -> RunMetrics:
    """Test accuracy of every task up to ``upto_k`` and their mean (RA)."""
    if model.out_dim != stream.output_dim:
        raise ValueError(
            f"model has {model.out_dim} outputs; the {stream.scenario} stream needs {stream.output_dim}"
        )
    if upto_k is None:
        upto_k = len(stream) - 1
    accs = [task_accuracy(model, stream[k]) for k in range(upto_k + 1)]
    return RunMetrics(accs, float(np.mean(accs)))


def train_stream(method: str, stream, cfg: TrainerConfig, hidden=(100,)):
    """Fresh model, one pass over the stream. Returns ``(model, RunMetrics, trace)``."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    t0 = time.perf_counter()
    in_dim = stream[0].train.images.shape[1]
    model = init_mlp([in_dim, *hidden, stream.output_dim], seed=cfg.seed)
    memory = TaskMemory(cfg.buffer_capacity, cfg.seed)
    K = len(stream)
    matrix = np.full((K, K), np.nan)
    trace = []
    for k, task in enumerate(stream.tasks):
        if method == "bcl":
            model, rows = bcl_train_task(model, task, memory, cfg)
        elif method == "naive_rehearsal":
            model, rows = naive_rehearsal_train_task(model, task, memory, cfg)
        elif method == "l2":
            anchor = model if k else None
            model, rows = l2_train_task(model, task, anchor, cfg.l2_lambda, cfg)
        else:
            model, rows = sequential_train_task(model, task, cfg)
        trace.extend(rows)
        if method in ("bcl", "naive_rehearsal"):
            memory = update_task_memory(memory, task, cfg)
        matrix[k, : k + 1] = retained_accuracy(model, stream, k).per_task
    final = matrix[-1].tolist()
    return model, RunMetrics(final, float(np.mean(final)), matrix, time.perf_counter() - t0), trace
