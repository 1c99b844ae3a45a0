"""Weighted continual cost ``J_k = sum_{tau<=k} gamma_tau * loss_tau``.

The schedules decide how much each past task counts. A uniform schedule
makes the cost grow linearly with the number of tasks whenever every task
keeps a loss floor; a geometric schedule keeps it bounded.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .tensor import MlpModel, loss_and_grads

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GammaSchedule:
    kind: str = "uniform"  # uniform | geometric | custom
    ratio: float = 0.5
    custom: tuple = ()

    def __post_init__(self):
        if self.kind not in ("uniform", "geometric", "custom"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "geometric" and not 0.0 < self.ratio < 1.0:
            raise ValueError("geometric ratio must lie strictly inside (0, 1)")
        if self.kind == "custom" and any(w < 0 for w in self.custom):
            raise ValueError("custom weights must be nonnegative")

    def weights(self, k: int) -> np.ndarray:
        """Weights ``gamma_0 .. gamma_k`` used by the cost at task ``k``.

        Geometric weights are relative to the current task: the newest task
        gets weight 1 and a task ``d`` steps back gets ``ratio**d``.
        """
        if k < 0:
            raise ValueError("k must be >= 0")
        if self.kind == "uniform":
            return np.ones(k + 1)
        if self.kind == "geometric":
            return self.ratio ** np.arange(k, -1, -1, dtype=np.float64)
        if len(self.custom) < k + 1:
            raise ValueError(f"custom schedule covers {len(self.custom)} tasks, need {k + 1}")
        return np.asarray(self.custom[: k + 1], dtype=np.float64)

    @classmethod
    def parse(cls, text: str) -> "GammaSchedule":
        """``uniform`` | ``geometric:<r>`` | ``custom:<w0>,<w1>,...``"""
        text = text.strip()
        if text == "uniform":
            return cls()
        kind, _, arg = text.partition(":")
        if kind == "geometric":
            return cls("geometric", ratio=float(arg))
        if kind == "custom":
            return cls("custom", custom=tuple(float(v) for v in arg.split(",") if v.strip()))
        raise ValueError(f"cannot parse gamma schedule {text!r}")

    def __str__(self):
        if self.kind == "uniform":
            return "uniform"
        if self.kind == "geometric":
            return f"geometric:{self.ratio!r}"
        return "custom:" + ",".join(repr(float(w)) for w in self.custom)


@dataclass
class CostReport:
    per_task_losses: np.ndarray
    gammas: np.ndarray
    weighted_total: float
    beta_k: float = 1.0

    @property
    def beta_term(self) -> float:
        return self.beta_k * self.weighted_total


def check_beta(beta_k: float) -> float:
    if not 0.0 <= beta_k <= 1.0:
        log.error("beta_k=%r rejected; admissible range is [0, 1]", beta_k)
        raise ValueError(f"beta_k must lie in [0, 1], got {beta_k}")
    return float(beta_k)


def task_loss(model: MlpModel, task, split: str = "test") -> float:
    """Mean cross-entropy of ``model`` on one task's evaluation data."""
    if model.out_dim != task.output_dim:
        raise ValueError(
            f"model has {model.out_dim} outputs but the {task.scenario} stream needs {task.output_dim}"
        )
    ds = task.test if split == "test" else task.train
    n = len(ds)
    loss, _ = loss_and_grads(model, ds.images, task.targets(ds.labels), mask=task.mask(n))
    return loss


def weighted_sum(losses: Sequence[float], gammas: Sequence[float]) -> float:
    losses = np.asarray(losses, dtype=np.float64)
    gammas = np.asarray(gammas, dtype=np.float64)
    # newest task first, then the past: gamma_k l_k + sum_{tau<k} gamma_tau l_tau
    return float(gammas[-1] * losses[-1] + np.dot(gammas[:-1], losses[:-1]))


def total_cost(model: MlpModel, tasks: Sequence, schedule: GammaSchedule = GammaSchedule(),
               beta_k: float = 1.0, split: str = "test",
               losses: Optional[Sequence[float]] = None) -> CostReport:
    """Cost at task ``k = len(tasks) - 1``.

    ``losses`` bypasses evaluation (useful for closed-form checks).
    """
    beta_k = check_beta(beta_k)
    k = len(tasks) - 1 if losses is None else len(losses) - 1
    if k < 0:
        raise ValueError("need at least one task")
    gammas = schedule.weights(k)
    if losses is None:
        losses = [task_loss(model, t, split) for t in tasks]
    losses = np.asarray(losses, dtype=np.float64)
    return CostReport(losses, gammas, weighted_sum(losses, gammas), beta_k)


def partial_sum_trace(schedule: GammaSchedule, constant_loss: float, K: int) -> np.ndarray:
    """``S_k`` for ``k = 0..K-1``: the cost at task k when every task has loss eps.

    Uniform weights give ``S_k = (k+1) eps`` (unbounded); geometric weights
    give ``eps (1 - r^(k+1)) / (1 - r)``, bounded by ``eps / (1 - r)``.
    """
    if constant_loss <= 0:
        raise ValueError("constant_loss must be > 0")
    if K < 1:
        raise ValueError("K must be >= 1")
    # Accumulate the per-horizon increments in order. A running sum of
    # nonnegative terms never decreases under rounding, so the trace is
    # monotone in floating point as well as in exact arithmetic.
    w = schedule.weights(K - 1)
    increments = w[::-1] if schedule.kind == "geometric" else w
    return constant_loss * np.cumsum(increments)


def batch_task_weights(task_ids: np.ndarray, schedule: GammaSchedule, k: int,
                       normalize: bool = False) -> np.ndarray:
    """Per-sample weights so that ``sum(w * loss)`` equals
    ``sum_tau gamma_tau * mean_{s in tau} loss_s`` over tasks present in the batch.

    With ``normalize`` the weights are rescaled to sum to one, so the batch
    cost is a convex combination of per-task means and its scale does not
    grow with the number of tasks present in the batch.
    """
    task_ids = np.asarray(task_ids)
    gammas = schedule.weights(k)
    w = np.empty(len(task_ids))
    for tau in np.unique(task_ids):
        sel = task_ids == tau
        w[sel] = gammas[tau] / sel.sum()
    if normalize:
        total = w.sum()
        if total <= 0:
            raise ValueError("all tasks in the batch have zero weight")
        w = w / total
    return w
