"""Continual learning as a two-player game between generalization and forgetting.

Submodules
----------
tensor  dense MLP, cross-entropy and exact gradients
tasks   IDX reader/writer and split / permuted / synthetic task streams
cost    weighted continual cost and its schedules
game    leader/follower moves, the H estimate and the analytic saddle lab
bcl     the balanced trainer, baselines, task memory and retained accuracy
bench   experiment configs, the runner and CSV artifacts
"""
from .bcl import (METHODS, TaskMemory, TraceRow, TrainerConfig, bcl_train_task,
                  l2_train_task, naive_rehearsal_train_task, retained_accuracy,
                  sequential_train_task, train_stream, update_task_memory)
from .bench import (ConfigError, ExperimentConfig, ResultTable, emit_trace, emit_trajectory,
                    parse_config, read_trace, run_experiment, serialize_config)
from .cost import GammaSchedule, partial_sum_trace, total_cost
from .game import (StepSchedule, check_saddle, estimate_H, make_game, play_sequential_game,
                   player1_step, player2_step)
from .tasks import (IdxFormatError, SyntheticSpec, load_mnist, make_permuted_tasks,
                    make_split_tasks, make_synthetic_tasks, parse_idx)
from .tensor import (MlpModel, apply_update, forward, gradcheck, init_mlp, loss_and_grads)

__version__ = "0.1.0"

__all__ = [
    "METHODS", "TaskMemory", "TraceRow", "TrainerConfig", "bcl_train_task", "l2_train_task",
    "naive_rehearsal_train_task", "retained_accuracy", "sequential_train_task", "train_stream",
    "update_task_memory", "ConfigError", "ExperimentConfig", "ResultTable", "emit_trace",
    "emit_trajectory", "parse_config", "read_trace", "run_experiment", "serialize_config",
    "GammaSchedule", "partial_sum_trace", "total_cost", "StepSchedule", "check_saddle",
    "estimate_H", "make_game", "play_sequential_game", "player1_step", "player2_step",
    "IdxFormatError", "SyntheticSpec", "load_mnist", "make_permuted_tasks", "make_split_tasks",
    "make_synthetic_tasks", "parse_idx", "MlpModel", "apply_update", "forward", "gradcheck",
    "init_mlp", "loss_and_grads",
]
