"""
Watching the game terms during training
=======================================

Three permuted tasks where the second one repeats the first. When the
repeated task arrives, the generalization term barely moves. When the
genuinely new permutation arrives, it jumps and then decays as the model
adapts. The per-update rows are written to ``trace.csv``.
"""
import numpy as np

from saddle_cl.bcl import TaskMemory, TrainerConfig, bcl_train_task, update_task_memory
from saddle_cl.bench import emit_trace
from saddle_cl.tasks import make_permuted_tasks, make_synthetic_dataset
from saddle_cl.tensor import init_mlp

seed = 0
ds = make_synthetic_dataset(4, 20, 2000, 6.0, seed)
stream = make_permuted_tasks(ds, 3, seed, "ICL", repeat_task_at={1: 0})
cfg = TrainerConfig(learning_rate=0.1, batch_size=32, rho=5, ascent_step=0.1, seed=seed,
                    buffer_capacity=200)

model = init_mlp([20, 100, stream.output_dim], seed=seed)
memory = TaskMemory(200, seed)
rows = []
for task in stream.tasks:
    model, trace = bcl_train_task(model, task, memory, cfg)
    rows += trace
    memory = update_task_memory(memory, task, cfg)

g = np.array([r.generalization_term for r in rows])
n = len(rows) // 3
w = n // 10
for b, name in ((n, "repeated task"), (2 * n, "new task")):
    print(f"{name:14s} generalization term: before {g[b - w:b].mean():.4f}, "
          f"after {g[b:b + w].max():.4f}")

emit_trace(rows, "trace.csv")
print(len(rows), "rows written to trace.csv")
