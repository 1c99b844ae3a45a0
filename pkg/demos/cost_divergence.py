"""
Why the task weights must decay
===============================

With every past task weighted equally the accumulated cost grows without
bound, even when each task only contributes a small constant loss. A
geometric schedule keeps the same sum bounded.
"""
from saddle_cl.cost import GammaSchedule, partial_sum_trace, total_cost

eps = 0.01
uniform = partial_sum_trace(GammaSchedule(), eps, 1000)
print("uniform weights, S_k after 10, 100, 1000 tasks:", uniform[[9, 99, 999]])

geometric = partial_sum_trace(GammaSchedule("geometric", ratio=0.5), 1.0, 1000)
print("geometric r=0.5, S_k after 1, 10, 40 tasks:", geometric[[0, 9, 40]])
print("largest geometric partial sum:", geometric.max())

# The weighted total of actual per-task losses, newest task weight 1.
report = total_cost(None, [], GammaSchedule("geometric", ratio=0.5),
                    losses=[0.9, 0.4, 0.2], beta_k=0.5)
print("gammas", report.gammas, "weighted total", report.weighted_total,
      "beta term", report.beta_term)
