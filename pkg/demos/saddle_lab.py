"""
Saddle-point laboratory
=======================

Sequential play on small analytic games. The leader (x) ascends with a
normalized step, then the follower (theta) descends at the fresh x.
"""
import numpy as np

from saddle_cl.game import StepSchedule, check_saddle, make_game, play_sequential_game

# The quadratic saddle H = theta^2 - x^2 has its equilibrium at the origin.
game = make_game("saddle")
traj = play_sequential_game(game, 1.0, 1.0, StepSchedule(0.2, "inverse"), 200)
norms = [np.hypot(r.x[0], r.theta[0]) for r in traj.rows]
print("iterations until |(x, theta)| < 1e-3:", next(i for i, v in enumerate(norms) if v < 1e-3))

cert = check_saddle(game, (traj.final.x, traj.final.theta), probes=500, radius=0.1)
print("saddle certificate holds:", cert.holds, "worst slack %.2e" % cert.worst_violation)

# Every leader move raises H, and by no more than the current step size alpha.
deltas = np.array([(m.delta, m.alpha) for m in traj.leader_moves()])
print("leader increments in [0, alpha]:", bool(np.all(deltas[:, 0] >= 0)
                                               and np.all(deltas[:, 0] <= deltas[:, 1] + 1e-9)))

# A candidate off the equilibrium fails the certificate on the x side.
bad = check_saddle(game, (np.array([0.5]), np.zeros(1)))
print("offset candidate holds:", bad.holds, "worst x-side slack %.3f" % bad.worst_x_side)

# Bilinear H = x * theta is the classic hard case for alternating play.
# Nothing converges here; we only look at how far the iterates wander.
game = make_game("bilinear")
for seed in range(3):
    x0, t0 = np.random.default_rng(seed).standard_normal(2)
    traj = play_sequential_game(game, x0, t0, StepSchedule(0.05), 2000)
    peak = max(np.hypot(r.x[0], r.theta[0]) for r in traj.rows)
    print(f"bilinear seed {seed}: start norm {np.hypot(x0, t0):.3f}, largest norm {peak:.3f}")

# The same trajectories are available from the command line:
#   saddle-cl saddle-lab saddle --alpha0 0.2 --iters 5000 --out trajectory.csv
