"""Two-player generalization / forgetting game.

Player 1 (the leader) perturbs the input batch to *raise* the cost with a
normalized gradient-ascent step; player 2 (the follower) moves the model
parameters to *lower* it with a plain descent step. On a network the
payoff is the first-order bound

    H ~= beta * J(theta) + [J(theta after zeta descent steps) - J(theta)]
                         + [J(theta; x after zeta ascent steps) - J(theta)]

and on small analytic games it is a closed-form function, which is what the
saddle "lab" below uses to check convergence and the saddle inequalities.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .tensor import MlpModel, NumericError, apply_update, clone_model, loss_and_grads

STATIONARY_FLOOR = 1e-24
DEFAULT_STEP_CAP = 0.25


class StationaryGradientError(ArithmeticError):
    """The leader's gradient vanished, so the normalized step is undefined."""


# ----------------------------------------------------------------- schedules


@dataclass(frozen=True)
class StepSchedule:
    alpha0: float = 0.05
    decay: str = "inverse"  # inverse: a0/(1+c*i); exponential: a0*d**i
    c: float = 0.01
    d: float = 0.999

    def __post_init__(self):
        if self.alpha0 <= 0:
            raise ValueError("alpha0 must be > 0")
        if self.decay == "inverse" and self.c <= 0:
            raise ValueError("inverse decay needs c > 0")
        elif self.decay == "exponential" and not 0 < self.d < 1:
            raise ValueError("exponential decay needs 0 < d < 1")
        elif self.decay not in ("inverse", "exponential"):
            raise ValueError(f"unknown decay {self.decay!r}")

    def __call__(self, i: int) -> float:
        if self.decay == "inverse":
            return self.alpha0 / (1.0 + self.c * i)
        return self.alpha0 * self.d ** i

    def sequence(self, n: int) -> np.ndarray:
        return np.array([self(i) for i in range(n)])


# -------------------------------------------------------------- game state


@dataclass
class GameState:
    x_pert: np.ndarray
    theta: object  # ndarray in the analytic lab, MlpModel on a network
    i: int = 0
    alpha: float = 0.05
    zeta: int = 1

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.zeta < 1:
            raise ValueError("zeta must be >= 1")


def normalized_ascent(x: np.ndarray, g: np.ndarray, alpha: float,
                      step_cap: Optional[float] = None) -> np.ndarray:
    """``x + alpha * g / ||g||^2``.

    With ``step_cap`` the denominator is floored at ``alpha / step_cap``, so
    the move never exceeds a plain ascent step of rate ``step_cap``; without
    it the step length ``alpha/||g||`` blows up as the leader nears its
    maximizer.
    """
    g = np.asarray(g, dtype=np.float64)
    sq = float(np.sum(g * g))
    if not math.isfinite(sq):
        raise NumericError("non-finite leader gradient")
    if sq < STATIONARY_FLOOR:
        raise StationaryGradientError(
            f"||g||^2 = {sq:.3g} below {STATIONARY_FLOOR:g}; the leader's gradient vanished"
        )
    denom = sq if step_cap is None else max(sq, alpha / step_cap)
    return x + (alpha / denom) * g


def player1_step(state: GameState, loss_grad_x, alpha: float,
                 step_cap: Optional[float] = None) -> GameState:
    """Leader move on the perturbed batch; the iteration index is unchanged."""
    x = normalized_ascent(np.asarray(state.x_pert, dtype=np.float64), loss_grad_x, alpha, step_cap)
    return replace(state, x_pert=x, alpha=alpha)


def player2_step(state: GameState, loss_grad_theta, alpha: float) -> GameState:
    """Follower move ``theta - alpha * grad`` (not normalized)."""
    if isinstance(state.theta, MlpModel):
        theta = apply_update(state.theta, loss_grad_theta, alpha)
    else:
        g = np.asarray(loss_grad_theta, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite follower gradient")
        theta = np.asarray(state.theta, dtype=np.float64) - alpha * g
    return replace(state, theta=theta, alpha=alpha)


# ------------------------------------------------------ network estimator


@dataclass
class HEstimate:
    beta_term: float
    forgetting_term: float
    generalization_term: float
    total: float
    base_cost: float = float("nan")


def _cost(model, x, labels, weights, mask) -> float:
    loss, _ = loss_and_grads(model, x, labels, weights=weights, mask=mask)
    if not math.isfinite(loss):
        raise NumericError("non-finite loss inside the H estimate")
    return loss


def ascend_batch(model: MlpModel, x, labels, zeta: int, alpha: float, rule: str = "plain",
                 weights=None, mask=None, step_cap: Optional[float] = None) -> np.ndarray:
    """Run ``zeta`` leader steps on a copy of the batch.

    ``rule="plain"`` moves every sample along the gradient of its own loss
    (``x_s += alpha * d loss_s / d x_s``). ``rule="normalized"`` uses the
    normalized step on the flattened gradient of the weighted batch cost.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    n = len(x)
    for _ in range(zeta):
        if rule == "plain":
            _, gb = loss_and_grads(model, x, labels, want_input_grads=True,
                                   weights=np.ones(n), mask=mask)
            x = x + alpha * gb.input_grads
        elif rule == "normalized":
            _, gb = loss_and_grads(model, x, labels, want_input_grads=True,
                                   weights=weights, mask=mask)
            x = normalized_ascent(x, gb.input_grads, alpha, step_cap)
        else:
            raise ValueError(f"unknown ascent rule {rule!r}")
    if not np.all(np.isfinite(x)):
        raise NumericError("perturbed batch went non-finite")
    return x


def descend_copy(model: MlpModel, x, labels, zeta: int, step: float,
                 weights=None, mask=None) -> MlpModel:
    """Clone the model and take ``zeta`` plain descent steps on the clone."""
    temp = clone_model(model)
    for _ in range(zeta):
        _, gb = loss_and_grads(temp, x, labels, weights=weights, mask=mask)
        temp = apply_update(temp, gb.param_grads, step)
    return temp


def estimate_H(model: MlpModel, x_pert_before, x_pert_after_zeta, batch_labels,
               beta_k: float, zeta: int, descent_step: float, weights=None, mask=None,
               return_temp: bool = False):
    """Finite-difference bound on H at the current parameters.

    The generalization term compares the cost on the ascended batch with the
    cost on the original batch; the forgetting term compares a temporary
    copy of the model, descended ``zeta`` steps on the original batch, with
    the model itself.
    """
    if zeta < 1:
        raise ValueError("zeta must be >= 1")
    x0 = np.asarray(x_pert_before, dtype=np.float64)
    x1 = np.asarray(x_pert_after_zeta, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"perturbed batches differ in shape: {x0.shape} vs {x1.shape}")
    base = _cost(model, x0, batch_labels, weights, mask)
    gen = _cost(model, x1, batch_labels, weights, mask) - base
    temp = descend_copy(model, x0, batch_labels, zeta, descent_step, weights, mask)
    forget = _cost(temp, x0, batch_labels, weights, mask) - base
    beta_term = beta_k * base
    est = HEstimate(beta_term, forget, gen, beta_term + forget + gen, base)
    if not math.isfinite(est.total):
        raise NumericError("non-finite H estimate")
    return (est, temp) if return_temp else est


# ---------------------------------------------------------- analytic lab


@dataclass
class AnalyticGame:
    name: str
    H: Callable[[np.ndarray, np.ndarray], float]
    grad_x: Callable[[np.ndarray, np.ndarray], np.ndarray]
    grad_theta: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dim_x: int = 1
    dim_theta: int = 1
    known_saddle: Optional[tuple] = None


def saddle_quadratic(dim: int = 1) -> AnalyticGame:
    """``||theta||^2 - ||x||^2`` with its saddle at the origin."""
    z = np.zeros(dim)
    return AnalyticGame(
        "saddle",
        lambda x, t: float(t @ t - x @ x),
        lambda x, t: -2.0 * x,
        lambda x, t: 2.0 * t,
        dim, dim, (z, z.copy()),
    )


def bilinear(dim: int = 1) -> AnalyticGame:
    z = np.zeros(dim)
    return AnalyticGame("bilinear", lambda x, t: float(x @ t), lambda x, t: t.copy(),
                        lambda x, t: x.copy(), dim, dim, (z, z.copy()))


def convex_bowl(dim: int = 1) -> AnalyticGame:
    """``||theta||^2 + ||x||^2``: the origin is a minimum in x, not a saddle."""
    return AnalyticGame("bowl", lambda x, t: float(t @ t + x @ x), lambda x, t: 2.0 * x,
                        lambda x, t: 2.0 * t, dim, dim, None)


def concave_x(dim: int = 1) -> AnalyticGame:
    """``-||x||^2``; theta does not enter."""
    z = np.zeros(dim)
    return AnalyticGame("concave", lambda x, t: float(-(x @ x)), lambda x, t: -2.0 * x,
                        lambda x, t: np.zeros_like(t), dim, dim, (z, z.copy()))


def coupled_quartic(dim: int = 1) -> AnalyticGame:
    """``||theta||^2 + 0.5 <x, theta> - sum(x^4) - ||x||^2``; concave in x."""
    z = np.zeros(dim)
    return AnalyticGame(
        "quartic",
        lambda x, t: float(t @ t + 0.5 * x @ t - np.sum(x ** 4) - x @ x),
        lambda x, t: 0.5 * t - 4.0 * x ** 3 - 2.0 * x,
        lambda x, t: 2.0 * t + 0.5 * x,
        dim, dim, (z, z.copy()),
    )


GAMES = {
    "saddle": saddle_quadratic,
    "bilinear": bilinear,
    "bowl": convex_bowl,
    "concave": concave_x,
    "quartic": coupled_quartic,
}


def make_game(name: str, dim: int = 1) -> AnalyticGame:
    try:
        return GAMES[name](dim)
    except KeyError:
        raise ValueError(f"unknown game {name!r}; choose from {sorted(GAMES)}") from None


def game_gradient_error(game: AnalyticGame, x, theta, h: float = 1e-6) -> float:
    """Max relative gap between the analytic gradients and central differences."""
    x = np.asarray(x, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)

    def fd(f, v):
        out = np.empty_like(v)
        for j in range(v.size):
            e = np.zeros_like(v)
            e.flat[j] = h
            out.flat[j] = (f(v + e) - f(v - e)) / (2 * h)
        return out

    gx = fd(lambda v: game.H(v, theta), x)
    gt = fd(lambda v: game.H(x, v), theta)
    worst = 0.0
    for num, ana in ((gx, game.grad_x(x, theta)), (gt, game.grad_theta(x, theta))):
        err = np.abs(num - ana) / np.maximum(1.0, np.abs(ana))
        worst = max(worst, float(err.max(initial=0.0)))
    return worst


@dataclass
class Move:
    i: int
    player: str  # "leader" | "follower" | "hold"
    alpha: float
    x: np.ndarray
    theta: np.ndarray
    H_before: float
    H_after: float

    @property
    def delta(self) -> float:
        return self.H_after - self.H_before


@dataclass
class TrajectoryRow:
    i: int
    alpha: float
    x: np.ndarray
    theta: np.ndarray
    H: float


@dataclass
class Trajectory:
    game: str
    rows: list = field(default_factory=list)
    moves: list = field(default_factory=list)

    @property
    def final(self) -> TrajectoryRow:
        return self.rows[-1]

    def leader_moves(self) -> list:
        return [m for m in self.moves if m.player in ("leader", "hold")]

    def follower_moves(self) -> list:
        return [m for m in self.moves if m.player == "follower"]


def play_sequential_game(game: AnalyticGame, x0, theta0, schedule: StepSchedule, iters: int,
                         step_cap: Optional[float] = DEFAULT_STEP_CAP,
                         on_stationary: str = "hold") -> Trajectory:
    """Alternate leader and follower moves for ``iters`` iterations.

    In iteration ``i`` the leader moves x with the normalized ascent rule at
    ``alpha_i``; the follower then moves theta by descent at ``alpha_i``
    using the gradient at the *new* x. Row 0 is the starting point.

    When the leader's gradient vanishes (it sits on its maximizer)
    ``on_stationary="hold"`` records a null move and lets the follower
    continue; ``"raise"`` propagates :class:`StationaryGradientError`.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if on_stationary not in ("hold", "raise"):
        raise ValueError("on_stationary must be 'hold' or 'raise'")
    x = np.atleast_1d(np.asarray(x0, dtype=np.float64)).copy()
    theta = np.atleast_1d(np.asarray(theta0, dtype=np.float64)).copy()
    traj = Trajectory(game.name)
    traj.rows.append(TrajectoryRow(0, schedule(0), x.copy(), theta.copy(), game.H(x, theta)))
    state = GameState(x, theta, 0, schedule(0), 1)
    for i in range(iters):
        alpha = schedule(i)
        h0 = game.H(state.x_pert, state.theta)
        try:
            state = player1_step(state, game.grad_x(state.x_pert, state.theta), alpha, step_cap)
            player = "leader"
        except StationaryGradientError:
            if on_stationary == "raise":
                raise
            player = "hold"
        h1 = game.H(state.x_pert, state.theta)
        traj.moves.append(Move(i, player, alpha, state.x_pert.copy(), state.theta.copy(), h0, h1))
        state = player2_step(state, game.grad_theta(state.x_pert, state.theta), alpha)
        h2 = game.H(state.x_pert, state.theta)
        traj.moves.append(Move(i, "follower", alpha, state.x_pert.copy(), state.theta.copy(), h1, h2))
        state = replace(state, i=i + 1)
        traj.rows.append(TrajectoryRow(i + 1, alpha, state.x_pert.copy(), state.theta.copy(), h2))
    return traj


@dataclass
class SaddleCertificate:
    holds: bool
    worst_violation: float
    worst_theta_side: float
    worst_x_side: float


def _ball(rng, n: int, dim: int, radius: float) -> np.ndarray:
    d = rng.standard_normal((n, dim))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / dim)
    return d * r[:, None]


def check_saddle(game: AnalyticGame, candidate, probes: int = 500, radius: float = 0.1,
                 seed: int = 0, slack: float = 1e-9) -> SaddleCertificate:
    """Probe ``H(x*, theta) >= H(x*, theta*) >= H(x, theta*)`` around a candidate.

    ``worst_violation`` is the smallest slack over all probes of both
    inequalities (negative means violated).
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    if radius <= 0:
        raise ValueError("radius must be > 0")
    xs, ts = (np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in candidate)
    rng = np.random.default_rng(seed)
    h_star = game.H(xs, ts)
    theta_probes = ts + _ball(rng, probes, ts.size, radius)
    x_probes = xs + _ball(rng, probes, xs.size, radius)
    theta_side = min(game.H(xs, t) - h_star for t in theta_probes)
    x_side = min(h_star - game.H(x, ts) for x in x_probes)
    worst = min(theta_side, x_side)
    return SaddleCertificate(worst >= -slack, worst, theta_side, x_side)
