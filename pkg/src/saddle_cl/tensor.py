"""Dense MLP with hand-derived gradients w.r.t. parameters and inputs.

Tensors are plain ``numpy.float64`` arrays. The model is a stack of affine
layers with ReLU or identity activations, trained with softmax cross-entropy.
Everything here is a pure function of its arguments; the only mutable object
is the model, and nothing in this module mutates a model in place.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

ACTIVATIONS = ("relu", "identity")


class DimensionError(ValueError):
    """Shapes of two operands do not chain."""


class DomainError(ValueError):
    """An argument lies outside its admissible set (e.g. a label index)."""


class NumericError(ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


@dataclass
class MlpModel:
    weights: list  # each (out, in)
    biases: list  # each (out,)
    activations: list  # one of ACTIVATIONS per layer

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise DimensionError("weights, biases and activations must have equal length")
        if not self.weights:
            raise DimensionError("model needs at least one layer")
        for l, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f"layer {l}: unknown activation {act!r}")
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionError(f"layer {l}: weight {w.shape} and bias {b.shape} do not agree")
            if l and w.shape[1] != self.weights[l - 1].shape[0]:
                raise DimensionError(
                    f"layer {l} expects input dim {w.shape[1]} "
                    f"but layer {l - 1} outputs {self.weights[l - 1].shape[0]}"
                )

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list:
        """Parameter arrays in canonical order ``[W0, b0, W1, b1, ...]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> "MlpModel":
        ws = [np.array(p, dtype=np.float64) for p in params[0::2]]
        bs = [np.array(p, dtype=np.float64) for p in params[1::2]]
        return MlpModel(ws, bs, list(self.activations))

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def from_flat(self, vec: np.ndarray) -> "MlpModel":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_params:
            raise DimensionError(f"flat vector has {vec.size} entries, model has {self.n_params}")
        out, pos = [], 0
        for p in self.params():
            out.append(vec[pos:pos + p.size].reshape(p.shape))
            pos += p.size
        return self.with_params(out)


@dataclass
class GradientBundle:
    param_grads: list  # congruent with MlpModel.params()
    input_grads: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.param_grads])


def init_mlp(sizes: Sequence[int], seed=0, hidden_activation: str = "relu") -> MlpModel:
    """He-normal weights, zero biases; the output layer is linear."""
    if len(sizes) < 2:
        raise DimensionError("sizes must list at least input and output dims")
    rng = np.random.default_rng(seed)
    ws, bs, acts = [], [], []
    for l, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        ws.append(rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / n_in))
        bs.append(np.zeros(n_out))
        acts.append("identity" if l == len(sizes) - 2 else hidden_activation)
    return MlpModel(ws, bs, acts)


def clone_model(model: MlpModel) -> MlpModel:
    return MlpModel(
        [w.copy() for w in model.weights],
        [b.copy() for b in model.biases],
        list(model.activations),
    )


def _check_batch(model: MlpModel, batch) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != model.in_dim:
        raise DimensionError(
            f"batch shape {batch.shape} does not match model input (n, {model.in_dim})"
        )
    return batch


def _forward_cache(model: MlpModel, batch: np.ndarray):
    acts = [batch]
    pre = []
    h = batch
    for w, b, act in zip(model.weights, model.biases, model.activations):
        # overflow is reported by the finiteness checks of the callers
        with np.errstate(over="ignore", invalid="ignore"):
            z = h @ w.T + b
        pre.append(z)
        h = np.maximum(z, 0.0) if act == "relu" else z
        acts.append(h)
    return pre, acts


def forward(model: MlpModel, batch) -> np.ndarray:
    """Logits of shape ``(n, out_dim)``."""
    batch = _check_batch(model, batch)
    _, acts = _forward_cache(model, batch)
    logits = acts[-1]
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    return logits


def softmax_xent(logits: np.ndarray, targets: np.ndarray, mask: Optional[np.ndarray] = None):
    """Per-sample cross-entropy and softmax probabilities.

    ``mask`` (n, c) marks the output units that take part in each row's
    softmax; inactive units get probability zero.
    """
    if mask is None:
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
    else:
        masked = np.where(mask, logits, -np.inf)
        shifted = masked - masked.max(axis=1, keepdims=True)
        e = np.where(mask, np.exp(shifted), 0.0)
        shifted = np.where(mask, shifted, 0.0)
    z = e.sum(axis=1)
    rows = np.arange(len(targets))
    losses = np.log(z) - shifted[rows, targets]
    probs = e / z[:, None]
    return losses, probs


def _check_targets(targets, n: int, c: int, mask) -> np.ndarray:
    targets = np.asarray(targets)
    if targets.shape != (n,):
        raise DimensionError(f"labels shape {targets.shape} does not match batch size {n}")
    if n == 0:
        raise DomainError("empty batch")
    if targets.min() < 0 or targets.max() >= c:
        raise DomainError(f"labels must lie in [0, {c}); got range [{targets.min()}, {targets.max()}]")
    targets = targets.astype(np.int64)
    if mask is not None and not np.all(mask[np.arange(n), targets]):
        raise DomainError("a label points at an output unit that is masked out for its row")
    return targets


def loss_and_grads(
    model: MlpModel,
    batch,
    labels,
    want_input_grads: bool = False,
    weights: Optional[np.ndarray] = None,
    mask: Optional[np.ndarray] = None,
):
    """Softmax cross-entropy and its exact gradients.

    Parameters
    ----------
    model, batch, labels
        ``batch`` is ``(n, in_dim)``; ``labels`` are output-unit indices.
    want_input_grads
        Also return d loss / d batch.
    weights
        Per-sample weights; the loss is ``sum(weights * per_sample_loss)``.
        ``None`` means the plain batch mean.
    mask
        Boolean ``(n, out_dim)`` selecting the active outputs of each row
        (task-specific heads).

    Returns
    -------
    (loss, GradientBundle)
    """
    batch = _check_batch(model, batch)
    n = batch.shape[0]
    c = model.out_dim
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (n, c):
            raise DimensionError(f"mask shape {mask.shape} != {(n, c)}")
    targets = _check_targets(labels, n, c, mask)
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n,):
            raise DimensionError(f"weights shape {w.shape} != ({n},)")

    pre, acts = _forward_cache(model, batch)
    losses, probs = softmax_xent(acts[-1], targets, mask)
    loss = float(losses.mean()) if weights is None else float(w @ losses)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")

    delta = probs
    delta[np.arange(n), targets] -= 1.0
    delta *= w[:, None]

    grads = [None] * (2 * len(model.weights))
    for l in range(len(model.weights) - 1, -1, -1):
        if model.activations[l] == "relu":
            delta = delta * (pre[l] > 0)
        grads[2 * l] = delta.T @ acts[l]
        grads[2 * l + 1] = delta.sum(axis=0)
        if l or want_input_grads:
            delta = delta @ model.weights[l]
    return loss, GradientBundle(grads, delta if want_input_grads else None)


def apply_update(model: MlpModel, param_grads: Sequence[np.ndarray], step: float,
                 direction: str = "descent") -> MlpModel:
    """Return a new model with ``p - step * g`` for every parameter."""
    if direction != "descent":
        raise ValueError(f"unsupported direction {direction!r}")
    params = model.params()
    if len(param_grads) != len(params):
        raise DimensionError(f"{len(param_grads)} gradient arrays for {len(params)} parameters")
    out = []
    for p, g in zip(params, param_grads):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient; the update would diverge")
        out.append(p - step * g)
    return model.with_params(out)


def predict(model: MlpModel, batch, mask: Optional[np.ndarray] = None) -> np.ndarray:
    logits = forward(model, batch)
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    return logits.argmax(axis=1)


@dataclass
class GradcheckReport:
    draws: int
    components: int
    worst_excess: float  # max over components of |num - ana| - tol; <= 0 means pass
    worst_abs_error: float

    @property
    def passed(self) -> bool:
        return self.worst_excess <= 0.0


def _central_difference(f, arr: np.ndarray, h: float) -> np.ndarray:
    out = np.empty_like(arr)
    flat, grad = arr.reshape(-1), out.reshape(-1)
    for j in range(flat.size):
        keep = flat[j]
        flat[j] = keep + h
        up = f()
        flat[j] = keep - h
        down = f()
        flat[j] = keep
        grad[j] = (up - down) / (2.0 * h)
    return out


def gradcheck(draws: int = 200, seed=0, h: float = 1e-5, rtol: float = 1e-4,
              atol: float = 1e-7, kink_margin: float = 1e-3) -> GradcheckReport:
    """Compare :func:`loss_and_grads` with central differences on random MLPs.

    A component passes when ``|num - ana| <= max(rtol * |ana|, atol)``.
    Draws whose ReLU pre-activations sit within ``kink_margin`` of zero are
    redrawn, since a finite difference across a kink is meaningless.
    """
    rng = np.random.default_rng(seed)
    worst_excess, worst_abs, comps, done = -np.inf, 0.0, 0, 0
    while done < draws:
        depth = int(rng.integers(1, 4))
        sizes = [int(v) for v in rng.integers(1, 6, size=depth + 1)]
        sizes[-1] = max(sizes[-1], 2)
        model = init_mlp(sizes, seed=int(rng.integers(2**31)))
        model = model.with_params([p + 0.1 * rng.standard_normal(p.shape) for p in model.params()])
        n = int(rng.integers(1, 5))
        batch = rng.standard_normal((n, sizes[0]))
        labels = rng.integers(0, sizes[-1], size=n)
        pre, _ = _forward_cache(model, batch)
        if any(np.abs(z).min() < kink_margin for z, act in zip(pre, model.activations)
               if act == "relu"):
            continue
        _, g = loss_and_grads(model, batch, labels, want_input_grads=True)
        params = model.params()

        def f():
            return loss_and_grads(model, batch, labels)[0]

        pairs = [(_central_difference(f, p, h), a) for p, a in zip(params, g.param_grads)]
        pairs.append((_central_difference(f, batch, h), g.input_grads))
        for num, ana in pairs:
            err = np.abs(num - ana)
            tol = np.maximum(rtol * np.abs(ana), atol)
            worst_excess = max(worst_excess, float((err - tol).max()))
            worst_abs = max(worst_abs, float(err.max()))
            comps += err.size
        done += 1
    return GradcheckReport(draws, comps, worst_excess, worst_abs)
