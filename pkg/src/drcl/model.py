"""Multi-head MLP classifier over a flat parameter vector.

The network is a shared trunk of dense layers followed by one dense output
layer ("head") per task. All weights live in a single 1-D float64 array so
that optimizers and metrics can treat the model as a generic differentiable
function of ``x in R^d``. The mapping between the flat array and the layer
matrices is given by :func:`layout`:

    trunk layer 0, trunk layer 1, ..., head 0, head 1, ...

each stored as a row-major ``(fan_in, fan_out)`` weight block followed by a
``fan_out`` bias block. Forward pass is ``h = act(h @ W + b)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DataError, NumericalError

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = (256, 128)
    num_heads: int = 1
    classes_per_head: int = 2
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if int(self.input_dim) < 1:
            raise ConfigError(f"input_dim must be positive, got {self.input_dim}")
        if any(h < 1 for h in self.hidden_dims):
            raise ConfigError(f"hidden_dims must be positive, got {list(self.hidden_dims)}")
        if int(self.num_heads) < 1:
            raise ConfigError(f"num_heads must be >= 1, got {self.num_heads}")
        if int(self.classes_per_head) < 1:
            raise ConfigError(f"classes_per_head must be >= 1, got {self.classes_per_head}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def n_params(self) -> int:
        return sum(s.size for s in layout(self))


class LayerShape(NamedTuple):
    rows: int
    cols: int
    has_bias: bool = True

    @property
    def size(self) -> int:
        return self.rows * self.cols + (self.cols if self.has_bias else 0)


def layout(spec: NetworkSpec) -> list[LayerShape]:
    """Ordered layer descriptors: trunk layers first, then one per head."""
    dims = (spec.input_dim,) + spec.hidden_dims
    shapes = [LayerShape(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
    shapes += [LayerShape(dims[-1], spec.classes_per_head)] * spec.num_heads
    return shapes


def layer_names(spec: NetworkSpec) -> list[str]:
    names = [f"layer{i}" for i in range(len(spec.hidden_dims))]
    return names + [f"head{h}" for h in range(spec.num_heads)]


def layer_slices(spec: NetworkSpec) -> list[slice]:
    """Slice of the flat vector occupied by each layer (weights and bias)."""
    out, start = [], 0
    for s in layout(spec):
        out.append(slice(start, start + s.size))
        start += s.size
    return out


def unflatten(params: np.ndarray, spec: NetworkSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split ``params`` into ``(W, b)`` views, one pair per layer."""
    params = np.asarray(params)
    if params.ndim != 1 or params.size != spec.n_params:
        raise DataError(f"expected flat vector of length {spec.n_params}, got shape {params.shape}")
    layers, start = [], 0
    for s in layout(spec):
        w = params[start:start + s.rows * s.cols].reshape(s.rows, s.cols)
        start += s.rows * s.cols
        b = params[start:start + s.cols]
        start += s.cols
        layers.append((w, b))
    return layers


def flatten(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([np.ravel(w), np.ravel(b)]) for w, b in layers])


def init_params(spec: NetworkSpec, seed: int) -> np.ndarray:
    """Draw initial parameters.

    Weights are fan-in scaled uniform, ``U(-a, a)`` with ``a = sqrt(6 / fan_in)``
    for relu (He) and ``a = sqrt(3 / fan_in)`` for tanh (LeCun). Biases are zero.
    """
    rng = np.random.default_rng(seed)
    gain = 6.0 if spec.activation == "relu" else 3.0
    blocks = []
    for s in layout(spec):
        bound = np.sqrt(gain / s.rows)
        blocks.append(rng.uniform(-bound, bound, size=s.rows * s.cols))
        blocks.append(np.zeros(s.cols))
    return np.concatenate(blocks)


@dataclass(frozen=True)
class Batch:
    """Labelled samples routed to one output head."""

    inputs: np.ndarray
    labels: np.ndarray
    task_id: int = 0
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2:
            raise DataError(f"inputs must be 2-D, got shape {inputs.shape}")
        if labels.shape != (inputs.shape[0],):
            raise DataError(f"{inputs.shape[0]} inputs but labels have shape {labels.shape}")
        if int(self.task_id) < 0:
            raise DataError(f"task_id must be >= 0, got {self.task_id}")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.inputs[idx], self.labels[idx], self.task_id)


def _check_batch(batch: Batch, spec: NetworkSpec, allow_empty=False):
    if len(batch) == 0 and not allow_empty:
        raise DataError("empty batch")
    if batch.inputs.shape[1] != spec.input_dim:
        raise DataError(f"inputs have {batch.inputs.shape[1]} features, network expects {spec.input_dim}")
    if batch.task_id >= spec.num_heads:
        raise DataError(f"task_id {batch.task_id} out of range for {spec.num_heads} heads")
    if len(batch) and (batch.labels.min() < 0 or batch.labels.max() >= spec.classes_per_head):
        bad = batch.labels[(batch.labels < 0) | (batch.labels >= spec.classes_per_head)][0]
        raise DataError(f"label {bad} out of range [0, {spec.classes_per_head})")


def _act(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(z, a, kind):
    return (z > 0).astype(z.dtype) if kind == "relu" else 1.0 - a * a


def _forward(params, inputs, task_id, spec):
    layers = unflatten(params, spec)
    n_trunk = len(spec.hidden_dims)
    acts, pre = [inputs], []
    h = inputs
    for i in range(n_trunk):
        w, b = layers[i]
        z = h @ w + b
        h = _act(z, spec.activation)
        if not np.all(np.isfinite(h)):
            raise NumericalError(f"non-finite activation in layer {i}", layer=i)
        pre.append(z)
        acts.append(h)
    w, b = layers[n_trunk + task_id]
    logits = h @ w + b
    if not np.all(np.isfinite(logits)):
        raise NumericalError(f"non-finite logits in layer {n_trunk + task_id}", layer=n_trunk + task_id)
    return logits, (layers, acts, pre)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def predict_logits(params: np.ndarray, inputs: np.ndarray, task_id: int, spec: NetworkSpec) -> np.ndarray:
    return _forward(params, np.asarray(inputs, dtype=np.float64), task_id, spec)[0]


def _backward(delta, cache, task_id, spec, square=False):
    """Backpropagate per-sample output deltas into a flat gradient.

    With ``square=True`` returns the sum over samples of the *squared*
    per-sample gradients; this uses the identity
    ``sum_s (a_s delta_s^T)**2 = (a**2)^T (delta**2)`` for dense layers.
    """
    layers, acts, pre = cache
    n_trunk = len(spec.hidden_dims)
    grads = [(np.zeros_like(w), np.zeros_like(b)) for w, b in layers]

    def contribution(a, d):
        if square:
            return (a * a).T @ (d * d), (d * d).sum(axis=0)
        return a.T @ d, d.sum(axis=0)

    grads[n_trunk + task_id] = contribution(acts[-1], delta)
    d = delta
    for i in range(n_trunk - 1, -1, -1):
        w_next = layers[i + 1][0] if i + 1 < n_trunk else layers[n_trunk + task_id][0]
        d = (d @ w_next.T) * _act_grad(pre[i], acts[i + 1], spec.activation)
        grads[i] = contribution(acts[i], d)
    return flatten(grads)


def loss_and_grad(params: np.ndarray, batch: Batch, spec: NetworkSpec) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy on the batch's head, and its gradient.

    Parameters belonging to the other heads receive an exactly zero gradient.
    """
    _check_batch(batch, spec)
    logits, cache = _forward(params, batch.inputs, batch.task_id, spec)
    logp = log_softmax(logits)
    n = len(batch)
    rows = np.arange(n)
    loss = -logp[rows, batch.labels].mean()
    delta = np.exp(logp)
    delta[rows, batch.labels] -= 1.0
    delta /= n
    return float(loss), _backward(delta, cache, batch.task_id, spec)


def squared_score_sum(params: np.ndarray, batch: Batch, spec: NetworkSpec, labels=None) -> np.ndarray:
    """``sum_s (d log p(v_s | u_s) / dx)**2`` elementwise, for labels ``v_s``.

    ``labels`` defaults to the batch labels (empirical Fisher).
    """
    _check_batch(batch, spec)
    labels = batch.labels if labels is None else np.asarray(labels, dtype=np.int64)
    logits, cache = _forward(params, batch.inputs, batch.task_id, spec)
    delta = np.exp(log_softmax(logits))
    delta[np.arange(len(batch)), labels] -= 1.0
    return _backward(delta, cache, batch.task_id, spec, square=True)


def predictive_probs(params: np.ndarray, batch: Batch, spec: NetworkSpec) -> np.ndarray:
    _check_batch(batch, spec)
    return np.exp(log_softmax(predict_logits(params, batch.inputs, batch.task_id, spec)))


def accuracy(params: np.ndarray, dataset: Batch, spec: NetworkSpec) -> float:
    """Fraction of samples whose argmax logit equals the label.

    Ties go to the lowest class index (``np.argmax`` semantics).
    """
    _check_batch(dataset, spec)
    logits = predict_logits(params, dataset.inputs, dataset.task_id, spec)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))
