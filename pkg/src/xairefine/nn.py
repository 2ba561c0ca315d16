"""Small affine+ReLU classifier with hand-written reverse-mode gradients.

A model is a stack of affine layers ``z_l = h_{l-1} W_l^T + b_l`` with a ReLU
between consecutive layers and raw logits at the end. Weight matrices are
stored as ``(out, in)``. Everything is float64.

Besides the usual parameter gradients of the cross-entropy, the module exposes
exact input gradients of single logits and the parameter gradient of a
weighted squared input-gradient penalty (a "double backward"), which the
sensitivity regulariser needs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .errors import FormatError, InputError, NumericError


@dataclass(frozen=True)
class ModelState:
    """Parameters of a feedforward classifier ``R^d -> R^K``."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def __post_init__(self):
        if len(self.weights) == 0 or len(self.weights) != len(self.biases):
            raise InputError("model needs at least one layer and one bias per layer")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise InputError(f"layer {i}: weight {W.shape} and bias {b.shape} do not match")
            if i > 0 and W.shape[1] != self.weights[i - 1].shape[0]:
                raise InputError(f"layer {i}: input width {W.shape[1]} != previous output "
                                 f"{self.weights[i - 1].shape[0]}")
        if self.num_classes < 2:
            raise InputError("num_classes must be >= 2")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self):
        """Flat list ``[W_1, b_1, W_2, b_2, ...]``."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "ModelState":
        return ModelState([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def equals(self, other: "ModelState") -> bool:
        """Bit-exact parameter equality."""
        if self.n_layers != other.n_layers:
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.params(), other.params()))


@dataclass
class GradientBundle:
    """Gradients mirroring a model's parameters, plus the input gradient."""

    weight_grads: List[np.ndarray]
    bias_grads: List[np.ndarray]
    input_grad: Optional[np.ndarray] = None
    loss: float = float("nan")

    def params(self):
        out = []
        for W, b in zip(self.weight_grads, self.bias_grads):
            out += [W, b]
        return out

    def __add__(self, other: "GradientBundle") -> "GradientBundle":
        return GradientBundle(
            [a + b for a, b in zip(self.weight_grads, other.weight_grads)],
            [a + b for a, b in zip(self.bias_grads, other.bias_grads)],
            None,
            self.loss + other.loss,
        )

    def scaled(self, c: float) -> "GradientBundle":
        return GradientBundle([c * g for g in self.weight_grads],
                              [c * g for g in self.bias_grads], None, c * self.loss)


def init_model(input_dim: int, hidden: Sequence[int], num_classes: int, seed=0) -> ModelState:
    """Glorot-uniform weights from a seeded generator, zero biases."""
    rng = np.random.default_rng(seed)
    dims = [int(input_dim), *[int(h) for h in hidden], int(num_classes)]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-s, s, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return ModelState(weights, biases)


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class _Cache:
    acts: list          # h_0 (input), h_1, ..., h_{L-1}
    pre: list           # z_1, ..., z_L (z_L are the logits)
    single: bool = False
    extra: dict = field(default_factory=dict)


def _as_batch(model: ModelState, x) -> tuple:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise InputError(f"expected input of length {model.input_dim}, got shape {x.shape}")
    return X, single


def _forward_cache(model: ModelState, X: np.ndarray, check=True) -> _Cache:
    acts, pre = [X], []
    h = X
    last = model.n_layers - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W.T + b
        if check and not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite pre-activation in layer {i}", layer=i)
        pre.append(z)
        if i < last:
            h = np.maximum(z, 0.0)
            acts.append(h)
    return _Cache(acts, pre)


def forward(model: ModelState, x) -> np.ndarray:
    """Logits for one input ``[d] -> [K]`` or a batch ``[n, d] -> [n, K]``."""
    X, single = _as_batch(model, x)
    logits = _forward_cache(model, X).pre[-1]
    return logits[0] if single else logits


def predict(model: ModelState, X) -> np.ndarray:
    """Arg-max class for one input or a batch."""
    return np.argmax(forward(model, X), axis=-1)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_labels(labels, K):
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= K):
        raise InputError(f"label out of range [0, {K})")
    return labels.astype(np.int64)


def cross_entropy(logits, label) -> float:
    """``-log softmax(logits)[label]`` with max-subtraction."""
    logits = np.asarray(logits, dtype=np.float64)
    label = int(_check_labels(label, logits.shape[-1]))
    return float(-_log_softmax(logits)[label])


def cross_entropy_batch(logits: np.ndarray, labels) -> np.ndarray:
    """Per-row cross-entropy for a ``[n, K]`` logit matrix."""
    labels = _check_labels(labels, logits.shape[1])
    return -_log_softmax(logits)[np.arange(len(labels)), labels]


def _backprop(model: ModelState, cache: _Cache, dlogits: np.ndarray, need_params=True):
    """Push ``dL/dlogits`` back through the network.

    Returns (weight grads, bias grads, input grad rows). Parameter grads are
    summed over the batch. The ReLU derivative at exactly zero is 0.
    """
    L = model.n_layers
    dW = [None] * L
    db = [None] * L
    dz = dlogits
    for i in range(L - 1, -1, -1):
        if need_params:
            dW[i] = dz.T @ cache.acts[i]
            db[i] = dz.sum(axis=0)
        dh = dz @ model.weights[i]
        if not np.all(np.isfinite(dh)):
            raise NumericError(f"non-finite gradient in layer {i}", layer=i)
        if i > 0:
            dz = dh * (cache.pre[i - 1] > 0)
    return dW, db, dh


def backward(model: ModelState, x, label) -> GradientBundle:
    """Exact gradients of ``cross_entropy(forward(model, x), label)``.

    With a batch ``x`` of shape ``[n, d]`` and ``n`` labels the loss is the batch
    mean; ``input_grad`` then holds one row per example (the gradient of the
    mean loss w.r.t. that row, i.e. already divided by ``n``).
    """
    X, single = _as_batch(model, x)
    labels = np.atleast_1d(_check_labels(label, model.num_classes))
    if len(labels) != X.shape[0]:
        raise InputError("one label per input row required")
    cache = _forward_cache(model, X)
    logits = cache.pre[-1]
    n = X.shape[0]
    p = softmax(logits)
    loss = float(cross_entropy_batch(logits, labels).mean())
    dlogits = p
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    dW, db, dx = _backprop(model, cache, dlogits)
    return GradientBundle(dW, db, dx[0] if single else dx, loss)


def input_loss_gradients(model: ModelState, X, labels) -> np.ndarray:
    """Per-row ``d CE(f(x_i), y_i) / d x_i`` (not divided by the batch size)."""
    X, single = _as_batch(model, X)
    labels = np.atleast_1d(_check_labels(labels, model.num_classes))
    cache = _forward_cache(model, X)
    dlogits = softmax(cache.pre[-1])
    dlogits[np.arange(X.shape[0]), labels] -= 1.0
    _, _, dx = _backprop(model, cache, dlogits, need_params=False)
    return dx[0] if single else dx


def logit_gradient(model: ModelState, x, k) -> np.ndarray:
    """``grad_x f_k(x)``. Batched when ``x`` is 2-D (``k`` scalar or per row)."""
    X, single = _as_batch(model, x)
    k = np.broadcast_to(_check_labels(k, model.num_classes), (X.shape[0],))
    cache = _forward_cache(model, X)
    dlogits = np.zeros_like(cache.pre[-1])
    dlogits[np.arange(X.shape[0]), k] = 1.0
    _, _, dx = _backprop(model, cache, dlogits, need_params=False)
    return dx[0] if single else dx


def logit_jacobian(model: ModelState, x) -> np.ndarray:
    """Full ``[K, d]`` Jacobian of the logits at a single input."""
    x = np.asarray(x, dtype=np.float64)
    K = model.num_classes
    return logit_gradient(model, np.repeat(x[None, :], K, axis=0), np.arange(K))


def input_gradient_penalty(model: ModelState, X, classes, coef) -> GradientBundle:
    """Value and parameter gradient of ``sum_ij coef_ij * (d f_{c_i}(x_i) / d x_ij)^2``.

    ``coef`` broadcasts against ``[n, d]``. Inside a linear region the ReLU
    pattern does not depend on the parameters, so the input gradient is a
    product of weight matrices and the biases get zero gradient. The returned
    ``loss`` field carries the penalty value.
    """
    X, _ = _as_batch(model, X)
    n = X.shape[0]
    classes = np.broadcast_to(_check_labels(classes, model.num_classes), (n,))
    coef = np.broadcast_to(np.asarray(coef, dtype=np.float64), X.shape)
    cache = _forward_cache(model, X)
    L = model.n_layers

    # backward pass for the logit gradient, keeping every delta
    deltas = [None] * L
    dz = np.zeros_like(cache.pre[-1])
    dz[np.arange(n), classes] = 1.0
    for i in range(L - 1, -1, -1):
        deltas[i] = dz
        dh = dz @ model.weights[i]
        if i > 0:
            dz = dh * (cache.pre[i - 1] > 0)
    g = dh
    value = float(np.sum(coef * g * g))

    # adjoint of the linear chain g = delta_1 W_1, delta_i = (delta_{i+1} W_{i+1}) * D_i
    dW = [None] * L
    db = [np.zeros_like(b) for b in model.biases]
    adj = 2.0 * coef * g
    for i in range(L):
        dW[i] = deltas[i].T @ adj
        if i < L - 1:
            adj = (adj @ model.weights[i].T) * (cache.pre[i] > 0)
    return GradientBundle(dW, db, None, value)


def sgd_step(model: ModelState, grads: GradientBundle, lr: float) -> ModelState:
    """``theta <- theta - lr * g`` for every parameter; returns a new model."""
    if lr < 0:
        raise InputError("learning rate must be non-negative")
    for i, g in enumerate(grads.params()):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {i}", layer=i // 2)
    W = [w - lr * g for w, g in zip(model.weights, grads.weight_grads)]
    b = [c - lr * g for c, g in zip(model.biases, grads.bias_grads)]
    return ModelState(W, b)


# ---------------------------------------------------------------------------
# serialization


def model_to_dict(model: ModelState) -> dict:
    return {
        "layers": [
            {"rows": int(W.shape[0]), "cols": int(W.shape[1]),
             "weights": [float(v) for v in W.ravel()], "bias": [float(v) for v in b]}
            for W, b in zip(model.weights, model.biases)
        ],
        "input_dim": model.input_dim,
        "num_classes": model.num_classes,
    }


def model_from_dict(obj: dict) -> ModelState:
    try:
        weights, biases = [], []
        for layer in obj["layers"]:
            rows, cols = int(layer["rows"]), int(layer["cols"])
            w = np.asarray(layer["weights"], dtype=np.float64)
            if w.size != rows * cols:
                raise FormatError(f"layer has {w.size} weights, expected {rows}x{cols}")
            weights.append(w.reshape(rows, cols))
            biases.append(np.asarray(layer["bias"], dtype=np.float64))
        model = ModelState(weights, biases)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed model record: {exc}") from exc
    except InputError as exc:
        raise FormatError(str(exc)) from exc
    if model.input_dim != obj["input_dim"] or model.num_classes != obj["num_classes"]:
        raise FormatError("input_dim/num_classes disagree with the layer shapes")
    return model


def save_model(model: ModelState, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path) -> ModelState:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return model_from_dict(obj)
