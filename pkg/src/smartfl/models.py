"""Small differentiable classifiers over flat parameter vectors.

Two architectures: multinomial logistic regression and a one-hidden-layer
MLP (relu or tanh). Forward passes, softmax cross-entropy, and KL
distillation loss all come with hand-derived analytic gradients, checked
against finite differences in the test suite.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

TARGET_ROW_ATOL = 1e-6


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description. Parameter count is fixed by the fields.

    Flat layout: logistic -> [W (input_dim x classes), b (classes)];
    mlp -> [W1 (input_dim x hidden), b1, W2 (hidden x classes), b2].
    """

    kind: str
    input_dim: int
    num_classes: int
    hidden_dim: int = 0
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in ("logistic", "mlp"):
            raise InvalidArgumentError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1:
            raise InvalidArgumentError("input_dim must be positive")
        if self.num_classes < 2:
            raise InvalidArgumentError("num_classes must be at least 2")
        if self.kind == "mlp" and self.hidden_dim < 1:
            raise InvalidArgumentError("mlp requires hidden_dim >= 1")
        if self.kind == "logistic" and self.hidden_dim != 0:
            raise InvalidArgumentError("logistic model takes hidden_dim = 0")
        if self.activation not in ("relu", "tanh"):
            raise InvalidArgumentError(f"unknown activation {self.activation!r}")

    def param_count(self) -> int:
        if self.kind == "logistic":
            return self.input_dim * self.num_classes + self.num_classes
        return (
            self.input_dim * self.hidden_dim
            + self.hidden_dim
            + self.hidden_dim * self.num_classes
            + self.num_classes
        )


@dataclass
class Batch:
    """A minibatch: inputs plus hard labels and/or soft target rows."""

    inputs: np.ndarray
    labels: np.ndarray | None = None
    target_probs: np.ndarray | None = None

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    mean_loss: float


def _inputs_of(batch) -> np.ndarray:
    x = getattr(batch, "inputs", batch)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidArgumentError(f"inputs must be a 2-D matrix, got shape {x.shape}")
    return x


def _unpack(spec: ModelSpec, params: np.ndarray):
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.param_count(),):
        raise InvalidArgumentError(
            f"params length {params.shape} does not match spec ({spec.param_count()})"
        )
    d, c, h = spec.input_dim, spec.num_classes, spec.hidden_dim
    if spec.kind == "logistic":
        w = params[: d * c].reshape(d, c)
        b = params[d * c :]
        return w, b
    o1 = d * h
    o2 = o1 + h
    o3 = o2 + h * c
    return (
        params[:o1].reshape(d, h),
        params[o1:o2],
        params[o2:o3].reshape(h, c),
        params[o3:],
    )


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    if spec.kind == "logistic":
        a = 1.0 / np.sqrt(spec.input_dim)
        w = rng.uniform(-a, a, size=(spec.input_dim, spec.num_classes))
        return np.concatenate([w.ravel(), np.zeros(spec.num_classes)])
    a1 = 1.0 / np.sqrt(spec.input_dim)
    a2 = 1.0 / np.sqrt(spec.hidden_dim)
    w1 = rng.uniform(-a1, a1, size=(spec.input_dim, spec.hidden_dim))
    w2 = rng.uniform(-a2, a2, size=(spec.hidden_dim, spec.num_classes))
    return np.concatenate(
        [w1.ravel(), np.zeros(spec.hidden_dim), w2.ravel(), np.zeros(spec.num_classes)]
    )


def forward(spec: ModelSpec, params: np.ndarray, batch) -> np.ndarray:
    """Logits matrix (batch x num_classes)."""
    x = _inputs_of(batch)
    if x.shape[1] != spec.input_dim:
        raise InvalidArgumentError(
            f"input width {x.shape[1]} does not match spec input_dim {spec.input_dim}"
        )
    if spec.kind == "logistic":
        w, b = _unpack(spec, params)
        return x @ w + b
    w1, b1, w2, b2 = _unpack(spec, params)
    pre = x @ w1 + b1
    hidden = np.maximum(pre, 0.0) if spec.activation == "relu" else np.tanh(pre)
    return hidden @ w2 + b2


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _backprop(spec: ModelSpec, params: np.ndarray, x: np.ndarray, dlogits: np.ndarray) -> np.ndarray:
    """Gradient of the loss w.r.t. flat params, given dL/dlogits."""
    if spec.kind == "logistic":
        dw = x.T @ dlogits
        db = dlogits.sum(axis=0)
        return np.concatenate([dw.ravel(), db])
    w1, b1, w2, _ = _unpack(spec, params)
    pre = x @ w1 + b1
    hidden = np.maximum(pre, 0.0) if spec.activation == "relu" else np.tanh(pre)
    dw2 = hidden.T @ dlogits
    db2 = dlogits.sum(axis=0)
    dhidden = dlogits @ w2.T
    if spec.activation == "relu":
        dpre = dhidden * (pre > 0.0)
    else:
        dpre = dhidden * (1.0 - hidden * hidden)
    dw1 = x.T @ dpre
    db1 = dpre.sum(axis=0)
    return np.concatenate([dw1.ravel(), db1, dw2.ravel(), db2])


def ce_loss_and_grad(spec: ModelSpec, params: np.ndarray, batch) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its analytic parameter gradient."""
    x = _inputs_of(batch)
    labels = getattr(batch, "labels", None)
    if labels is None:
        raise InvalidArgumentError("cross-entropy loss requires a labeled batch")
    y = np.asarray(labels)
    if y.shape != (x.shape[0],):
        raise InvalidArgumentError("labels must be one integer per input row")
    if y.size and (y.min() < 0 or y.max() >= spec.num_classes):
        raise InvalidArgumentError("label outside [0, num_classes)")
    n = x.shape[0]
    logits = forward(spec, params, x)
    logp = _log_softmax(logits)
    loss = -float(logp[np.arange(n), y].mean())
    dlogits = softmax(logits)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    return loss, _backprop(spec, params, x, dlogits)


def kl_loss_and_grad(
    spec: ModelSpec, params: np.ndarray, batch, temperature: float = 1.0
) -> tuple[float, np.ndarray]:
    """Mean KL(target || softmax(logits / temperature)) and parameter gradient."""
    if temperature <= 0.0:
        raise InvalidArgumentError("temperature must be positive")
    x = _inputs_of(batch)
    targets = getattr(batch, "target_probs", None)
    if targets is None:
        raise InvalidArgumentError("KL loss requires target_probs")
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != (x.shape[0], spec.num_classes):
        raise InvalidArgumentError("target_probs shape must be batch x num_classes")
    if np.any(t < 0.0) or np.any(np.abs(t.sum(axis=1) - 1.0) > TARGET_ROW_ATOL):
        raise InvalidArgumentError("target_probs rows must be probability distributions")
    n = x.shape[0]
    logits = forward(spec, params, x) / temperature
    logq = _log_softmax(logits)
    entropy_term = np.where(t > 0.0, t * np.log(np.where(t > 0.0, t, 1.0)), 0.0).sum()
    loss = float((entropy_term - (t * logq).sum()) / n)
    dlogits = (softmax(logits) - t) / (n * temperature)
    return loss, _backprop(spec, params, x, dlogits)


def evaluate(spec: ModelSpec, params: np.ndarray, dataset) -> EvalReport:
    """Exact accuracy (argmax, lowest class index on ties) and mean CE loss."""
    x = _inputs_of(dataset)
    labels = getattr(dataset, "labels", None)
    if labels is None:
        raise InvalidArgumentError("evaluate requires a labeled dataset")
    y = np.asarray(labels)
    if x.shape[0] == 0:
        raise InvalidArgumentError("evaluate requires a non-empty dataset")
    logits = forward(spec, params, x)
    preds = np.argmax(logits, axis=1)  # first max = lowest class index
    acc = float(np.count_nonzero(preds == y)) / x.shape[0]
    logp = _log_softmax(logits)
    loss = -float(logp[np.arange(x.shape[0]), y].mean())
    return EvalReport(accuracy=acc, mean_loss=loss)
