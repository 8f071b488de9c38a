"""Dense multi-class classifiers with exact gradients in both directions.

Parameters live in a single flat float64 vector so that federated averaging,
serialization, and finite-difference checks stay trivial. Gradients with
respect to parameters drive training; gradients with respect to inputs drive
attack crafting and decision-boundary probing. Every operation is a pure
function of immutable values, so they are safe to call from concurrent
workers, and all arithmetic is 64-bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ACTIVATIONS",
    "ArchitectureSpec",
    "ParamVector",
    "LabeledBatch",
    "init_params",
    "forward",
    "loss",
    "grad_params",
    "grad_input",
    "sgd_step",
    "predict",
    "ModelSurface",
    "save_params",
    "load_params",
]

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ArchitectureSpec:
    """Shape of a fully-connected classifier.

    ``hidden_dims`` may be empty, which yields a purely linear model. The
    flat parameter layout is, layer by layer, the weight matrix in row-major
    order followed by the bias vector.
    """

    input_dim: int
    hidden_dims: tuple = ()
    num_classes: int = 2
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if any(d < 1 for d in self.hidden_dims):
            raise ValueError("every hidden dim must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def layer_dims(self) -> tuple:
        return (self.input_dim, *self.hidden_dims, self.num_classes)

    @property
    def param_count(self) -> int:
        dims = self.layer_dims
        return int(sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1)))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "num_classes": self.num_classes,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ArchitectureSpec":
        return cls(
            input_dim=int(data["input_dim"]),
            hidden_dims=tuple(data["hidden_dims"]),
            num_classes=int(data["num_classes"]),
            activation=str(data["activation"]),
        )


def _read_only(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64)
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Immutable flat parameter vector tied to its architecture."""

    values: np.ndarray
    spec: ArchitectureSpec

    def __post_init__(self):
        values = _read_only(np.ravel(self.values))
        if values.size != self.spec.param_count:
            raise ValueError(
                f"expected {self.spec.param_count} parameters for {self.spec}, got {values.size}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("parameter values must be finite")
        object.__setattr__(self, "values", values)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.spec)


@dataclass(frozen=True, eq=False)
class LabeledBatch:
    """A batch of feature rows and integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if inputs.shape[0] != labels.shape[0]:
            raise ValueError(
                f"inputs have {inputs.shape[0]} rows but labels have {labels.shape[0]}"
            )
        if inputs.size and not np.all(np.isfinite(inputs)):
            raise ValueError("batch inputs must be finite")
        if labels.size and labels.min() < 0:
            raise ValueError("labels must be non-negative")
        inputs = _read_only(inputs)
        labels = np.array(labels)
        labels.flags.writeable = False
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, indices) -> "LabeledBatch":
        return LabeledBatch(self.inputs[indices], self.labels[indices])


def _unpack(values: np.ndarray, spec: ArchitectureSpec):
    dims = spec.layer_dims
    layers = []
    offset = 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weight = values[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        bias = values[offset : offset + fan_out]
        offset += fan_out
        layers.append((weight, bias))
    return layers


def _activate(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(pre, 0.0)
    return np.tanh(pre)


def _activation_grad(name: str, activated: np.ndarray) -> np.ndarray:
    # Both derivatives are recoverable from the post-activation value alone.
    if name == "relu":
        return (activated > 0.0).astype(np.float64)
    return 1.0 - activated**2


def _check_batch(params: ParamVector, batch: LabeledBatch):
    if batch.input_dim != params.spec.input_dim:
        raise ValueError(
            f"batch input_dim {batch.input_dim} does not match model input_dim "
            f"{params.spec.input_dim}"
        )
    if len(batch) and batch.labels.max() >= params.spec.num_classes:
        raise ValueError("label out of range for model num_classes")


def _forward_cached(values: np.ndarray, spec: ArchitectureSpec, inputs: np.ndarray):
    """Forward pass keeping each layer's input for backpropagation."""
    layers = _unpack(values, spec)
    layer_inputs = [inputs]
    hidden = inputs
    for weight, bias in layers[:-1]:
        hidden = _activate(spec.activation, hidden @ weight + bias)
        layer_inputs.append(hidden)
    weight, bias = layers[-1]
    logits = hidden @ weight + bias
    return logits, layers, layer_inputs


def _softmax_terms(logits: np.ndarray, labels: np.ndarray):
    """Per-example cross-entropy and softmax rows, log-sum-exp stabilized."""
    shifted = logits - logits.max(axis=1, keepdims=True) if len(labels) else logits
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    per_example = np.log(total).ravel() - shifted[np.arange(len(labels)), labels]
    probs = exp / np.maximum(total, np.finfo(np.float64).tiny)
    return per_example, probs


def _resolve_weights(sample_weights, count: int) -> np.ndarray:
    if sample_weights is None:
        return np.full(count, 1.0 / count) if count else np.zeros(0)
    weights = np.asarray(sample_weights, dtype=np.float64).ravel()
    if weights.size != count:
        raise ValueError("sample_weights length must match batch size")
    return weights


def init_params(spec: ArchitectureSpec, seed: int) -> ParamVector:
    """Seeded initialization: uniform weights in [-a, a] with
    a = sqrt(6 / (fan_in + fan_out)), biases zero."""
    rng = np.random.default_rng(seed)
    chunks = []
    dims = spec.layer_dims
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return ParamVector(np.concatenate(chunks), spec)


def forward(params: ParamVector, batch: LabeledBatch) -> np.ndarray:
    """Logits of shape (batch, num_classes)."""
    _check_batch(params, batch)
    logits, _, _ = _forward_cached(params.values, params.spec, batch.inputs)
    return logits


def loss(params: ParamVector, batch: LabeledBatch, sample_weights=None) -> float:
    """Weighted cross-entropy; with no weights this is the batch mean."""
    _check_batch(params, batch)
    per_example, _ = _softmax_terms(forward(params, batch), batch.labels)
    weights = _resolve_weights(sample_weights, len(batch))
    return float(weights @ per_example)


def _backprop(params: ParamVector, batch: LabeledBatch, sample_weights=None):
    _check_batch(params, batch)
    spec = params.spec
    logits, layers, layer_inputs = _forward_cached(params.values, spec, batch.inputs)
    _, probs = _softmax_terms(logits, batch.labels)
    weights = _resolve_weights(sample_weights, len(batch))

    delta = probs.copy()
    delta[np.arange(len(batch)), batch.labels] -= 1.0
    delta *= weights[:, None]

    grad_chunks = []
    for index in range(len(layers) - 1, -1, -1):
        weight, _ = layers[index]
        layer_in = layer_inputs[index]
        grad_w = layer_in.T @ delta
        grad_b = delta.sum(axis=0)
        grad_chunks.append(grad_b)
        grad_chunks.append(grad_w.ravel())
        delta = delta @ weight.T
        if index > 0:
            delta = delta * _activation_grad(spec.activation, layer_in)

    flat = np.concatenate(grad_chunks[::-1])
    return flat, delta


def grad_params(params: ParamVector, batch: LabeledBatch, sample_weights=None) -> np.ndarray:
    """Exact gradient of :func:`loss` with respect to the flat parameters."""
    flat, _ = _backprop(params, batch, sample_weights)
    return flat


def grad_input(params: ParamVector, batch: LabeledBatch, sample_weights=None) -> np.ndarray:
    """Exact gradient of :func:`loss` with respect to each input row."""
    _, d_inputs = _backprop(params, batch, sample_weights)
    return d_inputs


def sgd_step(params: ParamVector, batch: LabeledBatch, lr: float) -> ParamVector:
    if lr < 0:
        raise ValueError("lr must be non-negative")
    return params.with_values(params.values - lr * grad_params(params, batch))


def predict(params: ParamVector, inputs: np.ndarray) -> np.ndarray:
    """Argmax labels; ties break toward the lowest class index."""
    batch = LabeledBatch(inputs, np.zeros(np.atleast_2d(inputs).shape[0], dtype=np.int64))
    return np.argmax(forward(params, batch), axis=1)


class ModelSurface:
    """Attack- and probe-facing view of one classifier.

    Exposes predictions plus the per-example input gradient of its own
    cross-entropy, which is everything PGD and boundary probes need.
    """

    def __init__(self, params: ParamVector):
        self.params = params

    @property
    def input_dim(self) -> int:
        return self.params.spec.input_dim

    @property
    def num_classes(self) -> int:
        return self.params.spec.num_classes

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        return predict(self.params, inputs)

    def loss(self, inputs: np.ndarray, labels: np.ndarray) -> float:
        return loss(self.params, LabeledBatch(inputs, labels))

    def grad_input(self, inputs: np.ndarray, labels: np.ndarray) -> np.ndarray:
        # Unit sample weights: each row is the gradient of that example's
        # own loss, not of the batch mean.
        batch = LabeledBatch(inputs, labels)
        return grad_input(self.params, batch, sample_weights=np.ones(len(batch)))


_PARAMS_FORMAT = "pfeddef-params-v1"


def save_params(params: ParamVector, path) -> None:
    """Single-line JSON header with the architecture, then the raw
    little-endian float64 payload."""
    header = dict(params.spec.to_dict(), format=_PARAMS_FORMAT, count=int(params.values.size))
    with open(path, "wb") as handle:
        handle.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        handle.write(params.values.astype("<f8").tobytes())


def load_params(path) -> ParamVector:
    with open(path, "rb") as handle:
        header_line = handle.readline()
        payload = handle.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: malformed parameter header") from exc
    if header.get("format") != _PARAMS_FORMAT:
        raise ValueError(f"{path}: not a {_PARAMS_FORMAT} file")
    spec = ArchitectureSpec.from_dict(header)
    values = np.frombuffer(payload, dtype="<f8")
    if values.size != int(header["count"]) or values.size != spec.param_count:
        raise ValueError(f"{path}: payload length does not match header")
    return ParamVector(values.copy(), spec)
