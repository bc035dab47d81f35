"""Small differentiable models with exact analytic gradients.

Two architectures are supported: ``linear`` (an affine map) and ``mlp1``
(one tanh hidden layer followed by an affine read-out). Parameters live in a
single flat float64 vector; the layout is documented on :class:`ModelSpec`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Literal, NamedTuple, Sequence

import numpy as np

Task = Literal["classification", "regression"]
LossKind = Literal["mse", "cross_entropy"]

ARCHITECTURES = ("linear", "mlp1")


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix plus labels.

    ``labels`` holds class indices in ``{0..n_classes-1}`` for classification
    and real targets for regression.
    """

    features: np.ndarray
    labels: np.ndarray
    task: Task = "classification"
    n_classes: int | None = None

    def __post_init__(self):
        X = np.array(self.features, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {X.shape}")
        if self.task == "classification":
            y = np.asarray(self.labels)
            if y.size and not np.all(np.equal(np.mod(y, 1), 0)):
                raise ValueError("classification labels must be integers")
            y = y.astype(np.int64)
            n_classes = self.n_classes
            if n_classes is None:
                n_classes = int(y.max()) + 1 if y.size else 1
            if y.size and (y.min() < 0 or y.max() >= n_classes):
                raise ValueError(f"class indices must lie in [0, {n_classes})")
            object.__setattr__(self, "n_classes", int(n_classes))
        elif self.task == "regression":
            y = np.array(self.labels, dtype=np.float64)
            object.__setattr__(self, "n_classes", None)
        else:
            raise ValueError(f"unknown task {self.task!r}")
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise ValueError(f"labels shape {y.shape} does not match {X.shape[0]} rows")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index)
        if index.dtype != bool:
            index = index.astype(np.intp)
        return LabeledDataset(self.features[index], self.labels[index], self.task, self.n_classes)

    @classmethod
    def concat(cls, parts: Sequence["LabeledDataset"]) -> "LabeledDataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("cannot concatenate zero non-empty datasets")
        first = parts[0]
        return cls(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            first.task,
            first.n_classes,
        )


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    Flat parameter layout (row-major):

    * ``linear``: ``W (out x d)``, ``b (out)``
    * ``mlp1``: ``W1 (H x d)``, ``b1 (H)``, ``W2 (out x H)``, ``b2 (out)``
    """

    arch: str
    input_dim: int
    output_dim: int = 1
    hidden: int = 0

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if self.arch == "mlp1" and self.hidden < 1:
            raise ValueError("mlp1 needs hidden >= 1")

    @property
    def n_params(self) -> int:
        d, o, h = self.input_dim, self.output_dim, self.hidden
        if self.arch == "linear":
            return o * d + o
        return h * d + h + o * h + o

    def unpack(self, params: np.ndarray) -> list[np.ndarray]:
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {params.shape}")
        d, o, h = self.input_dim, self.output_dim, self.hidden
        if self.arch == "linear":
            shapes = [(o, d), (o,)]
        else:
            shapes = [(h, d), (h,), (o, h), (o,)]
        out, pos = [], 0
        for shape in shapes:
            size = int(np.prod(shape))
            out.append(params[pos:pos + size].reshape(shape))
            pos += size
        return out


class GradEval(NamedTuple):
    loss: float
    gradient: np.ndarray | None


def as_params(values) -> np.ndarray:
    p = np.array(values, dtype=np.float64).ravel()
    if not np.all(np.isfinite(p)):
        raise ValueError("parameter vector contains non-finite entries")
    return p


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per layer."""
    chunks = []
    fan_ins = [spec.input_dim] * 2 if spec.arch == "linear" else [spec.input_dim] * 2 + [spec.hidden] * 2
    shapes = [w.shape for w in spec.unpack(np.zeros(spec.n_params))]
    for shape, fan_in in zip(shapes, fan_ins):
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=int(np.prod(shape))))
    return np.concatenate(chunks)


def _check_inputs(spec: ModelSpec, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ValueError(f"expected inputs with {spec.input_dim} features, got shape {X.shape}")
    return X


def forward_batch(spec: ModelSpec, params: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Raw outputs (logits for classification) for every row of ``X``; shape (N, out)."""
    X = _check_inputs(spec, X)
    layers = spec.unpack(params)
    if spec.arch == "linear":
        W, b = layers
        return X @ W.T + b
    W1, b1, W2, b2 = layers
    return np.tanh(X @ W1.T + b1) @ W2.T + b2


def forward(spec: ModelSpec, params: np.ndarray, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.input_dim,):
        raise ValueError(f"expected input of length {spec.input_dim}, got shape {x.shape}")
    return forward_batch(spec, params, x[None, :])[0]


def backward_batch(spec: ModelSpec, params: np.ndarray, X: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product: gradient of ``sum(d_out * outputs)`` w.r.t. params."""
    X = _check_inputs(spec, X)
    layers = spec.unpack(params)
    if spec.arch == "linear":
        return np.concatenate([(d_out.T @ X).ravel(), d_out.sum(axis=0)])
    W1, b1, W2, _ = layers
    h = np.tanh(X @ W1.T + b1)
    dz = (d_out @ W2) * (1.0 - h * h)
    return np.concatenate([
        (dz.T @ X).ravel(),
        dz.sum(axis=0),
        (d_out.T @ h).ravel(),
        d_out.sum(axis=0),
    ])


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def predict_labels(spec: ModelSpec, params: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index."""
    return np.argmax(forward_batch(spec, params, X), axis=1)


def accuracy(spec: ModelSpec, params: np.ndarray, data: LabeledDataset) -> float:
    if len(data) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    return float(np.mean(predict_labels(spec, params, data.features) == data.labels))


def loss_pred(
    spec: ModelSpec,
    params: np.ndarray,
    data: LabeledDataset,
    loss: LossKind = "cross_entropy",
    with_gradient: bool = True,
) -> GradEval:
    """Mean task loss over ``data`` and, optionally, its exact gradient."""
    if len(data) == 0:
        raise ValueError("loss over an empty dataset is undefined")
    if loss == "mse":
        if data.task != "regression" or spec.output_dim != 1:
            raise ValueError("mse loss needs a regression task and a scalar-output model")
    elif loss == "cross_entropy":
        if data.task != "classification":
            raise ValueError("cross_entropy loss needs a classification task")
        if data.n_classes > spec.output_dim:
            raise ValueError(f"model has {spec.output_dim} outputs but data has {data.n_classes} classes")
    else:
        raise ValueError(f"unknown loss kind {loss!r}")

    X, y = data.features, data.labels
    n = X.shape[0]
    out = forward_batch(spec, params, X)
    if loss == "mse":
        resid = out[:, 0] - y
        value = float(np.mean(resid * resid))
        d_out = (2.0 / n) * resid[:, None]
    else:
        logp = log_softmax(out)
        value = float(-np.mean(logp[np.arange(n), y]))
        d_out = np.exp(logp)
        d_out[np.arange(n), y] -= 1.0
        d_out /= n
    if not np.isfinite(value):
        raise FloatingPointError("non-finite loss")
    if not with_gradient:
        return GradEval(value, None)
    return GradEval(value, backward_batch(spec, params, X, d_out))


def finite_diff_grad(fn: Callable[[np.ndarray], float], params, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = np.array(params, dtype=np.float64).ravel()
    grad = np.empty_like(params)
    for p in range(params.size):
        plus, minus = params.copy(), params.copy()
        plus[p] += eps
        minus[p] -= eps
        hi, lo = float(fn(plus)), float(fn(minus))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise FloatingPointError(f"non-finite loss while perturbing coordinate {p}")
        grad[p] = (hi - lo) / (2.0 * eps)
    return grad


def gd_step(params: np.ndarray, gradient: np.ndarray, lr: float) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    gradient = np.asarray(gradient, dtype=np.float64)
    if params.shape != gradient.shape:
        raise ValueError(f"params {params.shape} and gradient {gradient.shape} differ in shape")
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    return params - lr * gradient
