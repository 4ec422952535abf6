"""Flat-vector parameter algebra and small differentiable models.

All arithmetic is float64 numpy. Models expose analytic gradients; central
finite differences of the loss serve as an independent gradient oracle, and
Hessian-vector products are built from central differences of the analytic
gradient (accurate enough for power iteration at these scales).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ParamVector",
    "Batch",
    "QuadraticFed",
    "LogisticRegression",
    "MLP",
    "loss",
    "grad",
    "finite_diff_grad",
    "hvp",
]


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat float64 vector with optional layer-shape metadata.

    ``layer_shapes`` records the (rows, cols) of the weight matrices packed
    into ``values``; an empty tuple marks a shapeless vector (dual variables,
    quadratic-model parameters). Entries must be finite.
    """

    values: np.ndarray
    layer_shapes: tuple = ()

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError(f"ParamVector values must be 1-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("ParamVector contains non-finite entries")
        shapes = tuple((int(r), int(c)) for r, c in self.layer_shapes)
        if shapes and sum(r * c for r, c in shapes) != v.size:
            raise ValueError(
                f"layer_shapes {shapes} sum to "
                f"{sum(r * c for r, c in shapes)}, expected {v.size}"
            )
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "layer_shapes", shapes)

    @property
    def d(self) -> int:
        return self.values.size

    @classmethod
    def zeros(cls, d, layer_shapes=()):
        return cls(np.zeros(int(d)), layer_shapes)

    def like(self, values) -> "ParamVector":
        """New vector with the same layer shapes."""
        return ParamVector(values, self.layer_shapes)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layer_shapes)

    def layers(self):
        """Views of the packed weight matrices, one per layer shape."""
        out, pos = [], 0
        for r, c in self.layer_shapes:
            out.append(self.values[pos : pos + r * c].reshape(r, c))
            pos += r * c
        return out

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def dot(self, other: "ParamVector") -> float:
        self._check_dim(other)
        return float(self.values @ other.values)

    def _check_dim(self, other):
        if self.d != other.d:
            raise ValueError(f"dimension mismatch: {self.d} vs {other.d}")

    def _shapes_with(self, other):
        return self.layer_shapes if self.layer_shapes else other.layer_shapes

    def __add__(self, other):
        self._check_dim(other)
        return ParamVector(self.values + other.values, self._shapes_with(other))

    def __sub__(self, other):
        self._check_dim(other)
        return ParamVector(self.values - other.values, self._shapes_with(other))

    def __mul__(self, scalar):
        return ParamVector(self.values * float(scalar), self.layer_shapes)

    __rmul__ = __mul__

    def __neg__(self):
        return ParamVector(-self.values, self.layer_shapes)


@dataclass(frozen=True, eq=False)
class Batch:
    """A mini-batch: features (b, input_dim) and integer class labels (b,)."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if f.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {f.shape}")
        if y.ndim != 1 or y.shape[0] != f.shape[0]:
            raise ValueError("labels must be 1-D and match the feature rows")
        if f.shape[0] < 1:
            raise ValueError("batch must contain at least one sample")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", np.asarray(y, dtype=np.int64))

    @property
    def size(self) -> int:
        return self.features.shape[0]


def _log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _softmax(logits):
    return np.exp(_log_softmax(logits))


class QuadraticFed:
    """Per-client quadratic objective 0.5 * sum_j curv_j * (w_j - c_j)^2.

    The loss is a function of the parameters alone; the batch argument is
    accepted (and must be nonempty) but its contents are ignored, which lets
    quadratic clients run through the same round loop as data-driven models.
    """

    def __init__(self, center, curvature=None):
        c = np.asarray(center, dtype=np.float64).ravel()
        if curvature is None:
            curvature = np.ones_like(c)
        k = np.asarray(curvature, dtype=np.float64).ravel()
        if k.shape != c.shape:
            raise ValueError("curvature and center must have equal length")
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(k))):
            raise ValueError("center/curvature must be finite")
        self.center = c
        self.curvature = k
        self.layer_shapes = ()
        self.num_classes = None
        self.input_dim = None

    @property
    def d(self) -> int:
        return self.center.size

    def _loss(self, values, X, y):
        delta = values - self.center
        return 0.5 * float(self.curvature @ (delta * delta))

    def _grad(self, values, X, y):
        return self.curvature * (values - self.center)


class LogisticRegression:
    """Multinomial logistic regression without bias, cross-entropy loss."""

    def __init__(self, input_dim, num_classes):
        if input_dim < 1 or num_classes < 2:
            raise ValueError("need input_dim >= 1 and num_classes >= 2")
        self.input_dim = int(input_dim)
        self.num_classes = int(num_classes)
        self.layer_shapes = ((self.input_dim, self.num_classes),)

    @property
    def d(self) -> int:
        return self.input_dim * self.num_classes

    def _logits(self, values, X):
        return X @ values.reshape(self.input_dim, self.num_classes)

    def _loss(self, values, X, y):
        logp = _log_softmax(self._logits(values, X))
        return -float(logp[np.arange(X.shape[0]), y].mean())

    def _grad(self, values, X, y):
        b = X.shape[0]
        delta = _softmax(self._logits(values, X))
        delta[np.arange(b), y] -= 1.0
        return (X.T @ (delta / b)).ravel()

    def predict(self, values, X):
        return self._logits(values, X).argmax(axis=1)


class MLP:
    """Fully connected net: tanh hidden layers, linear output, no biases.

    tanh keeps the objective smooth and 1-Lipschitz in the activations, so
    gradient checks hold to tight tolerances everywhere.
    """

    def __init__(self, layer_sizes):
        sizes = tuple(int(s) for s in layer_sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError("layer_sizes needs >= 2 positive entries")
        self.sizes = sizes
        self.input_dim = sizes[0]
        self.num_classes = sizes[-1]
        self.layer_shapes = tuple(zip(sizes[:-1], sizes[1:]))

    @property
    def d(self) -> int:
        return sum(r * c for r, c in self.layer_shapes)

    def _weights(self, values):
        out, pos = [], 0
        for r, c in self.layer_shapes:
            out.append(values[pos : pos + r * c].reshape(r, c))
            pos += r * c
        return out

    def _forward(self, values, X):
        weights = self._weights(values)
        acts = [X]
        for W in weights[:-1]:
            acts.append(np.tanh(acts[-1] @ W))
        logits = acts[-1] @ weights[-1]
        return weights, acts, logits

    def _loss(self, values, X, y):
        _, _, logits = self._forward(values, X)
        logp = _log_softmax(logits)
        return -float(logp[np.arange(X.shape[0]), y].mean())

    def _grad(self, values, X, y):
        b = X.shape[0]
        weights, acts, logits = self._forward(values, X)
        delta = _softmax(logits)
        delta[np.arange(b), y] -= 1.0
        delta /= b
        grads = [None] * len(weights)
        for i in range(len(weights) - 1, -1, -1):
            grads[i] = acts[i].T @ delta
            if i > 0:
                delta = (delta @ weights[i].T) * (1.0 - acts[i] * acts[i])
        return np.concatenate([g.ravel() for g in grads])

    def predict(self, values, X):
        return self._forward(values, X)[2].argmax(axis=1)


def _validate(model, params: ParamVector, batch: Batch):
    if params.d != model.d:
        raise ValueError(f"params dimension {params.d} != model dimension {model.d}")
    if model.input_dim is not None and batch.features.shape[1] != model.input_dim:
        raise ValueError(
            f"batch feature dim {batch.features.shape[1]} != model input dim "
            f"{model.input_dim}"
        )
    if model.num_classes is not None:
        y = batch.labels
        if y.min() < 0 or y.max() >= model.num_classes:
            raise ValueError("labels out of range for model classes")


def loss(model, params: ParamVector, batch: Batch) -> float:
    """Mean per-sample loss of the model at ``params`` over ``batch``."""
    _validate(model, params, batch)
    value = float(model._loss(params.values, batch.features, batch.labels))
    if not np.isfinite(value):
        raise ValueError("loss evaluated to a non-finite value")
    return value


def grad(model, params: ParamVector, batch: Batch) -> ParamVector:
    """Analytic gradient of :func:`loss` with respect to ``params``."""
    _validate(model, params, batch)
    g = model._grad(params.values, batch.features, batch.labels)
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient contains non-finite entries")
    return ParamVector(g, params.layer_shapes)


def finite_diff_grad(model, params: ParamVector, batch: Batch, h: float = 1e-5) -> ParamVector:
    """Central-difference gradient oracle, one loss pair per coordinate."""
    if h <= 0:
        raise ValueError("step size h must be positive")
    base = params.values
    g = np.empty_like(base)
    for j in range(base.size):
        plus = base.copy()
        plus[j] += h
        minus = base.copy()
        minus[j] -= h
        g[j] = (
            loss(model, params.like(plus), batch) - loss(model, params.like(minus), batch)
        ) / (2.0 * h)
    return ParamVector(g, params.layer_shapes)


def hvp(model, params: ParamVector, batch: Batch, v: ParamVector, h: float = 1e-5) -> ParamVector:
    """Hessian-vector product H @ v via central differences of the gradient."""
    if h <= 0:
        raise ValueError("step size h must be positive")
    params._check_dim(v)
    vnorm = v.norm()
    if vnorm == 0.0:
        raise ValueError("hvp direction must be nonzero")
    unit = v.values / vnorm
    g_plus = grad(model, params.like(params.values + h * unit), batch)
    g_minus = grad(model, params.like(params.values - h * unit), batch)
    return params.like((g_plus.values - g_minus.values) * (vnorm / (2.0 * h)))
