"""Fully connected classifier used by every federated client."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError, ValidationError
from .rng import as_generator
from .tensor import ParameterVector, tensor2

ACTIVATIONS = ("identity", "relu", "tanh")
ACT_CODES = {name: code for code, name in enumerate(ACTIVATIONS)}


def mlp_layout(dims) -> tuple:
    layout = []
    for k in range(len(dims) - 1):
        layout.append((f"W{k}", (dims[k], dims[k + 1])))
        layout.append((f"b{k}", (dims[k + 1],)))
    return tuple(layout)


@dataclass
class MlpModel:
    dims: tuple
    activations: tuple
    params: ParameterVector = field(default=None)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.activations = tuple(self.activations)
        if len(self.dims) < 2 or any(d < 1 for d in self.dims):
            raise ShapeError(f"invalid layer dims {self.dims}")
        if len(self.activations) != len(self.dims) - 1:
            raise ShapeError("need one activation per layer")
        for a in self.activations:
            if a not in ACT_CODES:
                raise ValidationError(f"unknown activation {a!r}")
        if self.params is None:
            self.params = ParameterVector.zeros(mlp_layout(self.dims))
        elif self.params.layout != mlp_layout(self.dims):
            raise ShapeError("params layout does not match dims")

    @property
    def n_classes(self) -> int:
        return self.dims[-1]

    @property
    def act_codes(self) -> np.ndarray:
        return np.array([ACT_CODES[a] for a in self.activations], dtype=np.int64)

    def with_params(self, params: ParameterVector) -> "MlpModel":
        return MlpModel(self.dims, self.activations, params)

    def copy(self) -> "MlpModel":
        return MlpModel(self.dims, self.activations, self.params.copy())


def init_mlp(dims, activations=None, rng=0) -> MlpModel:
    """Glorot-uniform weights, zero biases. Hidden layers default to relu."""
    dims = tuple(int(d) for d in dims)
    if activations is None:
        activations = ("relu",) * (len(dims) - 2) + ("identity",)
    gen = as_generator(rng)
    model = MlpModel(dims, activations)
    blocks = model.params.unflatten()
    for k in range(len(dims) - 1):
        limit = np.sqrt(6.0 / (dims[k] + dims[k + 1]))
        blocks[f"W{k}"][...] = gen.uniform(-limit, limit, size=(dims[k], dims[k + 1]))
    return model


def _act(z, code):
    if code == 1:
        return np.maximum(z, 0.0)
    if code == 2:
        return np.tanh(z)
    return z


def _act_grad(z, a, code):
    if code == 1:
        return (z > 0.0).astype(np.float64)
    if code == 2:
        return 1.0 - a * a
    return np.ones_like(z)


def forward_blocks(blocks, codes, X):
    """Return pre-activations and activations for every layer (input first)."""
    acts = [X]
    pres = []
    a = X
    for k, code in enumerate(codes):
        z = a @ blocks[f"W{k}"] + blocks[f"b{k}"]
        a = _act(z, code)
        pres.append(z)
        acts.append(a)
    return pres, acts


def softmax(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def _check_batch(model: MlpModel, batch):
    X = tensor2(batch, "batch")
    if X.shape[1] != model.dims[0]:
        raise ShapeError(f"batch has {X.shape[1]} columns, model expects {model.dims[0]}")
    return X


def _check_labels(labels, n, C):
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != n:
        raise ShapeError("labels must be a vector with one entry per row")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValidationError("labels must be integer class indices")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= C):
        raise ValidationError(f"labels must lie in [0, {C})")
    return y


def forward(model: MlpModel, batch) -> np.ndarray:
    X = _check_batch(model, batch)
    _, acts = forward_blocks(model.params.unflatten(), model.act_codes, X)
    return acts[-1]


def predict(model: MlpModel, batch) -> np.ndarray:
    return np.argmax(forward(model, batch), axis=1)


def backward_blocks(blocks, codes, pres, acts, dz_out):
    """Gradients of every block given d(loss)/d(final pre-activation)."""
    grads = {}
    dz = dz_out
    for k in range(len(codes) - 1, -1, -1):
        grads[f"W{k}"] = acts[k].T @ dz
        grads[f"b{k}"] = dz.sum(axis=0)
        if k > 0:
            da = dz @ blocks[f"W{k}"].T
            dz = da * _act_grad(pres[k - 1], acts[k], codes[k - 1])
    return grads


def loss_and_grad(model: MlpModel, batch, labels):
    """Mean softmax cross-entropy (nats) and its gradient w.r.t. all params.

    The final layer's activation is applied before the softmax, so a tanh or
    relu output layer is differentiated through as well.
    """
    X = _check_batch(model, batch)
    y = _check_labels(labels, X.shape[0], model.n_classes)
    n = X.shape[0]
    if n == 0:
        raise ValidationError("empty batch")
    blocks = model.params.unflatten()
    codes = model.act_codes
    pres, acts = forward_blocks(blocks, codes, X)
    logp = log_softmax(acts[-1])
    loss = -float(np.mean(logp[np.arange(n), y]))
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    dz = dlogits * _act_grad(pres[-1], acts[-1], codes[-1])
    grads = backward_blocks(blocks, codes, pres, acts, dz)
    return loss, ParameterVector.flatten(grads, model.params.layout)
