"""Dense-network engine with exact backprop and cut-layer splitting.

A model is an ordered list of dense layers ``y = act(a @ W.T + b)``.  Splitting
after layer ``L_c`` gives a client part (layers ``1..L_c``) whose output is the
smashed data, and a server part (layers ``L_c+1..L``) that ends in the loss
head.  All arithmetic is float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .exceptions import NumericError, ShapeError, SpecError, WeightError

ACTIVATIONS = ("identity", "relu", "tanh", "softmax_xent_head")
WEIGHT_SUM_TOL = 1e-12


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: str = "identity"

    def __post_init__(self):
        if int(self.input_dim) < 1 or int(self.output_dim) < 1:
            raise SpecError(f"layer dims must be positive, got {self.input_dim}->{self.output_dim}")
        if self.activation not in ACTIVATIONS:
            raise SpecError(f"unknown activation {self.activation!r}")


def check_specs(specs: Sequence[LayerSpec]) -> None:
    for k in range(1, len(specs)):
        if specs[k - 1].output_dim != specs[k].input_dim:
            raise SpecError(
                f"layer {k} outputs {specs[k - 1].output_dim} but layer {k + 1} expects {specs[k].input_dim}"
            )
    for k, spec in enumerate(specs[:-1]):
        if spec.activation == "softmax_xent_head":
            raise SpecError(f"softmax_xent_head on layer {k + 1} is not the final layer")


def head_of(specs: Sequence[LayerSpec]) -> str:
    """Loss head implied by the final layer: ``"xent"`` or ``"mse"``."""
    if specs and specs[-1].activation == "softmax_xent_head":
        return "xent"
    return "mse"


@dataclass
class ModelParams:
    """Weights and biases of a stack of dense layers.

    ``head`` records the loss of the full model so that an empty server part
    still knows how to score the smashed data it receives.
    """

    layers: list
    specs: list
    head: str = "mse"

    def __post_init__(self):
        self.layers = [(np.asarray(W, dtype=np.float64), np.asarray(b, dtype=np.float64)) for W, b in self.layers]
        self.specs = list(self.specs)
        if len(self.layers) != len(self.specs):
            raise ShapeError(f"{len(self.layers)} parameter blocks for {len(self.specs)} layer specs")
        for k, ((W, b), spec) in enumerate(zip(self.layers, self.specs)):
            if W.shape != (spec.output_dim, spec.input_dim) or b.shape != (spec.output_dim,):
                raise ShapeError(
                    f"layer {k + 1}: expected W{(spec.output_dim, spec.input_dim)}, b({spec.output_dim},); "
                    f"got W{W.shape}, b{b.shape}"
                )

    def __len__(self):
        return len(self.layers)

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in self.layers)

    def copy(self) -> "ModelParams":
        return ModelParams([(W.copy(), b.copy()) for W, b in self.layers], self.specs, self.head)

    def flat(self) -> np.ndarray:
        if not self.layers:
            return np.zeros(0)
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.layers])

    def with_flat(self, vec) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ShapeError(f"flat vector of length {vec.size} for {self.n_params} parameters")
        layers, pos = [], 0
        for W, b in self.layers:
            Wn = vec[pos:pos + W.size].reshape(W.shape)
            pos += W.size
            bn = vec[pos:pos + b.size]
            pos += b.size
            layers.append((Wn.copy(), bn.copy()))
        return ModelParams(layers, self.specs, self.head)

    def zeros_like(self) -> "ModelParams":
        return ModelParams([(np.zeros_like(W), np.zeros_like(b)) for W, b in self.layers], self.specs, self.head)

    def scale(self, alpha: float) -> "ModelParams":
        return ModelParams([(alpha * W, alpha * b) for W, b in self.layers], self.specs, self.head)

    def is_finite(self) -> bool:
        return all(np.isfinite(W).all() and np.isfinite(b).all() for W, b in self.layers)

    def same_shape(self, other: "ModelParams") -> bool:
        return len(self) == len(other) and all(
            W1.shape == W2.shape and b1.shape == b2.shape
            for (W1, b1), (W2, b2) in zip(self.layers, other.layers)
        )

    def array_equal(self, other: "ModelParams") -> bool:
        """Bitwise equality of every parameter."""
        return self.same_shape(other) and all(
            np.array_equal(W1, W2) and np.array_equal(b1, b2)
            for (W1, b1), (W2, b2) in zip(self.layers, other.layers)
        )


@dataclass(frozen=True)
class SplitSpec:
    cut_layer: int
    n_layers: int

    def __post_init__(self):
        if not 0 <= self.cut_layer <= self.n_layers:
            raise SpecError(f"cut layer {self.cut_layer} outside [0, {self.n_layers}]")


@dataclass
class SmashedData:
    activations: np.ndarray
    labels: np.ndarray | None = None
    client_id: int = 0

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.activations):
            raise ShapeError(f"{len(self.activations)} activation rows but {len(self.labels)} labels")


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre: list = field(default_factory=list)
    acts: list = field(default_factory=list)
    targets: np.ndarray | None = None
    head: str | None = None

    @property
    def depth(self) -> int:
        return len(self.pre)

    @property
    def output(self) -> np.ndarray:
        return self.acts[-1] if self.acts else self.inputs


def init_model(specs: Sequence[LayerSpec], seed: int) -> ModelParams:
    """Seeded init: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases."""
    specs = list(specs)
    check_specs(specs)
    rng = np.random.default_rng(seed)
    layers = []
    for spec in specs:
        bound = 1.0 / np.sqrt(spec.input_dim)
        W = rng.uniform(-bound, bound, size=(spec.output_dim, spec.input_dim))
        layers.append((W, np.zeros(spec.output_dim)))
    return ModelParams(layers, specs, head_of(specs))


def split_model(model: ModelParams, split: SplitSpec) -> tuple[ModelParams, ModelParams]:
    if split.n_layers != len(model):
        raise SpecError(f"split declares {split.n_layers} layers, model has {len(model)}")
    c = split.cut_layer
    client = ModelParams(model.layers[:c], model.specs[:c], model.head)
    server = ModelParams(model.layers[c:], model.specs[c:], model.head)
    return client, server


def concat_model(client_part: ModelParams, server_part: ModelParams) -> ModelParams:
    """Inverse of :func:`split_model`; parameter arrays are shared, not copied."""
    return ModelParams(client_part.layers + server_part.layers, client_part.specs + server_part.specs,
                       server_part.head)


def _activate(name, pre):
    if name == "relu":
        return np.maximum(pre, 0.0)
    if name == "tanh":
        return np.tanh(pre)
    return pre  # identity; softmax head emits logits


def _activation_grad(name, pre, act, upstream):
    if name == "relu":
        return upstream * (pre > 0.0)  # subgradient 0 at 0
    if name == "tanh":
        return upstream * (1.0 - act * act)
    return upstream


def _forward(model: ModelParams, X: np.ndarray) -> ForwardCache:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"batch must be 2-D, got shape {X.shape}")
    if model.specs and X.shape[1] != model.specs[0].input_dim:
        raise ShapeError(f"batch has {X.shape[1]} features, first layer expects {model.specs[0].input_dim}")
    cache = ForwardCache(inputs=X)
    a = X
    for (W, b), spec in zip(model.layers, model.specs):
        pre = a @ W.T + b
        a = _activate(spec.activation, pre)
        cache.pre.append(pre)
        cache.acts.append(a)
    return cache


def _backward(model: ModelParams, cache: ForwardCache, grad_out: np.ndarray):
    if cache.depth != len(model):
        raise ShapeError(f"cache depth {cache.depth} does not match {len(model)} layers")
    grads = [None] * len(model)
    g = grad_out
    for k in range(len(model) - 1, -1, -1):
        W, _ = model.layers[k]
        g = _activation_grad(model.specs[k].activation, cache.pre[k], cache.acts[k], g)
        a_prev = cache.acts[k - 1] if k > 0 else cache.inputs
        grads[k] = (g.T @ a_prev, g.sum(axis=0))
        g = g @ W
    return ModelParams(grads, model.specs, model.head), g


def _head_loss(head: str, out: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Batch-mean loss and its gradient w.r.t. ``out``."""
    n = out.shape[0]
    if head == "xent":
        labels = np.asarray(targets)
        if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
            raise ShapeError("softmax cross-entropy head needs 1-D integer labels")
        if labels.min() < 0 or labels.max() >= out.shape[1]:
            raise ShapeError(f"labels outside [0, {out.shape[1]})")
        shifted = out - out.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(shifted).sum(axis=1))
        rows = np.arange(n)
        loss = float(np.mean(logsum - shifted[rows, labels]))
        prob = np.exp(shifted - logsum[:, None])
        prob[rows, labels] -= 1.0
        return loss, prob / n
    t = np.asarray(targets, dtype=np.float64).reshape(n, -1)
    if t.shape != out.shape:
        raise ShapeError(f"targets of shape {t.shape} for predictions of shape {out.shape}")
    resid = out - t
    loss = float(0.5 * np.mean(np.sum(resid * resid, axis=1)))
    return loss, resid / n


def forward_client(client_part: ModelParams, batch, labels=None, client_id: int = 0):
    """Client-side forward pass; with an empty client part the raw batch is the smashed data."""
    cache = _forward(client_part, batch)
    return SmashedData(cache.output, labels, client_id), cache


def forward_server(server_part: ModelParams, smashed: SmashedData):
    """Server-side forward pass ending in the batch-mean loss."""
    if smashed.labels is None:
        raise ShapeError("smashed data carries no labels")
    cache = _forward(server_part, smashed.activations)
    cache.targets = smashed.labels
    cache.head = server_part.head
    loss, _ = _head_loss(server_part.head, cache.output, smashed.labels)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    return loss, cache


def backward_server(server_part: ModelParams, cache: ForwardCache):
    """Gradients of the batch-mean loss w.r.t. server params and the smashed data."""
    if cache.head != server_part.head:
        raise ShapeError("cache was not produced by forward_server on this model")
    _, g = _head_loss(cache.head, cache.output, cache.targets)
    return _backward(server_part, cache, g)


def backward_client(client_part: ModelParams, cache: ForwardCache, grad_wrt_smashed) -> ModelParams:
    grad_wrt_smashed = np.asarray(grad_wrt_smashed, dtype=np.float64)
    if grad_wrt_smashed.shape != cache.output.shape:
        raise ShapeError(f"gradient of shape {grad_wrt_smashed.shape} for smashed data {cache.output.shape}")
    grads, _ = _backward(client_part, cache, grad_wrt_smashed)
    return grads


def loss_and_grad(model: ModelParams, X, y) -> tuple[float, ModelParams]:
    """Unsplit loss and gradient (the model treated as all server side)."""
    loss, cache = forward_server(model, SmashedData(np.asarray(X, dtype=np.float64), y))
    grads, _ = backward_server(model, cache)
    return loss, grads


def predict_output(model: ModelParams, X) -> np.ndarray:
    """Final-layer output: logits for a softmax head, predictions otherwise."""
    return _forward(model, X).output


def sgd_step(params: ModelParams, grads: ModelParams, lr: float) -> ModelParams:
    if not params.same_shape(grads):
        raise ShapeError("gradient shapes do not match parameters")
    if not np.isfinite(lr):
        raise NumericError(f"learning rate {lr} is not finite")
    with np.errstate(over="ignore", invalid="ignore"):  # reported as NumericError below
        out = ModelParams([(W - lr * gW, b - lr * gb) for (W, b), (gW, gb) in zip(params.layers, grads.layers)],
                          params.specs, params.head)
    if not out.is_finite():
        raise NumericError("SGD step produced non-finite parameters")
    return out


def check_weights(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise WeightError("need a non-empty 1-D weight vector")
    if (w < 0).any():
        raise WeightError("weights must be nonnegative")
    total = float(np.sum(w))
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        raise WeightError(f"weights sum to {total!r}, not 1")
    return w


def weighted_sum(models: Sequence[ModelParams], weights) -> ModelParams:
    """Entrywise sum of ``p_n * model_n`` accumulated in ascending index order."""
    first = models[0]
    for m in models[1:]:
        if not first.same_shape(m):
            raise ShapeError("models to combine have different shapes")
    layers = []
    for k in range(len(first)):
        W = weights[0] * first.layers[k][0]
        b = weights[0] * first.layers[k][1]
        for p, m in zip(weights[1:], models[1:]):
            W = W + p * m.layers[k][0]
            b = b + p * m.layers[k][1]
        layers.append((W, b))
    return ModelParams(layers, first.specs, first.head)


def aggregate(models: Sequence[ModelParams], weights) -> ModelParams:
    """Weighted model average used for fed-server synchronization."""
    if len(models) == 0:
        raise WeightError("nothing to aggregate")
    w = check_weights(weights)
    if len(w) != len(models):
        raise WeightError(f"{len(w)} weights for {len(models)} models")
    first = models[0]
    if all(m is first or (first.same_shape(m) and m.array_equal(first)) for m in models[1:]):
        return first.copy()  # a convex combination of equal models is that model; skip the rounding
    return weighted_sum(models, w)


def weighted_mean(grads: Sequence[ModelParams], weights) -> ModelParams:
    """``sum p_n g_n / sum p_n``: the normalised gradient average of the main server."""
    w = check_weights(weights)
    total = float(np.sum(w))
    summed = weighted_sum(grads, w)
    return ModelParams([(W / total, b / total) for W, b in summed.layers], summed.specs, summed.head)


def finite_diff_grad(loss_eval: Callable[[ModelParams], float], params: ModelParams, eps: float = 1e-6) -> ModelParams:
    """Central-difference gradient, one coordinate at a time."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    base = params.flat()
    grad = np.empty_like(base)
    for j in range(base.size):
        up = base.copy()
        up[j] += eps
        down = base.copy()
        down[j] -= eps
        f_up = loss_eval(params.with_flat(up))
        f_down = loss_eval(params.with_flat(down))
        if not (np.isfinite(f_up) and np.isfinite(f_down)):
            raise NumericError(f"non-finite loss while probing coordinate {j}")
        grad[j] = (f_up - f_down) / (2.0 * eps)
    return params.with_flat(grad)


class DenseNet:
    """Split-training hooks for dense networks.

    The training drivers only talk to this small surface, so any other model
    family with the same four methods (see :class:`mbsfl.quadratic.QuadraticNet`)
    can be trained by the same protocol code.
    """

    def client_forward(self, client_part, X, y, client_id=0):
        return forward_client(client_part, X, y, client_id)

    def server_grads(self, server_part, smashed):
        loss, cache = forward_server(server_part, smashed)
        grads, grad_z = backward_server(server_part, cache)
        return loss, grads, grad_z

    def client_backward(self, client_part, cache, grad_z):
        return backward_client(client_part, cache, grad_z)

    def evaluate(self, model, X, y):
        """Batch-mean loss and, for classifiers, accuracy."""
        out = predict_output(model, X)
        loss, _ = _head_loss(model.head, out, y)
        acc = float(np.mean(out.argmax(axis=1) == np.asarray(y))) if model.head == "xent" else None
        return loss, acc
