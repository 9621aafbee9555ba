"""Small feed-forward classifiers with a shared feature extractor and
several softmax heads, trained by plain SGD with hand-derived gradients.

A model is ``h o phi``: ``phi`` is the stack of feature layers (possibly
empty, in which case the features are the inputs) and every head is a
single affine map from the features to class logits.

Weights are stored as ``(fan_in, fan_out)`` so that a layer computes
``x @ W + b`` on row-major batches.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import as_matrix

ACTIVATIONS = ("tanh", "relu", "identity")
LOG_CLAMP = 1e-12

Gradients = dict  # parameter name -> ndarray, same keys as Mlp.named_parameters()


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "tanh"


@dataclass
class Head:
    W: np.ndarray
    b: np.ndarray

    @property
    def n_classes(self):
        return self.W.shape[1]


@dataclass
class Mlp:
    input_dim: int
    layers: list[Layer] = field(default_factory=list)
    heads: dict[str, Head] = field(default_factory=dict)

    @property
    def feature_dim(self):
        return self.layers[-1].W.shape[1] if self.layers else self.input_dim

    def named_parameters(self):
        """Ordered ``name -> array`` view of every parameter (no copies)."""
        params = {}
        for i, layer in enumerate(self.layers):
            params[f"layers.{i}.W"] = layer.W
            params[f"layers.{i}.b"] = layer.b
        for name in sorted(self.heads):
            params[f"heads.{name}.W"] = self.heads[name].W
            params[f"heads.{name}.b"] = self.heads[name].b
        return params

    def copy(self):
        return Mlp(
            input_dim=self.input_dim,
            layers=[Layer(l.W.copy(), l.b.copy(), l.activation) for l in self.layers],
            heads={k: Head(h.W.copy(), h.b.copy()) for k, h in self.heads.items()},
        )

    def without_heads(self, keep):
        """Copy with only the heads named in ``keep``."""
        m = self.copy()
        m.heads = {k: h for k, h in m.heads.items() if k in keep}
        return m


@dataclass(frozen=True)
class TrainHyper:
    learning_rate: float = 0.01
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")


def _uniform(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_mlp(input_dim, hidden_dims, head_specs, seed, activation="tanh"):
    """Build a model with U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and zero biases.

    Parameters
    ----------
    input_dim : int
    hidden_dims : sequence of int
        Widths of the feature layers; empty means the features are the inputs.
    head_specs : mapping of str to int
        Head name to number of classes. Heads are initialised in sorted
        name order so the result does not depend on mapping order.
    seed : int
    activation : str or sequence of str
        One activation for all feature layers, or one per layer.
    """
    dims = [input_dim, *hidden_dims]
    if any(int(d) < 1 for d in dims):
        raise ValueError(f"all dimensions must be positive, got {dims}")
    if isinstance(activation, str):
        activation = [activation] * len(hidden_dims)
    if len(activation) != len(hidden_dims):
        raise ValueError("need one activation per hidden layer")
    for a in activation:
        if a not in ACTIVATIONS:
            raise ValueError(f"unknown activation {a!r}")
    rng = np.random.default_rng(seed)
    layers = [
        Layer(_uniform(rng, dims[i], dims[i + 1]), np.zeros(dims[i + 1]), activation[i])
        for i in range(len(hidden_dims))
    ]
    m = Mlp(input_dim=int(input_dim), layers=layers)
    for name in sorted(head_specs):
        n_classes = int(head_specs[name])
        if n_classes < 1:
            raise ValueError(f"head {name!r} needs a positive class count")
        m.heads[name] = Head(_uniform(rng, m.feature_dim, n_classes), np.zeros(n_classes))
    return m


def add_head(m, name, n_classes, seed):
    """Attach a freshly initialised head to ``m`` in place."""
    if name in m.heads:
        raise ValueError(f"head {name!r} already exists")
    rng = np.random.default_rng(seed)
    m.heads[name] = Head(_uniform(rng, m.feature_dim, int(n_classes)), np.zeros(int(n_classes)))
    return m


def _activate(z, kind):
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_grad(z, a, kind):
    if kind == "tanh":
        return 1.0 - a * a
    if kind == "relu":
        return (z > 0).astype(np.float64)
    return np.ones_like(z)


def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_input(m, x):
    x = as_matrix(x, "x")
    if x.shape[1] != m.input_dim:
        raise ValueError(f"input has {x.shape[1]} columns, model expects {m.input_dim}")
    return x


def _features(m, x):
    acts = [x]
    pre = []
    h = x
    for layer in m.layers:
        z = h @ layer.W + layer.b
        h = _activate(z, layer.activation)
        pre.append(z)
        acts.append(h)
    return h, pre, acts


def forward(m, x, heads=None):
    """Return ``(features, {head: class probabilities})`` for a batch.

    ``heads`` restricts which heads are evaluated (default: all).
    """
    x = _check_input(m, x)
    feats, _, _ = _features(m, x)
    names = sorted(m.heads) if heads is None else list(heads)
    probs = {}
    for name in names:
        head = m.heads[name]
        probs[name] = softmax(feats @ head.W + head.b)
    return feats, probs


def cross_entropy(probs, targets):
    """Mean over rows of ``-sum_c t_c log p_c``; ``log`` is clamped at 1e-12."""
    probs = as_matrix(probs, "probs")
    targets = as_matrix(targets, "targets")
    if probs.shape != targets.shape:
        raise ValueError(f"shape mismatch: {probs.shape} != {targets.shape}")
    return float(-np.sum(targets * np.log(np.maximum(probs, LOG_CLAMP))) / probs.shape[0])


def zero_gradients(m):
    return {k: np.zeros_like(v) for k, v in m.named_parameters().items()}


def add_gradients(a, b):
    return {k: a[k] + b[k] for k in a}


def backward(m, x, targets_per_head, head_loss_coeffs, return_parts=False):
    """Loss ``sum_h c_h * CE(head_h(x), targets_h)`` and its exact gradient.

    Heads with a zero coefficient are skipped entirely. The gradient
    ignores the log clamp, i.e. it is exact wherever every predicted
    probability exceeds 1e-12.

    Returns
    -------
    loss : float
    grads : dict
        Keyed like ``m.named_parameters()``.
    parts : dict
        Only with ``return_parts``: unweighted CE per active head.
    """
    x = _check_input(m, x)
    for name in head_loss_coeffs:
        if name not in m.heads:
            raise KeyError(f"model has no head {name!r}")
        if name not in targets_per_head:
            raise KeyError(f"no targets given for head {name!r}")
        if not np.isfinite(head_loss_coeffs[name]):
            raise ValueError(f"non-finite coefficient for head {name!r}")
    grads = zero_gradients(m)
    parts = {}
    active = [h for h in sorted(head_loss_coeffs) if head_loss_coeffs[h] != 0]
    if not active:
        return (0.0, grads, parts) if return_parts else (0.0, grads)

    n = x.shape[0]
    feats, pre, acts = _features(m, x)
    loss = 0.0
    dfeats = np.zeros_like(feats)
    for name in active:
        coeff = float(head_loss_coeffs[name])
        head = m.heads[name]
        targets = as_matrix(targets_per_head[name], f"targets[{name}]")
        probs = softmax(feats @ head.W + head.b)
        parts[name] = cross_entropy(probs, targets)
        loss += coeff * parts[name]
        dlogits = (coeff / n) * (probs - targets)
        grads[f"heads.{name}.W"] = feats.T @ dlogits
        grads[f"heads.{name}.b"] = dlogits.sum(axis=0)
        dfeats += dlogits @ head.W.T

    delta = dfeats
    for i in range(len(m.layers) - 1, -1, -1):
        layer = m.layers[i]
        dz = delta * _activation_grad(pre[i], acts[i + 1], layer.activation)
        grads[f"layers.{i}.W"] = acts[i].T @ dz
        grads[f"layers.{i}.b"] = dz.sum(axis=0)
        if i > 0:
            delta = dz @ layer.W.T
    return (loss, grads, parts) if return_parts else (loss, grads)


def sgd_step(m, grads, hyper):
    """In-place ``theta -= lr * (g + wd * theta)``; biases are not decayed."""
    lr = hyper.learning_rate
    wd = hyper.weight_decay
    params = m.named_parameters()
    if set(params) != set(grads):
        raise ValueError("gradients do not match model parameters")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if name.endswith(".W") and wd:
            p -= lr * (g + wd * p)
        else:
            p -= lr * g
    return m


def predict(m, x, head="target"):
    """Argmax class per row; ties go to the lowest class index."""
    _, probs = forward(m, x, heads=[head])
    return np.argmax(probs[head], axis=1)
