"""Small dense-tensor library with reverse-mode autodiff.

Only what the simulator needs: MLPs, a handful of elementwise ops,
concatenation, cross-entropy / squared-error losses, SGD with learning-rate
decay and Adam. Everything is float64.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    """A float64 array that optionally records how it was computed."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate ``grad`` on every leaf that requires it.

        The receiver must be a scalar produced by recorded ops. The graph is
        released afterwards, so a second call without a fresh forward pass
        raises.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("backward() called twice on the same graph; run forward again")
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad (was it computed under no_grad?)")

        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            node._parents = ()
            node._backward = None
        self._consumed = True

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives

def add(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def tensor_sum(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(np.asarray(a.data.mean()), (a,),
                 lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def identity(a: Tensor) -> Tensor:
    return a


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_ACT_FN = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid, "identity": identity}


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis``; gradients are split back to each part."""
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w.T + b`` as one recorded node."""
    if x.data.ndim != 2:
        raise ShapeError(f"linear expects a 2-d input, got shape {x.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input dim {x.shape[1]} does not match layer input dim {w.shape[1]}")
    xd, wd = x.data, w.data

    def backward(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _make(xd @ wd.T + b.data, (x, w, b), backward)


# -------------------------------------------------------------------- losses

def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be [batch x K], got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape[0] if labels.ndim else 0} labels for batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise ValueError(f"label {bad} out of range [0, {k})")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / n,)

    return _make(np.asarray(loss), (logits,), backward)


def mse(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    diff = pred.data - target
    n = diff.size
    return _make(np.asarray((diff * diff).mean()), (pred,), lambda g: (g * 2.0 * diff / n,))


# ----------------------------------------------------------------------- MLP

class Mlp:
    """Fully-connected network: a list of ``(W [out x in], b [out])`` layers.

    ``activations[i]`` is applied after layer ``i``.
    """

    def __init__(self, layers: list[tuple[Tensor, Tensor]], activations: list[str]):
        if len(layers) != len(activations):
            raise ValueError("one activation per layer required")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        for i in range(1, len(layers)):
            if layers[i][0].shape[1] != layers[i - 1][0].shape[0]:
                raise ShapeError(
                    f"layer {i} input dim {layers[i][0].shape[1]} != layer {i - 1} output dim "
                    f"{layers[i - 1][0].shape[0]}")
        self.layers = layers
        self.activations = list(activations)

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [w.shape[0] for w, _ in self.layers]

    def parameters(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer]

    def copy(self) -> "Mlp":
        return Mlp([(Tensor(w.data.copy(), True), Tensor(b.data.copy(), True))
                    for w, b in self.layers], self.activations)

    def __call__(self, x: Tensor) -> Tensor:
        return forward_mlp(self, x)


def init_mlp(sizes: Sequence[int], activations: Sequence[str] | str,
             rng: np.random.Generator) -> Mlp:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases.

    ``activations`` is either one name per layer or a single name used for
    every hidden layer with an identity output layer.
    """
    if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
        raise ValueError(f"invalid layer sizes {list(sizes)}")
    n_layers = len(sizes) - 1
    if isinstance(activations, str):
        activations = [activations] * (n_layers - 1) + ["identity"]
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        layers.append((Tensor(w, True), Tensor(b, True)))
    return Mlp(layers, list(activations))


def forward_mlp(params: Mlp, x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"input must be [batch x in], got shape {x.shape}")
    if x.shape[1] != params.in_dim:
        raise ShapeError(f"input dim {x.shape[1]} does not match first layer input dim {params.in_dim}")
    h = x
    for (w, b), act in zip(params.layers, params.activations):
        h = _ACT_FN[act](linear(h, w, b))
    return h


# ---------------------------------------------------------------- optimizers

@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float
    decay: float = 1.0
    floor: float = 1e-3

    def __post_init__(self):
        if self.learning_rate <= 0 or self.floor <= 0:
            raise ValueError("learning_rate and floor must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.floor > self.learning_rate:
            raise ValueError("floor must not exceed learning_rate")

    def decayed(self) -> "SgdConfig":
        return replace(self, learning_rate=max(self.floor, self.learning_rate * self.decay))


def sgd_step(params: Iterable[Tensor] | Mlp, config: SgdConfig):
    """In-place ``w -= lr * grad`` then clear grads.

    Returns ``(params, next_config)`` where the next config carries the
    decayed learning rate.
    """
    tensors = params.parameters() if isinstance(params, Mlp) else list(params)
    for i, t in enumerate(tensors):
        if t.grad is None:
            raise RuntimeError(f"parameter {i} has no gradient; call backward() first")
    lr = config.learning_rate
    for t in tensors:
        t.data -= lr * t.grad
        t.grad = None
    return params, config.decayed()


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        out = {"t": np.asarray(self.t)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out

    def load_state(self, state: dict[str, np.ndarray]):
        self.t = int(state["t"])
        for i in range(len(self.params)):
            self.m[i][...] = state[f"m{i}"]
            self.v[i][...] = state[f"v{i}"]
