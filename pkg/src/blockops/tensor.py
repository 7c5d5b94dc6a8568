"""Dense tensors with reverse-mode automatic differentiation.

Every value flowing through a model is a :class:`Tensor` wrapping a numpy
array.  Operations record their parents and a backward closure; calling
``backward()`` on a scalar loss topologically sorts the recorded graph and
accumulates gradients into every reachable tensor that requires them.

The engine is deliberately small: dense arrays, static shapes apart from the
batch dimension, CPU only.  Double precision is the default so that gradient
checks against central finite differences are meaningful; single precision is
available for training runs by constructing parameters as float32.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "parameter",
    "add",
    "sub",
    "mul",
    "matmul",
    "leaky_relu",
    "sigmoid",
    "log",
    "softmax",
    "gumbel_softmax_st",
    "cross_entropy_loss",
    "mse_loss",
    "reshape",
    "transpose",
    "concat",
    "slice_axis",
    "sum_all",
    "mean_all",
]


class Tensor:
    """A node in the autodiff graph.

    ``data`` is always a numpy array.  ``grad`` is populated (same shape as
    ``data``) by a backward pass when ``requires_grad`` is set, either because
    the tensor is a leaf parameter or because one of its ancestors is.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, _parents=(), _backward_fn=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward_fn = _backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, params=None):
        """Reverse-mode pass from this scalar.

        Gradients accumulate into ``grad`` of every tensor on the path that
        requires them.  ``params``, when given, is an iterable of leaf tensors
        that get an explicit zero gradient if the graph never reached them, so
        optimizers can treat the whole parameter set uniformly.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss tensor")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
        # Iterative DFS; model graphs for deep unrolls exceed the recursion limit.
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)
        if params is not None:
            for p in params:
                if p.requires_grad and p.grad is None:
                    p.grad = np.zeros_like(p.data)

    # Operator sugar; scalars are promoted to constant tensors.
    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    def __rmul__(self, other):
        return mul(_lift(other, self.dtype), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, _lift(-1.0, self.dtype))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


def _lift(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _make(data, parents, backward_fn) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, _parents=tuple(parents) if requires else (),
                 _backward_fn=backward_fn if requires else None)
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of the trailing two axes; leading axes broadcast.

    Covers the plain 2-D case as well as the batched forms used by block
    mixing ([batch, N, M] @ [batch, M, d]) and attention heads.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        _accumulate(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    return _make(data, (a, b), backward)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0, 1), got {slope}")
    factor = np.where(x.data >= 0, 1.0, slope)
    data = x.data * factor

    def backward(g):
        _accumulate(x, g * factor)

    return _make(data, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign to avoid overflow in exp for large magnitudes.
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accumulate(x, g * out * (1.0 - out))

    return _make(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    data = np.log(x.data)

    def backward(g):
        _accumulate(x, g / x.data)

    return _make(data, (x,), backward)


def _softmax_data(data: np.ndarray, axis: int) -> np.ndarray:
    shifted = data - data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ValueError(f"softmax axis {axis} invalid for shape {x.data.shape}")
    out = _softmax_data(x.data, axis)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(x, (g - inner) * out)

    return _make(out, (x,), backward)


def gumbel_softmax_st(logits: Tensor, axis: int, temperature: float, rng: np.random.Generator) -> Tensor:
    """Straight-through Gumbel-softmax.

    Forward value is an exact one-hot along ``axis`` selecting the argmax of
    the noise-perturbed logits; the backward pass uses the gradient of the
    underlying soft distribution at the same draw.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not -logits.data.ndim <= axis < logits.data.ndim:
        raise ValueError(f"gumbel axis {axis} invalid for shape {logits.data.shape}")
    eps = 1e-20
    u = rng.random(size=logits.data.shape)
    noise = -np.log(-np.log(u + eps) + eps)
    perturbed = (logits.data + noise) / temperature
    soft = _softmax_data(perturbed, axis)
    hard = np.zeros_like(soft)
    idx = np.argmax(perturbed, axis=axis)
    np.put_along_axis(hard, np.expand_dims(idx, axis), 1.0, axis=axis)

    def backward(g):
        inner = (g * soft).sum(axis=axis, keepdims=True)
        _accumulate(logits, (g - inner) * soft / temperature)

    return _make(hard, (logits,), backward)


def hard_argmax(logits: Tensor, axis: int) -> Tensor:
    """Noise-free one-hot argmax; used as the evaluation-time form of
    straight-through attention.  Not differentiable (treated as constant)."""
    hard = np.zeros_like(logits.data)
    idx = np.argmax(logits.data, axis=axis)
    np.put_along_axis(hard, np.expand_dims(idx, axis), 1.0, axis=axis)
    return Tensor(hard)


def cross_entropy_loss(logits: Tensor, target_index) -> Tensor:
    """Mean softmax cross-entropy over a [batch, classes] tensor."""
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy_loss expects [batch, classes], got shape {logits.data.shape}")
    targets = np.asarray(target_index, dtype=np.int64)
    n, c = logits.data.shape
    if targets.shape != (n,):
        raise ValueError(f"target shape {targets.shape} does not match batch size {n}")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= c:
        raise ValueError("target indices out of range")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    data = np.asarray(-log_probs[np.arange(n), targets].mean(), dtype=logits.data.dtype)

    def backward(g):
        probs = np.exp(log_probs)
        probs[np.arange(n), targets] -= 1.0
        _accumulate(logits, g * probs / n)

    return _make(data, (logits,), backward)


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"mse_loss shapes disagree: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    n = diff.size
    data = np.asarray((diff * diff).sum() / n, dtype=a.data.dtype)

    def backward(g):
        scaled = g * 2.0 * diff / n
        _accumulate(a, scaled)
        _accumulate(b, -scaled)

    return _make(data, (a, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _make(data, (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = x.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(x, g.transpose(inverse))

    return _make(data, (x,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _make(data, tensors, backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    data = x.data[sl]

    def backward(g):
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[sl] += g

    return _make(data, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.data.shape).copy())

    return _make(data, (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    data = np.asarray(x.data.mean(), dtype=x.data.dtype)

    def backward(g):
        _accumulate(x, np.broadcast_to(g / n, x.data.shape).copy())

    return _make(data, (x,), backward)
