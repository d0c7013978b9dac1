"""Small reverse-mode autodiff engine on dense numpy buffers.

Every tensor holds a numpy array plus an optional backward closure; calling
``backward`` on a scalar walks the recorded graph in reverse topological
order and accumulates gradients into every tensor that requires them.
Float32 is the training default, float64 is used by the test suite so that
finite-difference checks have enough headroom.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateInputError, ShapeError

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (pure forward passes)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense n-dimensional array with an optional gradient buffer.

    ``grad`` is populated by ``backward`` and has the same shape as ``data``.
    Repeated backward passes accumulate; the optimizer clears grads after
    each step.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, _parents=(), _backward_fn=None):
        if isinstance(data, np.ndarray):
            self.data = data
        elif isinstance(data, np.generic):  # numpy scalar: keep its dtype
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward_fn = _backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Leaf tensor sharing this buffer, cut out of the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Parameter:
    """Named trainable tensor; names must be unique within a model."""

    name: str
    tensor: Tensor

    def __post_init__(self):
        self.tensor.requires_grad = True

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _node(data, parents, backward_fn) -> Tensor:
    """Result tensor; records the graph only when some parent needs grads."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward_fn=backward_fn)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / shape ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _node(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _node(out, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _node(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is 0."""
    mask = x.data > 0
    out = np.where(mask, x.data, x.data.dtype.type(0))

    def backward(g):
        return (g * mask,)

    return _node(out, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.data.shape),)

    return _node(out, (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return _node(out, (x,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.ascontiguousarray(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(tensors))
        )

    return _node(out, tuple(tensors), backward)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _node(out, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    count = x.data.size if axis is None else x.data.shape[axis]
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports stacked (batched) operands via np.matmul."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.data.ndim}-d and {b.data.ndim}-d")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _node(out, (a, b), backward)


def frobenius_norm(x: Tensor, axis=None, keepdims=False) -> Tensor:
    """sqrt of the sum of squares; the subgradient at 0 is defined as 0.

    With ``axis=None`` this is the vector L2 norm / matrix Frobenius norm of
    the whole buffer; with an axis tuple it reduces only those axes.
    """
    sq = np.sum(x.data * x.data, axis=axis, keepdims=keepdims)
    out = np.sqrt(sq)

    def backward(g):
        g = np.asarray(g)
        norm = out
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
            norm = np.expand_dims(norm, axis)
        safe = np.where(norm > 0, norm, 1.0)
        scale = np.where(norm > 0, g / safe, 0.0)
        return (scale * x.data,)

    return _node(out, (x,), backward)


# ---------------------------------------------------------------------------
# network ops
# ---------------------------------------------------------------------------

def _sliding_windows(padded: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (N, C, H', W', k, k) view, no copy
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride, :, :]


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation, NCHW input against an (Out, In, k, k) kernel.

    Output spatial size is floor((H + 2*padding - k)/stride) + 1.  Implemented
    as im2col + GEMM; the gradient scatters back through the same layout.
    """
    n, c_in, h, w = x.data.shape
    c_out, c_in_k, kh, kw = kernel.data.shape
    if kh != kw:
        raise ShapeError("only square kernels are supported")
    k = kh
    if c_in_k != c_in:
        raise ShapeError(f"kernel expects {c_in_k} input channels, input has {c_in}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError("kernel larger than padded input")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    win = _sliding_windows(xp, k, stride)  # (N, C, Ho, Wo, k, k)
    _, _, ho, wo, _, _ = win.shape
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c_in * k * k)
    kmat = kernel.data.reshape(c_out, c_in * k * k)
    out = (cols @ kmat.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        grad_kernel = (g2.T @ cols).reshape(c_out, c_in, k, k)
        grad_cols = (g2 @ kmat).reshape(n, ho, wo, c_in, k, k).transpose(0, 3, 1, 2, 4, 5)
        grad_xp = np.zeros_like(xp)
        for ki in range(k):
            for kj in range(k):
                grad_xp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += \
                    grad_cols[:, :, :, :, ki, kj]
        if padding:
            grad_x = grad_xp[:, :, padding:padding + h, padding:padding + w]
        else:
            grad_x = grad_xp
        return grad_x, grad_kernel

    return _node(out, (x, kernel), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T (+ bias), for x of shape (N, F) and weight of shape (K, F)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError("linear expects 2-d input and weight")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(
            f"linear dimension mismatch: input has {x.data.shape[1]} features, "
            f"weight expects {weight.data.shape[1]}"
        )
    out = matmul(x, transpose(weight, (1, 0)))
    if bias is not None:
        out = add(out, bias)
    return out


def global_avg_pool(h: Tensor) -> Tensor:
    """Per-channel spatial mean: (N, C, H, W) -> (N, C)."""
    if h.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got shape {h.data.shape}")
    n, c, hh, ww = h.data.shape
    scale = 1.0 / (hh * ww)
    out = h.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None], h.data.shape) * scale,)

    return _node(out, (h,), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label].

    Stable log-sum-exp forward; backward is (softmax - onehot) / N.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be (N, K), got shape {logits.data.shape}")
    labels = np.asarray(labels)
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range for {k} classes")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    out = np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.data.dtype)

    def backward(g):
        soft = np.exp(logp)
        soft[np.arange(n), labels] -= 1.0
        return (g * soft / n,)

    return _node(out, (logits,), backward)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """a.b / (|a| |b|) for 1-d tensors; zero-norm inputs are rejected."""
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ShapeError("cosine_similarity expects 1-d tensors")
    if a.data.shape != b.data.shape:
        raise ShapeError(f"length mismatch: {a.data.shape} vs {b.data.shape}")
    if not np.any(a.data) or not np.any(b.data):
        raise DegenerateInputError("cosine_similarity on a zero-norm vector")
    dot = tsum(mul(a, b))
    return div(dot, mul(frobenius_norm(a), frobenius_norm(b)))


# ---------------------------------------------------------------------------
# backward pass and optimizer
# ---------------------------------------------------------------------------

def backward(loss: Tensor):
    """Populate ``grad`` on every requires-grad tensor reachable from ``loss``.

    Accumulates into existing grads; callers reset between steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    seed = np.ones_like(loss.data)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    for node in reversed(topo):
        if node._backward_fn is None or node.grad is None:
            continue
        grads = node._backward_fn(node.grad)
        for parent, g in zip(node._parents, grads):
            if not parent.requires_grad or g is None:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g


class SGD:
    """Classical momentum: v <- momentum*v + grad; p <- p - lr*v."""

    def __init__(self, params, lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.tensor.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.tensor.grad is None:
                raise ContractError(f"parameter {p.name!r} has no gradient")
            v *= self.momentum
            v += p.tensor.grad
            p.tensor.data -= (p.tensor.data.dtype.type(self.lr)) * v.astype(p.tensor.data.dtype, copy=False)
            p.tensor.grad = None

    def zero_grad(self):
        for p in self.params:
            p.tensor.grad = None


def he_uniform(shape, fan_in: int, rng: np.random.Generator, dtype) -> np.ndarray:
    """Fan-in-scaled uniform init: U(-sqrt(6/fan_in), +sqrt(6/fan_in))."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
