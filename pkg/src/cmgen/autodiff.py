"""Minimal reverse-mode autodiff over dense numpy arrays.

Only the primitives the denoiser and losses need are implemented:
matmul, add, sub, mul, relu, sum, mean, masked mean, abs, square,
concat and slicing. Every public operation checks its result for
NaN/Inf and raises instead of propagating silently.

Arrays default to float64; float32 is allowed for training speed via
the ``dtype`` argument of :func:`tensor` / :class:`Rng` draws.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Tensor", "Rng", "tensor", "backward", "NonFiniteError"]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def _check_finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by '{op}'")
    return data


class Tensor:
    """A node in the gradient tape.

    ``requires_grad`` marks leaf parameters; interior nodes track their
    parents and a backward closure. The tape is single-threaded per
    training step and replaying it is deterministic (pure numpy ops).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64 if np.asarray(data).dtype.kind != "f" else None)
        _check_finite(self.data, op)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward_fn
        self._op = op

    @property
    def shape(self):
        return self.data.shape

    # -- graph construction helpers ------------------------------------

    def _accum(self, g: np.ndarray) -> None:
        g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, op="detach")

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op})"


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# -- primitives ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data + b.data, parents=(a, b), op="add")
    out._backward = lambda g: (a._accum(g), b._accum(g))
    return out


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data - b.data, parents=(a, b), op="sub")
    out._backward = lambda g: (a._accum(g), b._accum(-g))
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data * b.data, parents=(a, b), op="mul")
    out._backward = lambda g: (a._accum(g * b.data), b._accum(g * a.data))
    return out


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.shape[-1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data, parents=(a, b), op="matmul")
    out._backward = lambda g: (a._accum(g @ b.data.T), b._accum(a.data.T @ g))
    return out


def relu(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.maximum(a.data, 0.0), parents=(a,), op="relu")
    out._backward = lambda g: a._accum(g * (a.data > 0.0))
    return out


def abs_(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.abs(a.data), parents=(a,), op="abs")
    out._backward = lambda g: a._accum(g * np.sign(a.data))
    return out


def square(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data * a.data, parents=(a,), op="square")
    out._backward = lambda g: a._accum(g * 2.0 * a.data)
    return out


def sum_(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.sum(a.data), parents=(a,), op="sum")
    out._backward = lambda g: a._accum(np.broadcast_to(g, a.data.shape))
    return out


def mean(a) -> Tensor:
    a = _wrap(a)
    n = a.data.size
    out = Tensor(np.mean(a.data), parents=(a,), op="mean")
    out._backward = lambda g: a._accum(np.broadcast_to(g / n, a.data.shape))
    return out


def masked_mean(a, mask) -> Tensor:
    """Mean of ``a`` over entries where ``mask`` is true.

    ``mask`` is a plain boolean array broadcastable to ``a``; it carries
    no gradient.
    """
    a = _wrap(a)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.data.shape)
    n = int(m.sum())
    if n == 0:
        raise ValueError("masked_mean over empty mask")
    out = Tensor(float(a.data[m].sum() / n), parents=(a,), op="masked_mean")
    out._backward = lambda g: a._accum(g * m.astype(a.data.dtype) / n)
    return out


def concat(tensors, axis=0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 parents=tuple(tensors), op="concat")
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accum(piece)

    out._backward = _bw
    return out


def slice_(a, idx) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data[idx], parents=(a,), op="slice")

    def _bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        a._accum(full)

    out._backward = _bw
    return out


# -- backward pass ------------------------------------------------------


def backward(loss: Tensor, params=None) -> dict:
    """Backpropagate from a scalar ``loss``.

    Returns a dict mapping each requested parameter tensor (by ``id``) to
    its gradient array; parameters not reachable from the loss get exact
    zeros. If ``params`` is None, gradients are left on the tensors'
    ``.grad`` attributes only.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
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
            if id(p) not in seen:
                stack.append((p, False))

    for node in topo:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    if params is None:
        return {}
    grads = {}
    for p in params:
        grads[id(p)] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return grads


# -- randomness ---------------------------------------------------------


class Rng:
    """PCG64-backed random stream; same seed gives the same stream on
    every platform. All randomness in the engine flows through this."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def gaussian(self, shape, dtype=np.float64) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=dtype)

    def uniform(self, shape=()) -> np.ndarray:
        return self._gen.random(size=shape)

    def choice(self, n: int, p=None) -> int:
        return int(self._gen.choice(n, p=p))

    def integers(self, low, high) -> int:
        return int(self._gen.integers(low, high))

    def integer_array(self, low, high, size) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state

    def spawn(self, offset: int) -> "Rng":
        """Derive an independent stream for a sub-task."""
        return Rng(self.seed * 1_000_003 + offset)
