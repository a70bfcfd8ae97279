"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a float32 or float64 NumPy array.  Operations build an
acyclic graph; ``backward()`` on a scalar walks it once in reverse
topological order and accumulates gradients into the leaves.  Gradients
accumulate across calls; zeroing is explicit (``grad = None`` means zero).

Network-level operations (convolution, pooling, attention primitives) live
in :mod:`canet.ops`; this module carries the engine plus the elementwise
and reduction arithmetic the loss functions need.
"""

from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after NumPy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self.grad = None
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    # ---- introspection ----

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        grad_flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{grad_flag})"

    # ---- graph construction helper ----

    @staticmethod
    def _make(data, parents, backward):
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        if needs:
            return Tensor(data, requires_grad=True, _parents=tuple(parents),
                          _backward=backward)
        return Tensor(data)

    # ---- backward pass ----

    def backward(self):
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {tuple(self.shape)}"
            )
        if not self.requires_grad:
            raise ValueError("backward on a tensor that does not require grad")

        topo = []
        visited = {id(self)}
        stack = [(self, iter(self._parents))]
        while stack:
            node, it = stack[-1]
            child = next(
                (p for p in it if p.requires_grad and id(p) not in visited), None
            )
            if child is None:
                topo.append(node)
                stack.pop()
            else:
                visited.add(id(child))
                stack.append((child, iter(child._parents)))

        flows = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            gy = flows.pop(id(node), None)
            if gy is None:
                continue
            if node._backward is None:
                node.grad = gy.copy() if node.grad is None else node.grad + gy
                continue
            for parent, g in zip(node._parents, node._backward(gy)):
                if g is None or not parent.requires_grad:
                    continue
                key = id(parent)
                flows[key] = flows[key] + g if key in flows else g

    # ---- elementwise arithmetic ----

    def _coerce(self, other):
        if isinstance(other, Tensor):
            return other
        if isinstance(other, (int, float)) or (
            isinstance(other, np.generic) and np.isscalar(other)
        ):
            return float(other)
        raise TypeError(f"cannot combine Tensor with {type(other).__name__}")

    def __add__(self, other):
        other = self._coerce(other)
        if isinstance(other, float):
            return Tensor._make(self.data + other, (self,), lambda gy: (gy,))
        def bwd(gy):
            return (_unbroadcast(gy, self.data.shape),
                    _unbroadcast(gy, other.data.shape))
        return Tensor._make(self.data + other.data, (self, other), bwd)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda gy: (-gy,))

    def __sub__(self, other):
        other = self._coerce(other)
        if isinstance(other, float):
            return Tensor._make(self.data - other, (self,), lambda gy: (gy,))
        def bwd(gy):
            return (_unbroadcast(gy, self.data.shape),
                    _unbroadcast(-gy, other.data.shape))
        return Tensor._make(self.data - other.data, (self, other), bwd)

    def __rsub__(self, other):
        other = self._coerce(other)
        return Tensor._make(other - self.data, (self,), lambda gy: (-gy,))

    def __mul__(self, other):
        other = self._coerce(other)
        if isinstance(other, float):
            return Tensor._make(self.data * other, (self,),
                                lambda gy: (gy * other,))
        a, b = self.data, other.data
        def bwd(gy):
            return (_unbroadcast(gy * b, a.shape), _unbroadcast(gy * a, b.shape))
        return Tensor._make(a * b, (self, other), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        if isinstance(other, float):
            return Tensor._make(self.data / other, (self,),
                                lambda gy: (gy / other,))
        a, b = self.data, other.data
        def bwd(gy):
            return (_unbroadcast(gy / b, a.shape),
                    _unbroadcast(-gy * a / (b * b), b.shape))
        return Tensor._make(a / b, (self, other), bwd)

    def __rtruediv__(self, other):
        other = self._coerce(other)
        a = self.data
        return Tensor._make(other / a, (self,),
                            lambda gy: (-gy * other / (a * a),))

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("exponent must be a number")
        e = float(exponent)
        a = self.data
        return Tensor._make(a ** e, (self,), lambda gy: (gy * e * a ** (e - 1.0),))

    def log(self):
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda gy: (gy / a,))

    def clamp(self, lo, hi):
        a = self.data
        mask = (a >= lo) & (a <= hi)
        def bwd(gy):
            return (np.where(mask, gy, 0.0),)
        return Tensor._make(np.clip(a, lo, hi), (self,), bwd)

    # ---- reductions ----

    def sum(self, axis=None, keepdims=False):
        shape = self.data.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)
        def bwd(gy):
            g = gy
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)
        return Tensor._make(out, (self,), bwd)

    def mean(self, axis=None, keepdims=False):
        shape = self.data.shape
        out = self.data.mean(axis=axis, keepdims=keepdims)
        n = self.data.size / out.size
        def bwd(gy):
            g = gy
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / n, shape),)
        return Tensor._make(out, (self,), bwd)

    # ---- shape manipulation ----

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.data.shape
        return Tensor._make(self.data.reshape(shape), (self,),
                            lambda gy: (gy.reshape(orig),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(int(i) for i in np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,),
                            lambda gy: (gy.transpose(inverse),))
