"""Reverse-mode automatic differentiation over numpy arrays.

A small tape-based engine: every op builds a node holding its parents and a
vector-Jacobian-product closure. ``Tensor.backward()`` walks the graph in
reverse topological order and accumulates gradients into ``.grad`` of the
leaves that were created with ``requires_grad=True``.

Only the ops the localization pipeline needs are implemented. All math is
done in the dtype of the inputs (float64 by default); gradients are always
accumulated in float64.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "parameter",
    "concatenate",
    "stack",
    "matmul",
    "maximum",
    "where",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (undo numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self._parents = parents
        self._vjp = vjp
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    # ---- bookkeeping -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad requires a scalar tensor")
            grad = np.ones_like(self.data, dtype=np.float64)
        else:
            grad = np.asarray(grad, dtype=np.float64)

        # iterative topological sort (graphs can be deep)
        order, seen, stack_ = [], set(), [(self, False)]
        while stack_:
            node, done = stack_.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack_.append((p, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        # leaves reached directly (self is a leaf)
        if not self._parents and self.requires_grad and self.grad is None:
            self.grad = grad

    # ---- arithmetic ------------------------------------------------------

    def __add__(self, other):
        o = _as_tensor(other)
        return Tensor(
            self.data + o.data,
            parents=(self, o),
            vjp=lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, o.shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        o = _as_tensor(other)
        return Tensor(
            self.data - o.data,
            parents=(self, o),
            vjp=lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, o.shape)),
        )

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        o = _as_tensor(other)
        return Tensor(
            self.data * o.data,
            parents=(self, o),
            vjp=lambda g: (
                _unbroadcast(g * o.data, self.shape),
                _unbroadcast(g * self.data, o.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = _as_tensor(other)
        return Tensor(
            self.data / o.data,
            parents=(self, o),
            vjp=lambda g: (
                _unbroadcast(g / o.data, self.shape),
                _unbroadcast(-g * self.data / (o.data * o.data), o.shape),
            ),
        )

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __neg__(self):
        return Tensor(-self.data, parents=(self,), vjp=lambda g: (-g,))

    def __pow__(self, exponent):
        if not np.isscalar(exponent):
            raise TypeError("only scalar exponents are supported")
        out = self.data ** exponent
        return Tensor(
            out,
            parents=(self,),
            vjp=lambda g: (g * exponent * self.data ** (exponent - 1),),
        )

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    # ---- elementwise functions --------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return Tensor(out, parents=(self,), vjp=lambda g: (g * out,))

    def log(self):
        return Tensor(np.log(self.data), parents=(self,), vjp=lambda g: (g / self.data,))

    def safe_log(self, floor=1e-12):
        """log(max(x, floor)); zero gradient where clamped."""
        clamped = np.maximum(self.data, floor)
        inside = self.data > floor
        return Tensor(
            np.log(clamped),
            parents=(self,),
            vjp=lambda g: (np.where(inside, g / clamped, 0.0),),
        )

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor(out, parents=(self,), vjp=lambda g: (g * 0.5 / out,))

    def abs(self):
        sign = np.sign(self.data)
        return Tensor(np.abs(self.data), parents=(self,), vjp=lambda g: (g * sign,))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor(out, parents=(self,), vjp=lambda g: (g * (1.0 - out * out),))

    def sin(self):
        return Tensor(np.sin(self.data), parents=(self,), vjp=lambda g: (g * np.cos(self.data),))

    def cos(self):
        return Tensor(np.cos(self.data), parents=(self,), vjp=lambda g: (-g * np.sin(self.data),))

    def sigmoid(self):
        out = 0.5 * (1.0 + np.tanh(0.5 * self.data))
        return Tensor(out, parents=(self,), vjp=lambda g: (g * out * (1.0 - out),))

    def softplus(self):
        out = np.logaddexp(0.0, self.data)
        sig = 0.5 * (1.0 + np.tanh(0.5 * self.data))
        return Tensor(out, parents=(self,), vjp=lambda g: (g * sig,))

    def relu(self):
        mask = self.data > 0.0
        return Tensor(
            np.where(mask, self.data, 0.0),
            parents=(self,),
            vjp=lambda g: (np.where(mask, g, 0.0),),
        )

    # ---- reductions --------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, self.shape).copy(),)
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axis)
            return (np.broadcast_to(gg, self.shape).copy(),)

        return Tensor(out, parents=(self,), vjp=vjp)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        elif isinstance(axis, tuple):
            n = int(np.prod([self.shape[a] for a in axis]))
        else:
            n = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def max(self, axis, keepdims=False):
        """Max along one axis; gradient routed to the first argmax."""
        out = self.data.max(axis=axis, keepdims=keepdims)
        arg = self.data.argmax(axis=axis)

        def vjp(g):
            gg = g if keepdims else np.expand_dims(g, axis)
            buf = np.zeros_like(self.data, dtype=np.float64)
            np.put_along_axis(buf, np.expand_dims(arg, axis), gg, axis=axis)
            return (buf,)

        return Tensor(out, parents=(self,), vjp=vjp)

    # ---- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor(
            self.data.reshape(shape),
            parents=(self,),
            vjp=lambda g: (g.reshape(old),),
        )

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return Tensor(
            self.data.transpose(axes),
            parents=(self,),
            vjp=lambda g: (g.transpose(inv),),
        )

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, idx):
        out = self.data[idx]

        def vjp(g):
            buf = np.zeros(self.shape, dtype=np.float64)
            np.add.at(buf, idx, g)
            return (buf,)

        return Tensor(out, parents=(self,), vjp=vjp)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data) -> Tensor:
    """Constant (non-trainable) tensor."""
    return Tensor(data)


def parameter(data) -> Tensor:
    """Trainable leaf tensor."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim > 2 or b.ndim > 2:
        raise ValueError("matmul supports 1-D and 2-D operands only")
    out = a.data @ b.data

    def vjp(g):
        ad, bd = a.data, b.data
        if a.ndim == 1 and b.ndim == 1:  # dot -> scalar
            return (g * bd, g * ad)
        if a.ndim == 1:  # (k,) @ (k,n) -> (n,)
            return (g @ bd.T, np.outer(ad, g))
        if b.ndim == 1:  # (m,k) @ (k,) -> (m,)
            return (np.outer(g, bd), ad.T @ g)
        return (g @ bd.T, ad.T @ g)

    return Tensor(out, parents=(a, b), vjp=vjp)


def maximum(a: Tensor, b) -> Tensor:
    """Elementwise max; at exact ties the gradient is routed to `b`."""
    a, b = _as_tensor(a), _as_tensor(b)
    take_a = a.data > b.data
    out = np.where(take_a, a.data, b.data)
    return Tensor(
        out,
        parents=(a, b),
        vjp=lambda g: (
            _unbroadcast(np.where(take_a, g, 0.0), a.shape),
            _unbroadcast(np.where(take_a, 0.0, g), b.shape),
        ),
    )


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return Tensor(
        np.where(cond, a.data, b.data),
        parents=(a, b),
        vjp=lambda g: (
            _unbroadcast(np.where(cond, g, 0.0), a.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.shape),
        ),
    )


def atan2(y: Tensor, x: Tensor) -> Tensor:
    y, x = _as_tensor(y), _as_tensor(x)
    denom = x.data * x.data + y.data * y.data
    return Tensor(
        np.arctan2(y.data, x.data),
        parents=(y, x),
        vjp=lambda g: (
            _unbroadcast(g * x.data / denom, y.shape),
            _unbroadcast(-g * y.data / denom, x.shape),
        ),
    )


def concatenate(tensors, axis=0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    out = np.concatenate([t.data for t in ts], axis=axis)

    def vjp(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return Tensor(out, parents=tuple(ts), vjp=vjp)


def stack(tensors, axis=0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return Tensor(out, parents=tuple(ts), vjp=vjp)


def softmax(x: Tensor, axis=-1) -> Tensor:
    """Numerically stable softmax. The max shift is treated as a constant,
    which leaves both the value and the gradient exact."""
    shift = np.max(x.data, axis=axis, keepdims=True)
    e = (x - tensor(shift)).exp()
    return e / e.sum(axis=axis, keepdims=True)


def entropy(p: Tensor, axis=-1) -> Tensor:
    """Shannon entropy in nats with the 0*log(0) = 0 convention."""
    return -(p * p.safe_log()).sum(axis=axis)


def l2_normalize(x: Tensor, axis=-1, eps=1e-24) -> Tensor:
    n = ((x * x).sum(axis=axis, keepdims=True) + eps).sqrt()
    return x / n


def numeric_gradient(f, x0: np.ndarray, indices=None, rel_step=1e-5) -> np.ndarray:
    """Central finite differences of scalar f at x0 (flat vector in/out).

    The step is scaled per coordinate by max(1, |x|). Returns the gradient
    only at `indices` (all coordinates when None).
    """
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    if indices is None:
        indices = np.arange(x0.size)
    grad = np.zeros(len(indices), dtype=np.float64)
    for out_i, i in enumerate(indices):
        h = rel_step * max(1.0, abs(x0[i]))
        xp = x0.copy()
        xp[i] += h
        xm = x0.copy()
        xm[i] -= h
        grad[out_i] = (f(xp) - f(xm)) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor=1e-8) -> float:
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
