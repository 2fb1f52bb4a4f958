"""Reverse-mode automatic differentiation on float64 numpy arrays.

A tape is built eagerly while the objective runs forward: every operation
on a :class:`Var` records its parents and a vector-Jacobian closure.  A
single call to :meth:`Var.backward` walks the tape once in reverse
topological order.  Only first-order gradients are supported; higher-order
terms needed elsewhere are obtained in closed form or by finite
differences (:func:`finite_diff_grad`).

The free functions (:func:`matmul`, :func:`relu`, ...) dispatch on their
argument, so the same forward code serves differentiable training and
plain-ndarray inference.
"""
from __future__ import annotations

from collections.abc import Iterator, Mapping

import numpy as np


class NonFiniteError(ArithmeticError):
    """A forward or backward value contains NaN or infinity."""


class GradientError(ValueError):
    """The requested gradient is ill-posed (for example a non-scalar root)."""


def _as_f64(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _check_finite(value: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")
    return value


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


class Var:
    """One tape node: a float64 array plus backward bookkeeping."""

    __slots__ = ("value", "grad", "_parents", "_vjp", "_op")

    # Keep numpy from consuming Var in mixed expressions; reflected
    # operators below handle ndarray-on-the-left arithmetic instead.
    __array_ufunc__ = None

    def __init__(self, value, _parents=(), _vjp=None, _op="leaf"):
        self.value = _check_finite(_as_f64(value), _op)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Var, ...] = _parents
        self._vjp = _vjp
        self._op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(op={self._op!r}, shape={self.value.shape})"

    # -- graph construction helpers -------------------------------------

    @staticmethod
    def _lift(other) -> "Var":
        return other if isinstance(other, Var) else Var(other, _op="const")

    def _node(self, value, parents, vjp, op) -> "Var":
        return Var(value, _parents=parents, _vjp=vjp, _op=op)

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        other = self._lift(other)
        out_value = self.value + other.value

        def vjp(g):
            return (_unbroadcast(g, self.value.shape),
                    _unbroadcast(g, other.value.shape))

        return self._node(out_value, (self, other), vjp, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        out_value = self.value - other.value

        def vjp(g):
            return (_unbroadcast(g, self.value.shape),
                    _unbroadcast(-g, other.value.shape))

        return self._node(out_value, (self, other), vjp, "sub")

    def __rsub__(self, other):
        return self._lift(other).__sub__(self)

    def __mul__(self, other):
        other = self._lift(other)
        out_value = self.value * other.value
        a, b = self.value, other.value

        def vjp(g):
            return (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))

        return self._node(out_value, (self, other), vjp, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        out_value = self.value / other.value
        a, b = self.value, other.value

        def vjp(g):
            return (_unbroadcast(g / b, a.shape),
                    _unbroadcast(-g * a / (b * b), b.shape))

        return self._node(out_value, (self, other), vjp, "div")

    def __rtruediv__(self, other):
        return self._lift(other).__truediv__(self)

    def __neg__(self):
        def vjp(g):
            return (-g,)

        return self._node(-self.value, (self,), vjp, "neg")

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only constant scalar exponents are supported")
        out_value = self.value ** exponent
        x = self.value

        def vjp(g):
            return (g * exponent * x ** (exponent - 1),)

        return self._node(out_value, (self,), vjp, "pow")

    # -- shape ops (ndarray-compatible signatures) ------------------------

    def sum(self, axis=None, keepdims=False):
        out_value = self.value.sum(axis=axis, keepdims=keepdims)
        in_shape = self.value.shape

        def vjp(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, in_shape).copy(),)

        return self._node(out_value, (self,), vjp, "sum")

    def mean(self, axis=None, keepdims=False):
        count = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        in_shape = self.value.shape

        def vjp(g):
            return (np.asarray(g).reshape(in_shape),)

        return self._node(self.value.reshape(shape), (self,), vjp, "reshape")

    # -- backward pass -----------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable node's `.grad`.

        The root must be scalar.  Parents are visited in reverse
        topological order; accumulation order is fixed by construction
        order, so repeated runs are bit-identical.
        """
        if self.value.size != 1:
            raise GradientError("backward requires a scalar root")

        order: list[Var] = []
        seen: set[int] = set()
        stack: list[tuple[Var, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node.grad is None or node._vjp is None:
                continue
            parent_grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                g = _check_finite(np.asarray(g, dtype=np.float64), node._op)
                parent.grad = g if parent.grad is None else parent.grad + g
            node._parents = ()
            node._vjp = None


# -- dispatching primitives ----------------------------------------------


def matmul(a, b):
    """Matrix product; differentiable when either argument is a Var."""
    if not isinstance(a, Var) and not isinstance(b, Var):
        return np.matmul(a, b)
    a, b = Var._lift(a), Var._lift(b)
    av, bv = a.value, b.value

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return (_unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape))

    return a._node(np.matmul(av, bv), (a, b), vjp, "matmul")


def relu(x):
    if not isinstance(x, Var):
        return np.maximum(x, 0.0)
    mask = x.value > 0.0

    def vjp(g):
        return (g * mask,)

    return x._node(np.maximum(x.value, 0.0), (x,), vjp, "relu")


def tanh(x):
    if not isinstance(x, Var):
        return np.tanh(x)
    t = np.tanh(x.value)

    def vjp(g):
        return (g * (1.0 - t * t),)

    return x._node(t, (x,), vjp, "tanh")


def sqrt(x):
    if not isinstance(x, Var):
        return np.sqrt(x)
    s = np.sqrt(x.value)

    def vjp(g):
        return (g * 0.5 / s,)

    return x._node(s, (x,), vjp, "sqrt")


def square(x):
    if not isinstance(x, Var):
        return np.square(x)
    xv = x.value

    def vjp(g):
        return (g * 2.0 * xv,)

    return x._node(np.square(xv), (x,), vjp, "square")


def absolute(x):
    """|x|, with subgradient sign(x) (zero at the kink)."""
    if not isinstance(x, Var):
        return np.abs(x)
    s = np.sign(x.value)

    def vjp(g):
        return (g * s,)

    return x._node(np.abs(x.value), (x,), vjp, "abs")


def sin(x):
    if not isinstance(x, Var):
        return np.sin(x)
    c = np.cos(x.value)

    def vjp(g):
        return (g * c,)

    return x._node(np.sin(x.value), (x,), vjp, "sin")


def value_of(x) -> np.ndarray:
    """Plain ndarray view of a Var or array-like."""
    return x.value if isinstance(x, Var) else _as_f64(x)


# -- parameter collections -------------------------------------------------


class ParamSet(Mapping):
    """Immutable, ordered name -> float64 ndarray mapping.

    Iteration order is insertion order and is the canonical layout used
    by optimizers, gradients, serialization and flattening.
    """

    __slots__ = ("_data",)

    def __init__(self, data: Mapping[str, np.ndarray]):
        store: dict[str, np.ndarray] = {}
        for name, value in data.items():
            if not isinstance(name, str) or not name:
                raise ValueError("parameter names must be non-empty strings")
            arr = _as_f64(value).copy()
            arr.flags.writeable = False
            store[name] = arr
        self._data = store

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}:{v.shape}" for k, v in self._data.items())
        return f"ParamSet({inner})"

    def layout(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        return tuple((name, arr.shape) for name, arr in self._data.items())

    def same_layout(self, other: "ParamSet") -> bool:
        return self.layout() == other.layout()

    def map(self, fn) -> "ParamSet":
        return ParamSet({name: fn(arr) for name, arr in self._data.items()})

    def combine(self, other: "ParamSet", fn) -> "ParamSet":
        if not self.same_layout(other):
            raise ValueError("parameter layout mismatch")
        return ParamSet({name: fn(arr, other[name]) for name, arr in self._data.items()})

    def flat(self) -> np.ndarray:
        if not self._data:
            return np.zeros(0)
        return np.concatenate([arr.ravel() for arr in self._data.values()])

    @classmethod
    def from_flat(cls, layout, values: np.ndarray) -> "ParamSet":
        values = _as_f64(values).ravel()
        out, offset = {}, 0
        for name, shape in layout:
            size = int(np.prod(shape, dtype=np.int64)) if shape else 1
            out[name] = values[offset:offset + size].reshape(shape)
            offset += size
        if offset != values.size:
            raise ValueError("flat vector size does not match layout")
        return cls(out)

    @classmethod
    def zeros_like(cls, other: "ParamSet") -> "ParamSet":
        return other.map(np.zeros_like)

    @classmethod
    def full_like(cls, other: "ParamSet", fill: float) -> "ParamSet":
        return other.map(lambda a: np.full_like(a, fill))


def lift_params(params: ParamSet) -> dict[str, Var]:
    """Wrap each parameter as a differentiable leaf node."""
    return {name: Var(arr, _op=f"param:{name}") for name, arr in params.items()}


def backward_grad(objective, params: ParamSet, has_aux: bool = False):
    """Evaluate `objective(leaves)` and return (value, gradient).

    `objective` receives a dict of Var leaves keyed like `params` and must
    return a scalar Var, or a (Var, aux) pair when `has_aux` is set; the
    return value then becomes (value, aux, gradient).  Parameters the
    objective never touches get a zero gradient of matching shape.
    """
    leaves = lift_params(params)
    result = objective(leaves)
    root, aux = result if has_aux else (result, None)
    if not isinstance(root, Var):
        raise GradientError("objective must return a Var (got a constant)")
    root.backward()
    grads = {}
    for name, leaf in leaves.items():
        grads[name] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
    if has_aux:
        return float(root.value), aux, ParamSet(grads)
    return float(root.value), ParamSet(grads)


def finite_diff_grad(objective, params: ParamSet, eps: float = 1e-6) -> ParamSet:
    """Central-difference gradient oracle.

    `objective` receives a plain dict of float64 ndarrays and must return
    a float.  Cost is two evaluations per scalar parameter, so keep the
    parameter count small.
    """
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    work = {name: arr.copy() for name, arr in params.items()}
    grads = {name: np.zeros_like(arr) for name, arr in params.items()}
    for name, arr in work.items():
        flat = arr.reshape(-1)
        grad_flat = grads[name].reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = float(objective(work))
            flat[i] = keep - eps
            lo = float(objective(work))
            flat[i] = keep
            grad_flat[i] = (hi - lo) / (2.0 * eps)
    return ParamSet(grads)


# -- optimizers -------------------------------------------------------------


class Sgd:
    """Plain gradient descent: p <- p - lr * g."""

    def __init__(self, lr: float):
        if lr < 0.0:
            raise ValueError("learning rate must be non-negative")
        self.lr = float(lr)

    def step(self, params: ParamSet, grads: ParamSet) -> ParamSet:
        _check_grads(params, grads)
        return params.combine(grads, lambda p, g: p - self.lr * g)


class Adam:
    """Adam with bias correction; epsilon sits outside the square root.

    Moment buffers are created on first step and keyed to the parameter
    layout; feeding a different layout later raises.
    """

    def __init__(self, lr: float, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        if lr < 0.0:
            raise ValueError("learning rate must be non-negative")
        b1, b2 = betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        self.lr = float(lr)
        self.betas = (float(b1), float(b2))
        self.eps = float(eps)
        self.t = 0
        self._m: dict[str, np.ndarray] | None = None
        self._v: dict[str, np.ndarray] | None = None
        self._layout = None

    def step(self, params: ParamSet, grads: ParamSet) -> ParamSet:
        _check_grads(params, grads)
        if self._m is None:
            self._m = {k: np.zeros_like(v) for k, v in params.items()}
            self._v = {k: np.zeros_like(v) for k, v in params.items()}
            self._layout = params.layout()
        elif params.layout() != self._layout:
            raise ValueError("optimizer state layout mismatch")
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        out = {}
        for name, p in params.items():
            g = grads[name]
            m = self._m[name] = b1 * self._m[name] + (1.0 - b1) * g
            v = self._v[name] = b2 * self._v[name] + (1.0 - b2) * g * g
            out[name] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return ParamSet(out)


def _check_grads(params: ParamSet, grads: ParamSet) -> None:
    if not params.same_layout(grads):
        raise ValueError("gradient layout does not match parameters")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
