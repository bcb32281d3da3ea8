"""Dense-tensor arithmetic with tape-based reverse-mode differentiation.

Coarse-grained ops (matmul, softmax, layer norm, relu, concat, slice,
reductions, elementwise) over row-major numpy arrays.  Every forward op
checks its output for NaN/Inf and raises :class:`NumericError` naming the
op, because the downstream survival loss overflows silently otherwise.

Tensors are immutable values once created; graphs are built per forward
pass and walked by :func:`backward`.  Single-threaded per training run.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError

__all__ = [
    "Tensor",
    "GradTape",
    "backward",
    "zero_grad",
    "matmul",
    "transpose",
    "softmax_rows",
    "layer_norm",
    "relu",
    "exp",
    "log",
    "concat",
    "reshape",
    "tensor_sum",
    "tensor_mean",
    "check_gradients",
    "FlopCounter",
]

_FLOP_COUNTERS: list["FlopCounter"] = []


class FlopCounter:
    """Counts 2*m*k*n per matmul executed inside the ``with`` block."""

    def __init__(self):
        self.total = 0

    def __enter__(self):
        _FLOP_COUNTERS.append(self)
        return self

    def __exit__(self, *exc):
        _FLOP_COUNTERS.remove(self)
        return False


def _guard_finite(op: str, data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by op '{op}'")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense real-valued array participating in a differentiation graph.

    ``data`` is a row-major numpy array (float64 in tests and oracles;
    float32 permitted for training).  ``grad`` accumulates across repeated
    :func:`backward` calls until :func:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        _guard_finite("tensor", arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...], op: str, backward_fn):
        """Internal node constructor; ``backward_fn(g)`` returns parent grads."""
        _guard_finite(op, data)
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        if out.requires_grad:
            out._parents = parents
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        out._op = op
        return out

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)

    # -- elementwise arithmetic (numpy broadcasting, grads un-broadcast) ------

    @staticmethod
    def _coerce(other, like: "Tensor") -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=like.data.dtype))

    def __add__(self, other):
        other = Tensor._coerce(other, self)
        out_data = self.data + other.data
        a, b = self, other

        def bwd(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._from_op(out_data, (a, b), "add", bwd)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor._from_op(-self.data, (a,), "neg", lambda g: (-g,))

    def __sub__(self, other):
        other = Tensor._coerce(other, self)
        a, b = self, other

        def bwd(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._from_op(a.data - b.data, (a, b), "sub", bwd)

    def __rsub__(self, other):
        return Tensor._coerce(other, self).__sub__(self)

    def __mul__(self, other):
        other = Tensor._coerce(other, self)
        a, b = self, other

        def bwd(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._from_op(a.data * b.data, (a, b), "mul", bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._coerce(other, self)
        a, b = self, other

        def bwd(g):
            ga = _unbroadcast(g / b.data, a.shape)
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
            return ga, gb

        return Tensor._from_op(a.data / b.data, (a, b), "div", bwd)

    def __rtruediv__(self, other):
        return Tensor._coerce(other, self).__truediv__(self)

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise ShapeError("tensor exponent must be a python scalar")
        a = self

        def bwd(g):
            return (g * p * a.data ** (p - 1),)

        return Tensor._from_op(self.data**p, (a,), "pow", bwd)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        a = self
        out_data = self.data[key]

        def bwd(g):
            full = np.zeros_like(a.data)
            full[key] = g
            return (full,)

        return Tensor._from_op(np.ascontiguousarray(out_data), (a,), "slice", bwd)

    @property
    def T(self):
        return transpose(self)


# -- graph walk ---------------------------------------------------------------


class GradTape:
    """Topologically ordered record of the ops reachable from a scalar root,
    plus the map from tensor identity to accumulated gradient."""

    def __init__(self, root: Tensor):
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.data.shape}")
        self.root = root
        self.order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grads: dict[int, np.ndarray] = {}

    def run(self) -> dict[Tensor, np.ndarray]:
        if not self.root.requires_grad:
            return {}  # constant root: every gradient is zero
        by_id: dict[int, Tensor] = {id(t): t for t in self.order}
        self.grads[id(self.root)] = np.ones_like(self.root.data)
        for node in reversed(self.order):
            g = self.grads.get(id(node))
            if g is None or node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if not parent.requires_grad or pg is None:
                    continue
                acc = self.grads.get(id(parent))
                self.grads[id(parent)] = pg if acc is None else acc + pg
        result: dict[Tensor, np.ndarray] = {}
        for tid, g in self.grads.items():
            t = by_id[tid]
            t.grad = g if t.grad is None else t.grad + g
            result[t] = g
        return result


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode pass from a scalar root.

    Accumulates into ``.grad`` of every ``requires_grad`` tensor in the
    graph; repeated calls without :func:`zero_grad` keep accumulating.
    Returns the gradient map of this pass alone.
    """
    return GradTape(root).run()


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


# -- named ops ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with registered backward rule."""
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise ShapeError("matmul expects Tensor operands")
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data
    if _FLOP_COUNTERS:
        m, k = a.data.shape
        n = b.data.shape[1]
        for c in _FLOP_COUNTERS:
            c.total += 2 * m * k * n

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(out_data, (a, b), "matmul", bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got shape {a.data.shape}")
    return Tensor._from_op(np.ascontiguousarray(a.data.T), (a,), "transpose", lambda g: (g.T,))


def softmax_rows(m: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    if m.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D tensor, got shape {m.data.shape}")
    shifted = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        # d softmax: s * (g - sum(g * s))
        dot = (g * s).sum(axis=1, keepdims=True)
        return ((g - dot) * s,)

    return Tensor._from_op(s, (m,), "softmax_rows", bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each trailing-axis vector to mean 0 / variance 1, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        dgain = _unbroadcast(g * xhat, gain.data.shape)
        dbias = _unbroadcast(g, bias.data.shape)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        return dx, dgain, dbias

    return Tensor._from_op(out, (x, gain, bias), "layer_norm", bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), "relu", lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return Tensor._from_op(out, (x,), "exp", lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return Tensor._from_op(out, (x,), "log", lambda g: (g / x.data,))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        slicer = [slice(None)] * g.ndim
        pieces = []
        for i in range(len(sizes)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(slicer)])
        return tuple(pieces)

    return Tensor._from_op(out_data, tensors, "concat", bwd)


def reshape(x: Tensor, shape) -> Tensor:
    a = x
    return Tensor._from_op(
        np.ascontiguousarray(x.data.reshape(shape)), (a,), "reshape",
        lambda g: (g.reshape(a.data.shape),),
    )


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    a = x

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.data.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (a,), "sum", bwd)


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        count = x.data.shape[axis]
    return tensor_sum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


# -- finite-difference oracle ---------------------------------------------------


def check_gradients(f, x: Tensor, h: float = 1e-5, max_coords: int | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor and is re-evaluated at perturbed
    copies of ``x``.  Error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.  ``max_coords`` caps the
    number of coordinates checked (seeded subsample for large tensors).
    """
    base = np.asarray(x.data, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if out.data.size != 1:
        raise ShapeError("check_gradients needs a scalar-valued function")
    backward(out)
    analytic = leaf.grad
    if analytic is None:
        analytic = np.zeros_like(base)

    n = base.size
    coords = np.arange(n)
    if max_coords is not None and n > max_coords:
        gen = rng if rng is not None else np.random.default_rng(0)
        coords = gen.choice(n, size=max_coords, replace=False)

    flat = base.ravel()
    max_err = 0.0
    for i in coords:
        bump = np.zeros_like(flat)
        bump[i] = h
        f_plus = float(f(Tensor((flat + bump).reshape(base.shape))).data.reshape(()))
        f_minus = float(f(Tensor((flat - bump).reshape(base.shape))).data.reshape(()))
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = analytic.ravel()[i]
        err = abs(a - numeric) / max(1.0, abs(a))
        if err > max_err:
            max_err = err
    return float(max_err)
