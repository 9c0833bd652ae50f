"""Dense float64 tensors with a reverse-mode differentiation tape.

Everything downstream (warping, losses, the generator) builds its graphs out
of the operations here.  Tensors are numpy-backed, always float64, and
immutable by convention: ops return new tensors and record a backward rule
linking them to their parents.  There is no broadcasting beyond
scalar-with-tensor; shape mismatches raise :class:`ShapeError` naming both
shapes, which keeps the invariant tests unambiguous.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """An operation's precondition was violated."""


class EvaluationError(RuntimeError):
    """A checked function produced non-finite values."""


def _as_array(data) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


class Tensor:
    """A float64 array plus its position in the differentiation graph.

    ``_backward`` maps the output gradient to a tuple of parent gradients
    (entries may be None).  Leaf tensors have no parents; gradients flow to
    them when :func:`backward` is called on a scalar root.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in _parents
        )
        self._parents = tuple(_parents)
        self._backward = _backward

    # -- basic introspection ------------------------------------------------

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
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / float(other))

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def backward(self):
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(a: Tensor, b: Tensor, opname: str):
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} differ")


def _binary_operands(a, b, opname):
    """Coerce to (Tensor, Tensor-or-float). Only scalar broadcasting allowed."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.data.size == 1 and b.data.size != 1:
            return b, a, True  # swapped, scalar-tensor second
        if b.data.size == 1 and a.data.size != 1:
            return a, b, False
        _check_same_shape(a, b, opname)
        return a, b, False
    if isinstance(a, Tensor):
        return a, float(b), False
    if isinstance(b, Tensor):
        return b, float(a), True
    raise TypeError(f"{opname}: at least one Tensor operand required")


def _scalar_grad(g: np.ndarray, target: Tensor) -> np.ndarray:
    """Reduce a gradient for a size-1 tensor operand back to its shape."""
    return np.sum(g).reshape(target.shape) if target.data.size == 1 else g


# -- elementwise ops ---------------------------------------------------------


def add(a, b):
    x, y, _ = _binary_operands(a, b, "add")
    if isinstance(y, Tensor):

        def bwd(g):
            return g, _scalar_grad(g, y)

        return Tensor(x.data + y.data, _parents=(x, y), _backward=bwd)
    return Tensor(x.data + y, _parents=(x,), _backward=lambda g: (g,))


def sub(a, b):
    return add(a, mul(b, -1.0) if isinstance(b, Tensor) else -float(b))


def mul(a, b):
    x, y, _ = _binary_operands(a, b, "mul")
    if isinstance(y, Tensor):

        def bwd(g):
            return g * y.data, _scalar_grad(g * x.data, y)

        return Tensor(x.data * y.data, _parents=(x, y), _backward=bwd)

    def bwd1(g):
        return (g * y,)

    return Tensor(x.data * y, _parents=(x,), _backward=bwd1)


def div(a: Tensor, b: Tensor):
    x, y, swapped = _binary_operands(a, b, "div")
    if not isinstance(y, Tensor):
        if swapped:  # number / tensor
            num = y

            def bwd(g):
                return (-g * num / (x.data * x.data),)

            return Tensor(num / x.data, _parents=(x,), _backward=bwd)
        return mul(x, 1.0 / y)
    if swapped:
        x, y = y, x

    def bwd2(g):
        ga = g / y.data
        gb = -g * x.data / (y.data * y.data)
        return _scalar_grad(ga, x), _scalar_grad(gb, y)

    return Tensor(x.data / y.data, _parents=(x, y), _backward=bwd2)


def absolute(a: Tensor):
    a = as_tensor(a)

    def bwd(g):
        return (g * np.sign(a.data),)

    return Tensor(np.abs(a.data), _parents=(a,), _backward=bwd)


def relu(a: Tensor):
    a = as_tensor(a)

    def bwd(g):
        return (g * (a.data > 0.0),)

    return Tensor(np.maximum(a.data, 0.0), _parents=(a,), _backward=bwd)


def sqrt(a: Tensor):
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bwd(g):
        return (g * (0.5 / out),)

    return Tensor(out, _parents=(a,), _backward=bwd)


def power(a: Tensor, p: float):
    a = as_tensor(a)
    p = float(p)

    def bwd(g):
        return (g * p * a.data ** (p - 1.0),)

    return Tensor(a.data**p, _parents=(a,), _backward=bwd)


def exp(a: Tensor):
    a = as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return Tensor(out, _parents=(a,), _backward=bwd)


def log(a: Tensor):
    a = as_tensor(a)

    def bwd(g):
        return (g / a.data,)

    return Tensor(np.log(a.data), _parents=(a,), _backward=bwd)


def sigmoid(a: Tensor):
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return Tensor(out, _parents=(a,), _backward=bwd)


def softmax(a: Tensor, axis=-1):
    """Numerically stable softmax along one axis.

    Outputs are nonnegative and sum to 1 along ``axis``.
    """
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return Tensor(out, _parents=(a,), _backward=bwd)


# -- structural ops ----------------------------------------------------------


def reshape(a: Tensor, *shape):
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {old} -> {shape}: {e}") from None
    return Tensor(out, _parents=(a,), _backward=bwd)


def transpose(a: Tensor, *axes):
    a = as_tensor(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return Tensor(a.data.transpose(axes), _parents=(a,), _backward=bwd)


def take(a: Tensor, idx):
    """Slice/index; gradients scatter-add back (duplicate indices accumulate)."""
    a = as_tensor(a)
    shape = a.shape

    def bwd(g):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return (z,)

    return Tensor(a.data[idx], _parents=(a,), _backward=bwd)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of empty list")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        _parents=tuple(tensors),
        _backward=bwd,
    )


def pad(a: Tensor, widths):
    """Zero padding; widths as for np.pad."""
    a = as_tensor(a)
    widths = tuple((int(lo), int(hi)) for lo, hi in widths)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))

    def bwd(g):
        return (g[sl],)

    return Tensor(np.pad(a.data, widths), _parents=(a,), _backward=bwd)


def reduce_sum(a: Tensor, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor(
        np.sum(a.data, axis=axis, keepdims=keepdims), _parents=(a,), _backward=bwd
    )


def reduce_mean(a: Tensor, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a: Tensor, b: Tensor):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} incompatible")

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return Tensor(a.data @ b.data, _parents=(a, b), _backward=bwd)


def custom_op(out_data, parents, backward_fn) -> Tensor:
    """Register an op with a hand-written backward rule on the tape.

    Used by modules that implement fused kernels (bilinear sampling,
    convolution) where composing primitive ops would be wasteful.
    """
    return Tensor(out_data, _parents=tuple(parents), _backward=backward_fn)


# -- reverse pass ------------------------------------------------------------


def _toposort(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents before children


def backward(root: Tensor):
    """Accumulate dRoot/dLeaf for every tensor reachable from a scalar root.

    Sets ``.grad`` (ndarray) on every tensor that requires grad and returns a
    mapping from each reachable leaf tensor to its gradient Tensor.
    """
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    order = _toposort(root)
    grads = {id(root): np.ones(root.shape)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    leaf_map = {}
    for node in order:
        if node.requires_grad and id(node) in grads:
            node.grad = grads[id(node)]
            if not node._parents:
                leaf_map[node] = Tensor(node.grad)
    return leaf_map


def grad(root: Tensor, wrt) -> np.ndarray:
    """Gradient of a scalar root with respect to one tensor."""
    backward(root)
    if wrt.grad is None:
        return np.zeros(wrt.shape)
    return wrt.grad


# -- finite-difference checking ----------------------------------------------


def gradcheck(f, x, h=None) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    ``f`` maps a Tensor to a scalar Tensor.  The step defaults to
    1e-5 * (1 + |x_i|) per coordinate.  Relative error per coordinate is
    |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
    """
    x0 = _as_array(x.data if isinstance(x, Tensor) else x).copy()
    xt = Tensor(x0, requires_grad=True)
    y = f(xt)
    if y.data.size != 1:
        raise ContractError("gradcheck target must be scalar-valued")
    if not np.all(np.isfinite(y.data)):
        raise EvaluationError("function returned non-finite value")
    analytic = grad(y, xt)

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        hi = h if h is not None else 1e-5 * (1.0 + abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + hi
        fp = f(Tensor(x0)).data.reshape(())
        flat[i] = orig - hi
        fm = f(Tensor(x0)).data.reshape(())
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError("function returned non-finite value")
        nflat[i] = (fp - fm) / (2.0 * hi)

    denom = np.abs(analytic) + np.abs(numeric) + 1e-12
    return float(np.max(np.abs(analytic - numeric) / denom))
