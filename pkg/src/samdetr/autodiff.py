"""Dense float64 tensors with reverse-mode differentiation.

Every operation that involves a tensor with ``requires_grad`` records a node
carrying its parents and a local gradient rule. Nodes receive a strictly
increasing ``node_id`` at creation, so sorting the reachable nodes by id gives
the recording order and :func:`backward` walks it in reverse.

Broadcasting is deliberately absent: binary operations need identical shapes,
except that a 0-d tensor or a Python number may pair with any tensor. Use
:func:`broadcast_to` to align shapes explicitly.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse
from scipy.special import expit

__all__ = [
    "Tensor",
    "Graph",
    "DimensionError",
    "ContractError",
    "no_grad",
    "is_grad_enabled",
    "record",
    "tensor",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "add_scalar",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "softplus",
    "abs",
    "sqrt",
    "power",
    "minimum",
    "maximum",
    "softmax",
    "conv2d",
    "conv2d_nhwc",
    "concat",
    "getitem",
    "reshape",
    "transpose",
    "broadcast_to",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "take",
    "linear",
    "layer_norm",
    "grid_sample",
    "numerical_gradient",
    "gradcheck",
]

_ids = itertools.count()
_local = threading.local()


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when a documented precondition is violated."""


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


class no_grad:
    """Context manager that suspends graph recording on this thread."""

    def __enter__(self):
        self._prev = is_grad_enabled()
        _local.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _local.grad_enabled = self._prev
        return False


class Tensor:
    """A float64 array that can take part in a differentiation graph.

    Args:
        data: anything ``np.asarray`` accepts. Always copied.
        requires_grad: whether gradients should be accumulated into ``grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        # leaves start at zero so a leaf the loss never reaches reads as zero gradient
        self.grad: np.ndarray | None = np.zeros_like(arr) if self.requires_grad else None
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.node_id = next(_ids)
        t._parents = ()
        t._backward = None
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- operators -------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, k):
        return power(self, k)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64), False)


def record(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of a differentiable operation.

    ``grad_fn(g)`` receives the upstream gradient and returns one gradient
    (or ``None``) per parent, in order. Extension modules use this to add
    fused operations.
    """
    req = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor._wrap(data, req)
    if req:
        out._parents = tuple(parents)
        out._backward = grad_fn
    return out


class Graph:
    """The recorded operations reachable from ``output``, in recording order."""

    def __init__(self, output: Tensor):
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [output]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._parents:
                nodes.append(t)
                stack.extend(t._parents)
        nodes.sort(key=lambda t: t.node_id)
        self.output = output
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def run_backward(self, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(self.output): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=np.float64)
                if pg.shape != parent.shape:
                    raise DimensionError(
                        f"gradient shape {pg.shape} does not match tensor shape {parent.shape}"
                    )
                if parent._parents:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
                elif parent.grad is None:
                    parent.grad = np.array(pg, copy=True)
                else:
                    parent.grad = parent.grad + pg


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.is_leaf:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    Graph(loss).run_backward(np.ones_like(loss.data))


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (no implicit broadcasting)")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")
    sa, sb = a.shape, b.shape
    return record(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return record(
        ad * bd,
        (a, b),
        lambda g: (
            _reduce_to(g * bd, ad.shape) if a.requires_grad else None,
            _reduce_to(g * ad, bd.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return record(
        out,
        (a, b),
        lambda g: (_reduce_to(g / bd, ad.shape), _reduce_to(-g * out / bd, bd.shape)),
    )


def neg(x: Tensor) -> Tensor:
    return record(-x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return record(x.data * c, (x,), lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return record(x.data + float(c), (x,), lambda g: (g,))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return record(s, (x,), lambda g: (g * s * (1.0 - s),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return record(e, (x,), lambda g: (g * e,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return record(np.log(xd), (x,), lambda g: (g / xd,))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))
    return record(out, (x,), lambda g: (g * expit(xd),))


def abs(x: Tensor) -> Tensor:  # noqa: A001
    sgn = np.sign(x.data)
    return record(np.abs(x.data), (x,), lambda g: (g * sgn,))


def sqrt(x: Tensor) -> Tensor:
    r = np.sqrt(x.data)
    return record(r, (x,), lambda g: (g * 0.5 / r,))


def power(x: Tensor, k: float) -> Tensor:
    k = float(k)
    xd = x.data
    return record(xd**k, (x,), lambda g: (g * k * xd ** (k - 1.0),))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise minimum; ties send the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"minimum: shapes {a.shape} and {b.shape} differ")
    pick_a = a.data <= b.data
    return record(
        np.where(pick_a, a.data, b.data), (a, b), lambda g: (g * pick_a, g * ~pick_a)
    )


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise maximum; ties send the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"maximum: shapes {a.shape} and {b.shape} differ")
    pick_a = a.data >= b.data
    return record(
        np.where(pick_a, a.data, b.data), (a, b), lambda g: (g * pick_a, g * ~pick_a)
    )


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-d operands, or batched product of 3-d operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    ok = a.ndim == b.ndim and a.ndim in (2, 3) and a.shape[-1] == b.shape[-2]
    if ok and a.ndim == 3:
        ok = a.shape[0] == b.shape[0]
    if not ok:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return record(
        ad @ bd,
        (a, b),
        lambda g: (
            g @ _swap(bd) if a.requires_grad else None,
            _swap(ad) @ g if b.requires_grad else None,
        ),
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the trailing axis of ``x``.

    ``weight`` is ``in x out``; ``bias`` (``out``) is added to every row.
    """
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} does not fit weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, weight.shape[0])
    wd = weight.data
    out = x2 @ wd
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (wd.shape[1],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return record(out, parents, grad_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return record(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the trailing axis, then apply per-channel gain and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gamma.shape}/shift {beta.shape} vs input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def grad_fn(g):
        lead_axes = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead_axes)
        gbeta = g.sum(axis=lead_axes)
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return record(out, (x, gamma, beta), grad_fn)


def _conv_core(x: Tensor, kernels: Tensor, bias: Tensor | None, stride: int, padding: int,
               channels_last: bool) -> Tensor:
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise DimensionError(f"conv2d: kernels must be C_out x C_in x k x k, got {kernels.shape}")
    k = kernels.shape[2]
    if k % 2 == 0:
        raise ContractError(f"conv2d: kernel size must be odd, got {k}")
    c_axis = -1 if channels_last else -3
    if x.ndim not in (3, 4) or x.shape[c_axis] != kernels.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} does not fit kernels {kernels.shape}")
    if bias is not None and bias.shape != (kernels.shape[0],):
        raise DimensionError(f"conv2d: bias {bias.shape} does not fit kernels {kernels.shape}")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    if not channels_last:
        xd = xd.transpose(0, 2, 3, 1)
    B, H, W, C = xd.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if k > Hp or k > Wp:
        raise DimensionError(f"conv2d: kernel {k}x{k} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1
    O = kernels.shape[0]
    if padding:
        xp = np.zeros((B, Hp, Wp, C))
        xp[:, padding : padding + H, padding : padding + W, :] = xd
    else:
        xp = xd
    cols = np.empty((B, Ho, Wo, k, k, C))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :]
    cols = cols.reshape(B * Ho * Wo, k * k * C)
    wmat = kernels.data.transpose(2, 3, 1, 0).reshape(k * k * C, O)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(B, Ho, Wo, O)
    if not channels_last:
        out = out.transpose(0, 3, 1, 2)
    if not batched:
        out = out[0]
    parents = (x, kernels) if bias is None else (x, kernels, bias)

    def grad_fn(g):
        gb = g if batched else g[None]
        if not channels_last:
            gb = gb.transpose(0, 2, 3, 1)
        g2 = np.ascontiguousarray(gb).reshape(-1, O)
        gw = None
        if kernels.requires_grad:
            gw = (cols.T @ g2).reshape(k, k, C, O).transpose(3, 2, 0, 1)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(B, Ho, Wo, k, k, C)
            gxp = np.zeros((B, Hp, Wp, C))
            for i in range(k):
                for j in range(k):
                    gxp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, padding : padding + H, padding : padding + W, :]
            if not channels_last:
                gx = gx.transpose(0, 3, 1, 2)
            if not batched:
                gx = gx[0]
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return record(out, parents, grad_fn)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation.

    ``x`` is ``C_in x H x W`` or batched ``B x C_in x H x W``; ``kernels`` is
    ``C_out x C_in x k x k`` with odd ``k``. The output side is
    ``floor((H + 2*padding - k) / stride) + 1``.
    """
    return _conv_core(x, kernels, bias, stride, padding, channels_last=False)


def conv2d_nhwc(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """:func:`conv2d` for channels-last ``H x W x C`` (or ``B x H x W x C``) input."""
    return _conv_core(x, kernels, bias, stride, padding, channels_last=True)


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: nothing to concatenate")
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref.shape)) if i != ax
        ):
            raise DimensionError(f"concat: shapes {ref.shape} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return record(out, tensors, lambda g: tuple(np.split(g, bounds, axis=ax)))


def getitem(x: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; gradients scatter back additively."""
    out = x.data[index]
    shape = x.shape
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)

    def grad_fn(g):
        gx = np.zeros(shape)
        if basic:
            gx[index] += g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return record(np.array(out), (x,), grad_fn)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from err
    src = x.shape
    return record(out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))
    return record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicitly repeat ``x`` along leading or size-1 axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as err:
        raise DimensionError(f"broadcast_to: cannot expand {x.shape} to {shape}") from err
    src = x.shape
    lead = len(shape) - len(src)

    def grad_fn(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        keep = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        return (g,)

    return record(np.array(out), (x,), grad_fn)


def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    return record(
        x.data.sum(axis=axis, keepdims=keepdims),
        (x,),
        lambda g: (np.array(_expand_reduced(g, shape, axis, keepdims)),),
    )


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    count = x.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))
    return record(
        x.data.mean(axis=axis, keepdims=keepdims),
        (x,),
        lambda g: (np.array(_expand_reduced(g, shape, axis, keepdims)) / count,),
    )


def reduce_max(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    shape = x.shape
    if axis is None:
        axes = tuple(range(x.ndim))
    else:
        axes = tuple(a % x.ndim for a in np.atleast_1d(axis))
    rest = tuple(a for a in range(x.ndim) if a not in axes)
    moved = x.data.transpose(rest + axes)
    flat = moved.reshape(tuple(shape[a] for a in rest) + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    if keepdims:
        out = out.reshape(tuple(1 if a in axes else s for a, s in enumerate(shape)))

    def grad_fn(g):
        gflat = np.zeros(flat.shape)
        np.put_along_axis(gflat, arg[..., None], np.reshape(g, arg.shape)[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        return (gmoved.transpose(np.argsort(rest + axes)),)

    return record(out, (x,), grad_fn)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    shape = x.shape

    def grad_fn(g):
        gx = np.zeros(shape)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return record(np.take(x.data, idx, axis=axis), (x,), grad_fn)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def _lerp(a: np.ndarray, b: np.ndarray, t: np.ndarray) -> np.ndarray:
    """``a + t (b - a)`` anchored at the nearer end, so t=0 and t=1 are exact."""
    near_a = t <= 0.5
    # t - 1 is exact on [0.5, 1], so both branches keep their anchor exactly
    return np.where(near_a, a, b) + np.where(near_a, t, t - 1) * (b - a)


def grid_sample(grid: Tensor, coords) -> Tensor:
    """Bilinear sampling at continuous pixel-index coordinates.

    ``grid`` is ``H x W x C`` with ``coords`` ``P x 2``, or batched
    ``B x H x W x C`` with ``coords`` ``B x P x 2``. Each coordinate row is
    ``(x, y)``: column index then row index, with integer values landing on
    cell centers. Coordinates are clamped to the grid first, so out-of-range
    samples repeat the edge and carry no coordinate gradient.

    ``coords`` may be a Tensor (differentiable) or an array (constant).
    """
    coords = _as_tensor(coords)
    batched = grid.ndim == 4
    if grid.ndim not in (3, 4) or coords.shape[-1] != 2 or coords.ndim != grid.ndim - 1:
        raise DimensionError(f"grid_sample: grid {grid.shape} with coords {coords.shape}")
    g4 = grid.data if batched else grid.data[None]
    c3 = coords.data if batched else coords.data[None]
    B, H, W, C = g4.shape
    if c3.shape[0] != B:
        raise DimensionError(f"grid_sample: {B} grids but {c3.shape[0]} coordinate sets")
    x = np.clip(c3[..., 0], 0.0, W - 1)
    y = np.clip(c3[..., 1], 0.0, H - 1)
    inside_x = (c3[..., 0] >= 0.0) & (c3[..., 0] <= W - 1)
    inside_y = (c3[..., 1] >= 0.0) & (c3[..., 1] <= H - 1)
    x0 = np.minimum(np.floor(x).astype(np.intp), max(W - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.intp), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = x - x0
    wy = y - y0
    base = (np.arange(B) * (H * W))[:, None]
    idx = np.stack([base + y0 * W + x0, base + y0 * W + x1, base + y1 * W + x0, base + y1 * W + x1], axis=-1)
    flat = g4.reshape(B * H * W, C)
    v = flat[idx]
    wxe, wye = wx[..., None], wy[..., None]
    # nested lerps reproduce constant fields and cell centers exactly
    top = _lerp(v[..., 0, :], v[..., 1, :], wxe)
    bottom = _lerp(v[..., 2, :], v[..., 3, :], wxe)
    out = _lerp(top, bottom, wye)
    if not batched:
        out = out[0]

    def grad_fn(g):
        gb = g if batched else g[None]
        ggrid = None
        if grid.requires_grad:
            wts = np.stack([(1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx], axis=-1)
            n_pts = idx.shape[0] * idx.shape[1]
            interp = sparse.csr_matrix(
                (wts.ravel(), idx.ravel(), np.arange(0, 4 * n_pts + 1, 4)), shape=(n_pts, B * H * W)
            )
            acc = np.asarray(interp.T @ gb.reshape(-1, C))
            ggrid = acc.reshape(g4.shape) if batched else acc.reshape(g4.shape[1:])
        gcoords = None
        if coords.requires_grad:
            dx = ((1 - wye) * (v[..., 1, :] - v[..., 0, :]) + wye * (v[..., 3, :] - v[..., 2, :])) * gb
            dy = ((1 - wxe) * (v[..., 2, :] - v[..., 0, :]) + wxe * (v[..., 3, :] - v[..., 1, :])) * gb
            gc = np.stack([dx.sum(-1) * inside_x, dy.sum(-1) * inside_y], axis=-1)
            gcoords = gc if batched else gc[0]
        return ggrid, gcoords

    return record(out, (grid, coords), grad_fn)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def numerical_gradient(fn: Callable[[], Tensor], leaf: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` with respect to ``leaf``."""
    base = np.array(leaf.data, copy=True)
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    with no_grad():
        for _ in it:
            i = it.multi_index
            for sign in (1.0, -1.0):
                bumped = base.copy()
                bumped[i] += sign * h
                bumped.flags.writeable = False
                leaf.data = bumped
                val = float(fn().data)
                grad[i] += sign * val
            grad[i] /= 2.0 * h
    base.flags.writeable = False
    leaf.data = base
    return grad


def gradcheck(
    fn: Callable[[], Tensor], leaves: Iterable[Tensor], h: float = 1e-5, floor: float = 1e-6
) -> float:
    """Largest per-coordinate relative error between analytic and numeric gradients.

    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps coordinates whose true gradient is zero from dividing
    round-off by round-off.
    """
    leaves = list(leaves)
    for leaf in leaves:
        leaf.grad = None
    backward(fn())
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        numeric = numerical_gradient(fn, leaf, h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst
