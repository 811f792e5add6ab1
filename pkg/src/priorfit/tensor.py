"""Dense float tensors with reverse-mode automatic differentiation.

Everything runs on numpy arrays. Ops record onto an explicit tape (a context
manager); nothing is recorded unless a tape is active and at least one input
requires grad, so inference is plain numpy with zero autodiff overhead.

Shape rules are deliberately narrow: elementwise ops accept equal shapes,
0-d scalars, or a right-aligned suffix operand (bias style, broadcast over
leading batch dims). Anything else raises ShapeMismatch naming the op.

Gradients accumulate additively on leaf tensors across backward calls and
across tapes; intermediate tensors get their per-pass gradient for
inspection only.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf as _erf

_DEFAULT_DTYPE = np.float64

_FLOAT_DTYPES = (np.float32, np.float64)


def set_default_dtype(dtype) -> None:
    """Set the dtype new tensors are created with (float32 or float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in _FLOAT_DTYPES:
        raise ValueError(f"unsupported default dtype {dtype}")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


class TensorError(Exception):
    """Base class for tensor engine errors."""


class ShapeMismatch(TensorError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        pretty = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {pretty}")


class GradientNaN(TensorError):
    """A backward closure produced a non-finite gradient."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"non-finite gradient produced by '{op}'")


class MissingGradient(TensorError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_producer")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._producer: Optional["Tape"] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


class _Node:
    __slots__ = ("name", "out", "parents", "backward")

    def __init__(self, name, out, parents, backward):
        self.name = name
        self.out = out
        self.parents = parents
        self.backward = backward


_ACTIVE_TAPE: Optional["Tape"] = None


class Tape:
    """Ordered record of primitive ops; replayed in reverse for backward.

    Execution order is a topological order by construction, so the reverse
    sweep visits every node after all of its consumers. One tape per worker;
    a live tape must not be shared across workers.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TensorError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def __len__(self) -> int:
        return len(self._nodes)

    def clear(self) -> None:
        """Drop all nodes, freeing saved intermediates."""
        self._nodes.clear()

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(leaf) into every reachable leaf's .grad.

        The root must be a scalar recorded on this tape. Non-finite values in
        any produced gradient raise GradientNaN naming the primitive.
        """
        if root.data.size != 1:
            raise ShapeMismatch("backward(root must be scalar)", root.shape)
        if root._producer is not self:
            raise TensorError("backward root is not recorded on this tape")
        upstream: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        root.grad = upstream[id(root)]
        for node in reversed(self._nodes):
            g = upstream.pop(id(node.out), None)
            if g is None:
                continue
            node.out.grad = g
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if not np.isfinite(pg).all():
                    raise GradientNaN(node.name)
                if parent._producer is self:
                    acc = upstream.get(id(parent))
                    upstream[id(parent)] = pg if acc is None else acc + pg
                else:
                    # leaf: accumulate across backward calls
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _record(name: str, out_arr: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(out_arr, dtype=out_arr.dtype)
    tape = _ACTIVE_TAPE
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._producer = tape
        tape._nodes.append(_Node(name, out, tuple(parents), backward))
    return out


# ---------------------------------------------------------------------------
# shape checking for elementwise binaries


def _is_suffix(small: tuple, big: tuple) -> bool:
    k = len(big) - len(small)
    return k >= 0 and small == big[k:]


def _check_elementwise(name: str, sa: tuple, sb: tuple) -> None:
    if sa == sb:
        return
    if _is_suffix(sa, sb) or _is_suffix(sb, sa):
        return
    raise ShapeMismatch(name, sa, sb)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to a suffix operand's shape (sum leading dims)."""
    if g.shape == shape:
        return g
    k = g.ndim - len(shape)
    return g.sum(axis=tuple(range(k)))


def _binary(name, a, b, fwd, da, db) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(name, a.shape, b.shape)
    out = fwd(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(da(g, a.data, b.data), a.shape) if a.requires_grad else None
        gb = _unbroadcast(db(g, a.data, b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _record(name, out, (a, b), backward)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def pow_(a, p: float) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _record("pow", ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _record("sqrt", out, (a,), lambda g: (g / (2.0 * out),))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    if a.ndim < 2 or b.ndim < 2 or sa[-1] != sb[-2]:
        raise ShapeMismatch("matmul", sa, sb)
    if not (_is_suffix(sa[:-2], sb[:-2]) or _is_suffix(sb[:-2], sa[:-2])):
        raise ShapeMismatch("matmul", sa, sb)
    out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            if ga.shape != sa:
                ga = ga.sum(axis=tuple(range(ga.ndim - len(sa))))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            if gb.shape != sb:
                gb = gb.sum(axis=tuple(range(gb.ndim - len(sb))))
        return ga, gb

    return _record("matmul", out, (a, b), backward)


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def log1p(a) -> Tensor:
    a = _as_tensor(a)
    return _record("log1p", np.log1p(a.data), (a,), lambda g: (g / (1.0 + a.data),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid_arr(a.data)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid_arr(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,),
                   lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    cdf = 0.5 * (1.0 + _erf(ad * _INV_SQRT2))
    out = ad * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * ad * ad)
        return (g * (cdf + ad * pdf),)

    return _record("gelu", out, (a,), backward)


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    out = np.maximum(ad, 0.0) + np.log1p(np.exp(-np.abs(ad)))
    return _record("softplus", out, (a,), lambda g: (g * _sigmoid_arr(ad),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is identity inside the range, zero outside."""
    a = _as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _record("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    if not keepdims:
        for ax in sorted(ax % len(shape) for ax in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def _axis_count(shape: tuple, axis) -> int:
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    n = 1
    for ax in axes:
        n *= shape[ax]
    return n


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _record("sum", np.asarray(out), (a,),
                   lambda g: (_expand_reduced(g, a.shape, axis, keepdims),))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    n = _axis_count(a.shape, axis)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    return _record("mean", np.asarray(out), (a,),
                   lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / n,))


def variance(a, axis=None, keepdims=False) -> Tensor:
    """Population variance (1/n normalization)."""
    a = _as_tensor(a)
    n = _axis_count(a.shape, axis)
    mu = a.data.mean(axis=axis, keepdims=True)
    out = a.data.var(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = _expand_reduced(g, a.shape, axis, keepdims)
        return (gg * 2.0 * (a.data - mu) / n,)

    return _record("variance", np.asarray(out), (a,), backward)


def _extremum(name, a, axis, np_fn, np_arg_fn):
    a = _as_tensor(a)
    out = np_fn(a.data, axis=axis)

    def backward(g):
        z = np.zeros_like(a.data)
        if axis is None:
            idx = np.unravel_index(np_arg_fn(a.data), a.shape)
            z[idx] = g
        else:
            arg = np_arg_fn(a.data, axis=axis)
            ge = np.expand_dims(np.asarray(g), axis)
            np.put_along_axis(z, np.expand_dims(arg, axis), ge, axis)
        return (z,)

    return _record(name, np.asarray(out), (a,), backward)


def min_(a, axis=None) -> Tensor:
    """Minimum; subgradient routes to the first minimal element."""
    return _extremum("min", a, axis, np.min, np.argmin)


def max_(a, axis=None) -> Tensor:
    """Maximum; subgradient routes to the first maximal element."""
    return _extremum("max", a, axis, np.max, np.argmax)


# ---------------------------------------------------------------------------
# normalizing ops


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _record("softmax", out, (a,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gain.data * xhat + bias.data

    def backward(g):
        gx = ggain = gbias = None
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _record("layer_norm", out, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# structural ops


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def permute(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("permute", a.data.transpose(axes), (a,),
                   lambda g: (g.transpose(inv),))


def swap_last(a) -> Tensor:
    """Transpose the last two axes."""
    a = _as_tensor(a)
    return _record("swap_last", np.swapaxes(a.data, -1, -2), (a,),
                   lambda g: (np.swapaxes(g, -1, -2),))


def slice_(a, key) -> Tensor:
    a = _as_tensor(a)
    out = a.data[key]

    def backward(g):
        z = np.zeros_like(a.data)
        z[key] = g
        return (z,)

    return _record("slice", np.asarray(out), (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, offsets, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(pieces, ts))

    return _record("concat", out, ts, backward)


def stack(tensors, axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
# gather / scatter


def take(a, indices, axis: int = 0) -> Tensor:
    """Select indices along one axis. Duplicate indices accumulate on backward."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, idx, axis=axis)

    def backward(g):
        z = np.zeros_like(a.data)
        zm = np.moveaxis(z, axis, 0)
        gm = np.moveaxis(g, axis, 0)
        np.add.at(zm, idx, gm)
        return (z,)

    return _record("take", out, (a,), backward)


def take_along_last(a, indices) -> Tensor:
    """Per-row gather on the last axis: out[...] = a[..., idx[...]]."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.shape != a.shape[:-1]:
        raise ShapeMismatch("take_along_last", a.shape, idx.shape)
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        z = np.zeros_like(a.data)
        np.put_along_axis(z, idx[..., None], g[..., None], axis=-1)
        return (z,)

    return _record("take_along_last", np.asarray(out), (a,), backward)


def scatter_add(values, indices, num_segments: int) -> Tensor:
    """Segment-sum over the last axis: out[..., c] = sum of values where index == c.

    Index may have the same shape as values, be 1-d and shared, or share the
    leading axis with a batched values tensor. Backward gathers the upstream
    gradient back to each source position exactly.
    """
    v = _as_tensor(values)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.min(initial=0) < 0 or (idx.size and idx.max() >= num_segments):
        raise ShapeMismatch("scatter_add(index out of range)", idx.shape, (num_segments,))
    eye = np.eye(num_segments, dtype=v.data.dtype)
    onehot = eye[idx]
    if idx.shape == v.shape:
        spec_fwd, spec_bwd = "...k,...kc->...c", "...c,...kc->...k"
    elif idx.ndim == 1 and v.shape[-1] == idx.shape[0]:
        spec_fwd, spec_bwd = "...k,kc->...c", "...c,kc->...k"
    elif idx.ndim == 2 and v.ndim >= 2 and v.shape[0] == idx.shape[0] \
            and v.shape[-1] == idx.shape[1]:
        spec_fwd, spec_bwd = "b...k,bkc->b...c", "b...c,bkc->b...k"
    else:
        raise ShapeMismatch("scatter_add", v.shape, idx.shape)
    out = np.einsum(spec_fwd, v.data, onehot)

    def backward(g):
        return (np.einsum(spec_bwd, g, onehot),)

    return _record("scatter_add", out, (v,), backward)


# ---------------------------------------------------------------------------
# parameter updates


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def descend_step(params, lr: float) -> None:
    """Plain gradient descent: p -= lr * grad."""
    for p in params:
        if p.grad is None:
            raise MissingGradient("descend_step: parameter has no gradient")
        p.data = p.data - lr * p.grad


def ascend_step(params, lr: float, weight_decay: float = 0.0) -> None:
    """Sign-flipped update: p += lr * grad, then decay by (1 - lr * weight_decay).

    Used for adversarial generators, which climb the same gradients the model
    descends, in the same backward pass.
    """
    for p in params:
        if p.grad is None:
            raise MissingGradient("ascend_step: parameter has no gradient")
        p.data = p.data + lr * p.grad
        if weight_decay:
            p.data = p.data * (1.0 - lr * weight_decay)
