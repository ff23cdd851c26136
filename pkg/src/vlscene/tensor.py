"""Dense N-D tensors with a reverse-mode autodiff tape.

Only the primitives the scene-completion pipeline needs are provided. Every
op checks its output for NaN/Inf and raises :class:`NonFiniteError` naming the
op, so a bad value never propagates silently into a loss comparison.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DTYPES = {"float64": np.float64, "float32": np.float32}
_default_dtype = np.float64


class NonFiniteError(FloatingPointError):
    """Raised when an op produces (or receives) NaN or Inf."""


class ShapeError(ValueError):
    pass


def set_precision(mode: str) -> None:
    """Select the dtype for newly created tensors: ``"float64"`` or ``"float32"``."""
    global _default_dtype
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[mode]


def get_precision() -> str:
    return "float64" if _default_dtype is np.float64 else "float32"


def _check_finite(arr: np.ndarray, op: str, role: str = "output") -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite values in {role}")


class Tensor:
    """A node on the autodiff tape.

    ``data`` is a numpy array, ``grad`` is populated on leaves with
    ``requires_grad`` by :meth:`backward`. Tensors are treated as immutable
    once produced.
    """

    __slots__ = ("data", "requires_grad", "grad", "_prev", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype or (data.dtype if isinstance(data, np.ndarray)
                                             and data.dtype in (np.float32, np.float64)
                                             else _default_dtype))
        _check_finite(arr, "tensor", name or "data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._prev: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.op = "leaf"
        self.name = name

    # -- construction helpers -------------------------------------------------

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        """Wrap the result of an op and record it on the tape.

        ``backward(grad_out)`` must return one gradient (or None) per parent.
        """
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.name = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._prev = tuple(parents)
            out._backward = backward
        else:
            out._prev = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operators --------------------------------------------------------------

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
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    # -- autodiff ---------------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every tracked leaf reachable from this scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("backward called on a tensor that is not connected to the tape")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._prev, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                _check_finite(pg, f"{node.op}.backward", "gradient")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=_default_dtype), requires_grad=requires_grad, name=name)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _default_dtype
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor.from_op(a.data + b.data, (a, b),
                          lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor.from_op(a.data - b.data, (a, b),
                          lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor.from_op(a.data * b.data, (a, b),
                          lambda g: (_unbroadcast(g * b.data, a.shape),
                                     _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    if np.any(b.data == 0):
        raise ZeroDivisionError("div: zero in denominator")
    out = a.data / b.data
    return Tensor.from_op(out, (a, b),
                          lambda g: (_unbroadcast(g / b.data, a.shape),
                                     _unbroadcast(-g * out / b.data, b.shape)), "div")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError below
        out = np.exp(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log. With ``floor > 0`` the input is clamped from below first
    (gradient is zero where the clamp is active)."""
    if floor > 0:
        clamped = np.maximum(x.data, floor)
        active = x.data >= floor
    else:
        if np.any(x.data <= 0):
            raise NonFiniteError("log: non-positive input")
        clamped, active = x.data, None
    out = np.log(clamped)

    def backward(g):
        gx = g / clamped
        return (gx if active is None else gx * active,)

    return Tensor.from_op(out, (x,), backward, "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,),
                          lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def abs_(x: Tensor) -> Tensor:
    return Tensor.from_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


# -- shape ops ------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor.from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def index(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return Tensor.from_op(np.array(out, copy=True), (x,), backward, "index")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather ``indices`` along ``axis`` (differentiable w.r.t. ``x``)."""
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim

    def backward(g):
        gx = np.zeros_like(x.data)
        gmoved = np.moveaxis(g, axis, 0)
        target = np.moveaxis(gx, axis, 0)
        np.add.at(target, indices, gmoved)
        return (gx,)

    return Tensor.from_op(np.take(x.data, indices, axis=axis), (x,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim:
            raise ShapeError("concat: rank mismatch")
        for ax in range(t.ndim):
            if ax != axis and t.shape[ax] != tensors[0].shape[ax]:
                raise ShapeError(f"concat: extent mismatch on axis {ax}: {t.shape} vs {tensors[0].shape}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor.from_op(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def upsample_nearest(x: Tensor, factor: int, axes: Iterable[int]) -> Tensor:
    """Repeat every element ``factor`` times along each of ``axes``."""
    axes = tuple(a % x.ndim for a in axes)
    out = x.data
    for ax in axes:
        out = np.repeat(out, factor, axis=ax)

    def backward(g):
        shape = []
        sum_axes = []
        for ax, n in enumerate(x.shape):
            if ax in axes:
                shape += [n, factor]
                sum_axes.append(len(shape) - 1)
            else:
                shape.append(n)
        return (g.reshape(shape).sum(axis=tuple(sum_axes)),)

    return Tensor.from_op(out, (x,), backward, "upsample_nearest")


# -- reductions -----------------------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor.from_op(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    if n == 0:
        raise ShapeError("mean: empty reduction")
    return sum_(x, axis, keepdims) * (1.0 / n)


def global_avg_pool(x: Tensor, axes=(1, 2)) -> Tensor:
    """Average over spatial ``axes`` keeping them as size-1 dims."""
    return mean(x, tuple(axes), keepdims=True)


# -- linear algebra ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ ({a.shape[1]} vs {b.shape[0]})")
    return Tensor.from_op(a.data @ b.data, (a, b),
                          lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, (x,), backward, "log_softmax")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """``x / max(||x||, eps)`` along ``axis``."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    clamped = np.maximum(norm, eps)
    out = x.data / clamped
    live = norm > eps

    def backward(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(live, g - out * proj, g) / clamped,)

    return Tensor.from_op(out, (x,), backward, "l2_normalize")


# -- losses -----------------------------------------------------------------------

def l1_mean(a: Tensor, b) -> Tensor:
    b = as_tensor(b, like=a)
    if a.shape != b.shape:
        raise ShapeError(f"l1_mean: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    sign = np.sign(diff) / n
    return Tensor.from_op(np.asarray(np.abs(diff).sum() / n), (a, b),
                          lambda g: (g * sign, -g * sign), "l1_mean")


def soft_cross_entropy(pred_logits: Tensor, target_probs, axis: int = 0) -> Tensor:
    """Mean over positions of ``-sum_q t_q log softmax(pred)_q``; targets are constants."""
    t = target_probs.data if isinstance(target_probs, Tensor) else np.asarray(target_probs)
    if t.shape != pred_logits.shape:
        raise ShapeError(f"soft_cross_entropy: shape mismatch {pred_logits.shape} vs {t.shape}")
    logp = log_softmax(pred_logits, axis=axis)
    per_pos = sum_(logp * t.astype(pred_logits.dtype), axis=axis)
    return -mean(per_pos)


def hard_cross_entropy(pred_logits: Tensor, labels, ignore_label: int = 255, axis: int = 0,
                       class_weights=None) -> Tensor:
    """Cross entropy against integer labels, averaged over non-ignored positions.

    ``labels`` has the shape of ``pred_logits`` with ``axis`` removed. With
    ``class_weights`` the mean is weighted by the label's class weight.
    """
    labels = np.asarray(labels)
    axis = axis % pred_logits.ndim
    moved = np.moveaxis(pred_logits.data, axis, 0)
    n_cls = moved.shape[0]
    if labels.shape != moved.shape[1:]:
        raise ShapeError(f"hard_cross_entropy: labels {labels.shape} vs logits {pred_logits.shape}")
    flat_logits = moved.reshape(n_cls, -1)
    flat_labels = labels.reshape(-1)
    valid = flat_labels != ignore_label
    if not valid.any():
        raise ValueError("hard_cross_entropy: every position is ignored")
    lab = flat_labels[valid].astype(np.int64)
    if lab.min() < 0 or lab.max() >= n_cls:
        raise ValueError(f"hard_cross_entropy: labels outside [0, {n_cls - 1}]")
    z = flat_logits[:, valid]
    z = z - z.max(axis=0, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=0))
    cols = np.arange(lab.size)
    nll = lse - z[lab, cols]
    w = np.ones(lab.size, dtype=pred_logits.dtype) if class_weights is None \
        else np.asarray(class_weights, dtype=pred_logits.dtype)[lab]
    wsum = w.sum()
    out = np.asarray((w * nll).sum() / wsum, dtype=pred_logits.dtype)

    def backward(g):
        p = np.exp(z - lse)
        p[lab, cols] -= 1.0
        p *= g * w / wsum
        full = np.zeros_like(flat_logits)
        full[:, valid] = p
        return (np.moveaxis(full.reshape(moved.shape), 0, axis),)

    return Tensor.from_op(out, (pred_logits,), backward, "hard_cross_entropy")


# -- convolution -------------------------------------------------------------------

def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ShapeError(f"expected 3 values, got {v}")
    return v


def _window(arr, tap, st, out_sp):
    i, j, l = tap
    return arr[:, i:i + st[0] * (out_sp[0] - 1) + 1:st[0],
               j:j + st[1] * (out_sp[1] - 1) + 1:st[1],
               l:l + st[2] * (out_sp[2] - 1) + 1:st[2]]


def _im2col(xp: np.ndarray, ks, st, out_sp) -> np.ndarray:
    win = sliding_window_view(xp, ks, axis=(1, 2, 3))
    win = win[:, ::st[0], ::st[1], ::st[2]][:, :out_sp[0], :out_sp[1], :out_sp[2]]
    return np.ascontiguousarray(win.transpose(0, 4, 5, 6, 1, 2, 3)).reshape(xp.shape[0] * int(np.prod(ks)), -1)


def conv3d(x: Tensor, kernel: Tensor, stride=1, padding=0, bias: Tensor | None = None) -> Tensor:
    """Zero-padded 3-D cross-correlation.

    ``x`` is ``[C_in, X, Y, Z]``, ``kernel`` is ``[C_out, C_in, kx, ky, kz]``.
    Lowered to a single GEMM over an im2col buffer.
    """
    if x.ndim != 4 or kernel.ndim != 5:
        raise ShapeError(f"conv3d: expected input rank 4 and kernel rank 5, got {x.shape}, {kernel.shape}")
    _check_finite(x.data, "conv3d", "input")
    c_out, c_in, *ks = kernel.shape
    if x.shape[0] != c_in:
        raise ShapeError(f"conv3d: channel axis mismatch (input {x.shape[0]}, kernel expects {c_in})")
    if any(k % 2 == 0 for k in ks):
        raise ShapeError(f"conv3d: kernel extents must be odd, got {tuple(ks)}")
    st, pad = _triple(stride), _triple(padding)
    out_sp = []
    for ax, (n, k, s, p) in enumerate(zip(x.shape[1:], ks, st, pad)):
        m = (n + 2 * p - k) // s + 1
        if m < 1:
            raise ShapeError(f"conv3d: spatial axis {ax + 1} too small ({n}) for kernel {k} with padding {p}")
        out_sp.append(m)
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} != ({c_out},)")

    xp = np.pad(x.data, ((0, 0),) + tuple((p, p) for p in pad))
    w = kernel.data
    n_out = int(np.prod(out_sp))
    cols = _im2col(xp, ks, st, out_sp)  # [C_in * k^3, n_out]
    out = (w.reshape(c_out, -1) @ cols).reshape((c_out, *out_sp))
    if bias is not None:
        out += bias.data[:, None, None, None]

    def backward(g):
        gflat = g.reshape(c_out, n_out)
        gw = (gflat @ cols.T).reshape(w.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w.reshape(c_out, -1).T @ gflat).reshape((c_in, *ks, *out_sp))
            gxp = np.zeros_like(xp)
            for i in range(ks[0]):
                for j in range(ks[1]):
                    for l in range(ks[2]):
                        _window(gxp, (i, j, l), st, out_sp)[...] += gcols[:, i, j, l]
            gx = gxp[:, pad[0]:pad[0] + x.shape[1], pad[1]:pad[1] + x.shape[2], pad[2]:pad[2] + x.shape[3]]
        gb = gflat.sum(axis=1) if bias is not None else None
        return (gx, gw, gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor.from_op(out, parents, backward, "conv3d")


def conv2d(x: Tensor, kernel: Tensor, padding=0, bias: Tensor | None = None) -> Tensor:
    """``[C_in, H, W]`` x ``[C_out, C_in, kh, kw]`` via :func:`conv3d` with a unit depth axis."""
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: expected ranks 3 and 4, got {x.shape}, {kernel.shape}")
    p = (padding, padding) if isinstance(padding, int) else tuple(padding)
    out = conv3d(reshape(x, x.shape + (1,)), reshape(kernel, kernel.shape + (1,)),
                 stride=1, padding=(p[0], p[1], 0), bias=bias)
    return reshape(out, out.shape[:3])
