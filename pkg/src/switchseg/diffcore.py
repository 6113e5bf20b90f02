"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Each :class:`Tensor` remembers the operation that produced it and a closure
that routes an incoming gradient to its parents.  ``Tensor.backward`` walks
the graph in reverse topological order, so every node is visited once.

Shapes are never broadcast implicitly.  Binary operations accept two arrays
of identical shape, or an array and a scalar (a Python number or a 0-d
tensor); anything else is rejected.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

__all__ = [
    "Tensor",
    "ShapeError",
    "as_tensor",
    "topological_order",
    "conv2d",
    "transposed_conv2d",
    "maxpool2d",
    "add_channel_bias",
    "elementwise",
    "relu",
    "sigmoid",
    "log",
    "one_minus",
    "mul",
    "add",
    "sub",
    "div",
    "power",
    "clamp",
    "tensor_sum",
    "tensor_mean",
    "concat_channels",
    "split_channels",
    "gradient_check",
    "GradCheckReport",
]

_node_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A dense array that participates in a computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self.node_id = next(_node_ids)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, dtype={self.dtype})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every ``requires_grad`` ancestor."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order = topological_order(self)
        grads = {self.node_id: grad}
        for node in reversed(order):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else prev + pg

    # operator sugar; all of it goes through the explicit ops below
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

    def __pow__(self, exponent):
        return power(self, exponent)


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap arrays and scalars as constant tensors; tensors pass through."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64 if dtype is None else dtype)
    return Tensor(arr, requires_grad=False)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, parents before children."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.node_id not in seen:
                stack.append((parent, False))
    return order


def _make(data, parents, backward, op):
    requires = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires, op=op,
                  parents=tuple(parents) if requires else (),
                  backward=backward if requires else None)


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _binary_operands(a, b, opname):
    ta, tb = as_tensor(a), as_tensor(b)
    if ta.shape != tb.shape and not (_is_scalar(ta) or _is_scalar(tb)):
        raise ShapeError(f"{opname}: shapes {ta.shape} and {tb.shape} differ "
                         "(only scalar operands broadcast)")
    # constants adopt the dtype of the differentiable (or array) side
    if ta.dtype != tb.dtype:
        if not ta.requires_grad and (tb.requires_grad or _is_scalar(ta)):
            ta = Tensor(ta.data.astype(tb.dtype))
        elif not tb.requires_grad and (ta.requires_grad or _is_scalar(tb)):
            tb = Tensor(tb.data.astype(ta.dtype))
    return ta, tb


def _reduce_to(grad, target: Tensor):
    if _is_scalar(target) and grad.ndim != 0:
        return np.asarray(grad.sum(), dtype=target.dtype)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    ta, tb = _binary_operands(a, b, "add")
    out = ta.data + tb.data

    def backward(g):
        return _reduce_to(g, ta), _reduce_to(g, tb)

    return _make(out, (ta, tb), backward, "add")


def sub(a, b) -> Tensor:
    ta, tb = _binary_operands(a, b, "sub")
    out = ta.data - tb.data

    def backward(g):
        return _reduce_to(g, ta), _reduce_to(-g, tb)

    return _make(out, (ta, tb), backward, "sub")


def mul(a, b) -> Tensor:
    ta, tb = _binary_operands(a, b, "mul")
    out = ta.data * tb.data

    def backward(g):
        return _reduce_to(g * tb.data, ta), _reduce_to(g * ta.data, tb)

    return _make(out, (ta, tb), backward, "mul")


def div(a, b) -> Tensor:
    ta, tb = _binary_operands(a, b, "div")
    out = ta.data / tb.data

    def backward(g):
        ga = g / tb.data
        gb = -g * ta.data / (tb.data * tb.data)
        return _reduce_to(ga, ta), _reduce_to(gb, tb)

    return _make(out, (ta, tb), backward, "div")


def one_minus(x) -> Tensor:
    tx = as_tensor(x)
    out = 1.0 - tx.data

    def backward(g):
        return (-g,)

    return _make(out, (tx,), backward, "one_minus")


def relu(x) -> Tensor:
    tx = as_tensor(x)
    mask = tx.data > 0
    out = np.maximum(tx.data, 0)

    def backward(g):
        return (g * mask,)

    return _make(out, (tx,), backward, "relu")


def sigmoid(x) -> Tensor:
    tx = as_tensor(x)
    out = expit(tx.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (tx,), backward, "sigmoid")


def log(x) -> Tensor:
    tx = as_tensor(x)
    if np.any(tx.data <= 0):
        # callers clamp first, so this is a bug upstream rather than bad input
        raise FloatingPointError("internal error: log of a non-positive value; clamp before log")
    out = np.log(tx.data)

    def backward(g):
        return (g / tx.data,)

    return _make(out, (tx,), backward, "log")


def power(x, exponent: float) -> Tensor:
    tx = as_tensor(x)
    exponent = float(exponent)
    out = np.power(tx.data, exponent)

    def backward(g):
        if exponent == 0.0:
            return (np.zeros_like(g),)
        return (g * exponent * np.power(tx.data, exponent - 1.0),)

    return _make(out, (tx,), backward, "pow")


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient is zero where clipping is active."""
    tx = as_tensor(x)
    out = np.clip(tx.data, lo, hi)
    inside = (tx.data >= lo) & (tx.data <= hi)

    def backward(g):
        return (g * inside,)

    return _make(out, (tx,), backward, "clamp")


def log_sigmoid(z, eps: float = 0.0, complement: bool = False) -> Tensor:
    """``log(sigmoid(z))`` (or ``log(1 - sigmoid(z))``) computed from the logit.

    The value is clipped to ``[log(eps), log(1 - eps)]`` so it equals the log
    of a probability clamped to ``[eps, 1 - eps]``, but the gradient is the
    unclipped one.  A saturated output therefore still receives a signal.
    """
    tz = as_tensor(z)
    s = -tz.data if not complement else tz.data
    out = -np.logaddexp(0.0, s)
    if eps > 0:
        out = np.clip(out, np.log(eps), np.log1p(-eps)).astype(tz.dtype)
    p = expit(tz.data)

    def backward(g):
        return (g * (-p if complement else 1.0 - p),)

    return _make(out, (tz,), backward, "log_sigmoid")


_UNARY = {"relu": relu, "sigmoid": sigmoid, "log": log, "one_minus": one_minus}
_BINARY = {"mul": mul, "add": add}


def elementwise(x, kind: str, other=None, exponent: float | None = None) -> Tensor:
    """Dispatch by name: relu, sigmoid, log, one_minus, mul, add, pow."""
    if kind in _UNARY:
        return _UNARY[kind](x)
    if kind in _BINARY:
        if other is None:
            raise ValueError(f"elementwise '{kind}' needs a second operand")
        return _BINARY[kind](x, other)
    if kind == "pow":
        if exponent is None:
            raise ValueError("elementwise 'pow' needs an exponent")
        return power(x, exponent)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# reductions and channel plumbing
# ---------------------------------------------------------------------------

def tensor_sum(x) -> Tensor:
    tx = as_tensor(x)
    out = np.asarray(tx.data.sum(), dtype=tx.dtype)

    def backward(g):
        return (np.full(tx.shape, g, dtype=tx.dtype),)

    return _make(out, (tx,), backward, "sum")


def tensor_mean(x) -> Tensor:
    tx = as_tensor(x)
    n = tx.data.size
    out = np.asarray(tx.data.mean(), dtype=tx.dtype)

    def backward(g):
        return (np.full(tx.shape, g / n, dtype=tx.dtype),)

    return _make(out, (tx,), backward, "mean")


def concat_channels(a, b) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    if ta.ndim != 4 or tb.ndim != 4 or ta.shape[0] != tb.shape[0] or ta.shape[2:] != tb.shape[2:]:
        raise ShapeError(f"concat_channels: shapes {ta.shape} and {tb.shape} "
                         "must agree on every dim except channels")
    ca = ta.shape[1]
    out = np.concatenate([ta.data, tb.data], axis=1)

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return _make(out, (ta, tb), backward, "concat")


def split_channels(x, first: int) -> tuple[Tensor, Tensor]:
    """Inverse of :func:`concat_channels`: split after ``first`` channels."""
    tx = as_tensor(x)
    c = tx.shape[1]
    if not 0 < first < c:
        raise ShapeError(f"split_channels: cannot split {c} channels at {first}")

    def part(lo, hi):
        def backward(g):
            full = np.zeros_like(tx.data)
            full[:, lo:hi] = g
            return (full,)

        return _make(tx.data[:, lo:hi].copy(), (tx,), backward, "split")

    return part(0, first), part(first, c)


def add_channel_bias(x, bias) -> Tensor:
    """``x[n, c, h, w] + bias[c]``; the one explicit per-channel broadcast."""
    tx, tb = as_tensor(x), as_tensor(bias)
    if tb.ndim != 1 or tx.ndim != 4 or tb.shape[0] != tx.shape[1]:
        raise ShapeError(f"add_channel_bias: bias {tb.shape} does not match channels of {tx.shape}")
    out = tx.data + tb.data[None, :, None, None]

    def backward(g):
        return g, g.sum(axis=(0, 2, 3))

    return _make(out, (tx, tb), backward, "bias")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(xp, kh, kw, stride):
    """Patches of padded ``xp[N,C,H,W]`` as a (C*kh*kw, N*Ho*Wo) matrix."""
    n, c, hp, wp = xp.shape
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo), ho, wo


def _col2im(cols, shape, kh, kw, stride, ho, wo):
    """Scatter-add (C*kh*kw, N*Ho*Wo) columns back into an array of ``shape``."""
    n, c = shape[:2]
    out = np.zeros(shape, dtype=cols.dtype)
    blocks = cols.reshape(c, kh, kw, n, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += blocks[:, i, j].transpose(1, 0, 2, 3)
    return out


def _to_rows(x):
    """[N,K,H,W] -> (K, N*H*W)."""
    n, k, h, w = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(k, n * h * w)


def _from_rows(rows, n, h, w):
    """(K, N*H*W) -> contiguous [N,K,H,W]."""
    k = rows.shape[0]
    return np.ascontiguousarray(rows.reshape(k, n, h, w).transpose(1, 0, 2, 3))


def _check_conv_shapes(tx, tk, opname, channel_axis):
    if tx.ndim != 4 or tk.ndim != 4:
        raise ShapeError(f"{opname}: expected 4-d input and kernel, got {tx.shape} and {tk.shape}")
    if tx.shape[1] != tk.shape[channel_axis]:
        raise ShapeError(f"{opname}: input {tx.shape} has {tx.shape[1]} channels but kernel "
                         f"{tk.shape} expects {tk.shape[channel_axis]}")


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x[N,C,H,W]`` with ``kernel[K,C,kh,kw]``."""
    tx, tk = as_tensor(x), as_tensor(kernel)
    _check_conv_shapes(tx, tk, "conv2d", 1)
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: need stride >= 1 and padding >= 0, got {stride}, {padding}")
    n, c, h, w = tx.shape
    k, _, kh, kw = tk.shape
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {tk.shape} larger than padded input {tx.shape} "
                         f"(padding {padding})")
    xp = np.pad(tx.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else tx.data
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    kmat = tk.data.reshape(k, -1)
    out = _from_rows(kmat @ cols, n, ho, wo)

    def backward(g):
        g2 = _to_rows(g)
        gk = (g2 @ cols.T).reshape(tk.shape) if tk.requires_grad else None
        gx = None
        if tx.requires_grad:
            gxp = _col2im(kmat.T @ g2, xp.shape, kh, kw, stride, ho, wo)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gk

    return _make(out, (tx, tk), backward, "conv2d")


def transposed_conv2d(x, kernel, stride: int = 2) -> Tensor:
    """Adjoint of :func:`conv2d` (no padding) for ``x[N,K,H,W]``, ``kernel[K,C,kh,kw]``.

    The output is ``[N, C, (H-1)*stride + kh, (W-1)*stride + kw]``.
    """
    tx, tk = as_tensor(x), as_tensor(kernel)
    _check_conv_shapes(tx, tk, "transposed_conv2d", 0)
    if stride < 1:
        raise ValueError(f"transposed_conv2d: stride must be >= 1, got {stride}")
    n, k, h, w = tx.shape
    _, c, kh, kw = tk.shape
    out_shape = (n, c, (h - 1) * stride + kh, (w - 1) * stride + kw)
    kmat = tk.data.reshape(k, -1)
    x2 = _to_rows(tx.data)
    out = _col2im(kmat.T @ x2, out_shape, kh, kw, stride, h, w)

    def backward(g):
        gcols, _, _ = _im2col(g, kh, kw, stride)
        gx = _from_rows(kmat @ gcols, n, h, w) if tx.requires_grad else None
        gk = (x2 @ gcols.T).reshape(tk.shape) if tk.requires_grad else None
        return gx, gk

    return _make(out, (tx, tk), backward, "transposed_conv2d")


def maxpool2d(x, window: int = 2, stride: int = 2) -> Tensor:
    """Max over ``window``-sized windows; ties go to the first row-major position."""
    tx = as_tensor(x)
    if tx.ndim != 4:
        raise ShapeError(f"maxpool2d: expected a 4-d input, got {tx.shape}")
    n, c, h, w = tx.shape
    if window > h or window > w:
        raise ShapeError(f"maxpool2d: window {window} exceeds spatial dims {(h, w)}")
    if h % stride or w % stride:
        raise ShapeError(f"maxpool2d: spatial dims {(h, w)} not divisible by stride {stride}")
    win = sliding_window_view(tx.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)  # first occurrence == row-major tie-break
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    di, dj = np.divmod(arg, window)
    rows = np.arange(ho)[None, None, :, None] * stride + di
    cols = np.arange(wo)[None, None, None, :] * stride + dj
    flat_idx = ((np.arange(n)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * h
                + rows) * w + cols

    def backward(g):
        gx = np.zeros(tx.data.size, dtype=g.dtype)
        if window <= stride:
            gx[flat_idx.ravel()] = g.ravel()
        else:
            np.add.at(gx, flat_idx.ravel(), g.ravel())
        return (gx.reshape(tx.shape),)

    return _make(np.ascontiguousarray(out), (tx,), backward, "maxpool2d")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    n_checked: int
    failures: list = field(default_factory=list)
    non_finite: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and not self.non_finite and self.max_rel_error < self.tolerance


def gradient_check(f: Callable[..., Tensor], point, step: float = 1e-6, tolerance: float = 1e-5,
                   max_coords: int | None = None, seed: int = 0,
                   abs_floor: float = 1e-4) -> GradCheckReport:
    """Compare backward gradients of scalar ``f`` against central differences.

    ``point`` is an array or a sequence of arrays; ``f`` receives one tensor per
    array.  Relative error per coordinate is ``|a - n| / max(|a|, |n|, abs_floor)``.
    With ``max_coords`` only a seeded random subset of each array is probed.
    """
    arrays = [np.array(point, dtype=np.float64)] if isinstance(point, np.ndarray) or np.isscalar(point) \
        else [np.array(p, dtype=np.float64) for p in point]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = f(*leaves)
    if out.data.size != 1:
        raise ShapeError(f"gradient_check needs a scalar function, got shape {out.shape}")
    out.backward()
    rng = np.random.default_rng(seed)

    report = GradCheckReport(max_rel_error=0.0, tolerance=tolerance, n_checked=0)
    for ai, (arr, leaf) in enumerate(zip(arrays, leaves)):
        analytic = np.zeros_like(arr) if leaf.grad is None else leaf.grad
        coords = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            coords = np.sort(rng.choice(arr.size, size=max_coords, replace=False))
        for flat in coords:
            idx = np.unravel_index(flat, arr.shape)
            vals = []
            for sign in (1.0, -1.0):
                probe = [a.copy() for a in arrays]
                probe[ai][idx] += sign * step
                vals.append(float(f(*[Tensor(p) for p in probe]).data))
            if not all(np.isfinite(vals)):
                report.non_finite.append((ai, idx))
                continue
            numeric = (vals[0] - vals[1]) / (2 * step)
            a = float(analytic[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
            report.n_checked += 1
            report.max_rel_error = max(report.max_rel_error, rel)
            if rel >= tolerance:
                report.failures.append((ai, idx, a, numeric, rel))
    return report


def check_many(f: Callable[..., Tensor], points: Sequence, **kwargs) -> list[GradCheckReport]:
    return [gradient_check(f, p, **kwargs) for p in points]
