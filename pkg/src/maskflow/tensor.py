"""Dense tensors with a reverse-mode tape over a small, fixed operator set.

Only the operators needed by the masking and flow networks are provided.
Shapes are explicit: there is no implicit broadcasting, apart from scalar
``scale``. Use :func:`expand` to repeat size-1 axes deliberately.

Each thread records onto its own :class:`Tape`. Calling :func:`backward` on a
scalar loss walks the tape in reverse recording order (a valid reverse
topological order), fills ``.grad`` on every ``requires_grad`` leaf and then
clears the tape.

Training runs in float32. Gradient checks run in float64, switched with
:func:`precision`.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

__all__ = [
    "Tensor", "Tape", "TensorError", "NonFiniteError", "GradCheckReport",
    "precision", "get_default_dtype", "no_grad", "is_grad_enabled", "get_tape",
    "clear_tape", "backward", "grad_check", "zero_grad",
    "add", "sub", "mul", "scale", "matmul", "conv2d", "batch_norm", "layer_norm",
    "sigmoid", "tanh", "leaky_relu", "softmax", "concat", "getitem",
    "transpose", "reshape", "sum", "mean", "expand", "lstm",
]


class TensorError(ValueError):
    """Raised for shape mismatches and other misuse of the tensor API."""


class NonFiniteError(FloatingPointError):
    """Raised when an operator produces NaN or Inf."""


_local = threading.local()


def get_default_dtype():
    return getattr(_local, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors in this thread."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise TensorError(f"unsupported precision {dtype}")
    old = get_default_dtype()
    _local.dtype = dtype
    try:
        yield
    finally:
        _local.dtype = old


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    old = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = old


class Tape:
    """Ordered record of operations that need a backward pass."""

    def __init__(self):
        self.records: list[Tensor] = []

    def record(self, node: "Tensor") -> None:
        self.records.append(node)

    def clear(self) -> None:
        for node in self.records:
            node._parents = ()
            node._backward = None
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def clear_tape() -> None:
    get_tape().clear()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=dtype or get_default_dtype())
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], back: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op}: non-finite value in output of shape {data.shape}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = back
        get_tape().record(out)
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise TensorError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on all leaves reachable from ``loss``, then clear the tape.

    Leaf gradients accumulate across calls; use :func:`zero_grad` between steps.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise TensorError(f"backward: loss must be a scalar, got shape {loss.shape}")
    tape = get_tape()
    if not loss.requires_grad or not tape.records:
        raise TensorError("backward: nothing recorded on the tape for this loss")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.records):
        g = node.grad
        if g is None:
            continue
        grads = node._backward(g)
        for p, gp in zip(node._parents, grads):
            if gp is None or not p.requires_grad:
                continue
            p.grad = gp if p.grad is None else p.grad + gp
        node.grad = None
    tape.clear()


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape("add", a, b)
    return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape("sub", a, b)
    return _result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def scale(a, s: float) -> Tensor:
    a = _wrap(a)
    s = float(s)
    return _result(a.data * a.data.dtype.type(s), "scale", (a,), lambda g: (g * g.dtype.type(s),))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Either both operands share identical leading axes, or ``b`` is a plain
    2-D weight matrix contracted against the last axis of ``a``.
    """
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise TensorError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if bd.ndim == 2:
        if ad.shape[-1] != bd.shape[0]:
            raise TensorError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
        k, n = bd.shape

        def back(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n) if b.requires_grad else None
            return ga, gb

        return _result(ad @ bd, "matmul", (a, b), back)
    if ad.ndim != bd.ndim or ad.shape[:-2] != bd.shape[:-2] or ad.shape[-1] != bd.shape[-2]:
        raise TensorError(f"matmul: shape mismatch {a.shape} @ {b.shape}")

    def back_batched(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, "matmul", (a, b), back_batched)


def sigmoid(x) -> Tensor:
    x = _wrap(x)
    y = expit(x.data)
    return _result(y, "sigmoid", (x,), lambda g: (g * y * (1 - y),))


def tanh(x) -> Tensor:
    x = _wrap(x)
    y = np.tanh(x.data)
    return _result(y, "tanh", (x,), lambda g: (g * (1 - y * y),))


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = _wrap(x)
    pos = x.data > 0
    dt = x.data.dtype.type
    factor = np.where(pos, dt(1), dt(slope))
    return _result(x.data * factor, "leaky_relu", (x,), lambda g: (g * factor,))


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = _wrap(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, "softmax", (x,), back)


# ---------------------------------------------------------------------------
# normalization and convolution


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, optionally followed by a per-feature affine map."""
    x = _wrap(x)
    d = x.shape[-1]
    parents = [x]
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p is not None:
            if p.shape != (d,):
                raise TensorError(f"layer_norm: {name} shape {p.shape} does not match features {d}")
            parents.append(p)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat
    if gamma is not None:
        y = y * gamma.data
    if beta is not None:
        y = y + beta.data

    def back(g):
        gxhat = g * gamma.data if gamma is not None else g
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        out = [gx]
        lead = tuple(range(xd.ndim - 1))
        if gamma is not None:
            out.append((g * xhat).sum(axis=lead))
        if beta is not None:
            out.append(g.sum(axis=lead))
        return tuple(out)

    return _result(y, "layer_norm", parents, back)


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of a ``(batch, channels, h, w)`` input.

    In training mode batch statistics are used and the running buffers are
    updated in place; in eval mode the running statistics are used, which
    makes the op affine in ``x``.
    """
    x = _wrap(x)
    if x.ndim != 4:
        raise TensorError(f"batch_norm: expected 4-D input, got {x.shape}")
    c = x.shape[1]
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p.shape != (c,):
            raise TensorError(f"batch_norm: {name} shape {p.shape} does not match channels {c}")
    xd = x.data
    axes = (0, 2, 3)
    gd = gamma.data.reshape(1, c, 1, 1)
    if training:
        n = xd.shape[0] * xd.shape[2] * xd.shape[3]
        if n < 2:
            raise TensorError("batch_norm: need more than one value per channel in training mode")
        mu = xd.mean(axis=axes, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(c) * n / (n - 1)
    else:
        mu = running_mean.reshape(1, c, 1, 1).astype(xd.dtype)
        xc = xd - mu
        var = running_var.reshape(1, c, 1, 1).astype(xd.dtype)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat * gd + beta.data.reshape(1, c, 1, 1)

    def back(g):
        gxhat = g * gd
        if training:
            gx = rstd * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                         - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
        else:
            gx = gxhat * rstd
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result(y, "batch_norm", (x, gamma, beta), back)


def conv2d(x, w, b=None, padding: int = 1) -> Tensor:
    """Stride-1 cross-correlation of ``(B, Cin, H, W)`` with ``(Cout, Cin, kh, kw)``."""
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise TensorError(f"conv2d: shape mismatch input {x.shape} vs kernel {w.shape}")
    cout, cin, kh, kw = w.shape
    if b is not None and b.shape != (cout,):
        raise TensorError(f"conv2d: bias shape {b.shape} does not match {cout} output channels")
    p = int(padding)
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    bsz, _, hp, wp = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    if ho < 1 or wo < 1:
        raise TensorError(f"conv2d: kernel {w.shape} larger than padded input {xp.shape}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # B, Cin, Ho, Wo, kh, kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    y = (cols @ wmat.T).reshape(bsz, ho, wo, cout)
    if b is not None:
        y = y + b.data
    y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        gt = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gt.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gt @ wmat).reshape(bsz, ho, wo, cin, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + ho, j:j + wo] += gcols[:, :, i, j]
            gx = gxp[:, :, p:p + xd.shape[2], p:p + xd.shape[3]] if p else gxp
        out = [gx, gw]
        if b is not None:
            out.append(g.sum(axis=(0, 2, 3)))
        return tuple(out)

    return _result(y, "conv2d", parents, back)


# ---------------------------------------------------------------------------
# structural ops


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise TensorError("concat: no inputs")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise TensorError(f"concat: shape mismatch {ts[0].shape} vs {t.shape} on axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]
    y = np.concatenate([t.data for t in ts], axis=ax)
    return _result(y, "concat", ts, lambda g: tuple(np.split(g, sizes, axis=ax)))


def getitem(x, idx) -> Tensor:
    """Basic slicing (ints, slices, ellipsis); no fancy indexing."""
    x = _wrap(x)
    items = idx if isinstance(idx, tuple) else (idx,)
    for it in items:
        if not (it is Ellipsis or it is None or isinstance(it, (int, np.integer, slice))):
            raise TensorError(f"slice: unsupported index {it!r}")
    y = x.data[idx]

    def back(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _result(y, "slice", (x,), back)


def transpose(x, axes=None) -> Tensor:
    x = _wrap(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise TensorError(f"transpose: invalid axes {axes} for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), "transpose", (x,), lambda g: (g.transpose(inv),))


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise TensorError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _result(y, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _wrap(x)
    y = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(y, "sum", (x,), back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    if axis is None:
        n = x.size
    else:
        n = int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis, keepdims), 1.0 / n)


def expand(x, shape) -> Tensor:
    """Repeat size-1 axes to ``shape``; the only explicit broadcast in the library."""
    x = _wrap(x)
    shape = tuple(shape)
    if len(shape) != x.ndim or any(s != d and d != 1 for s, d in zip(shape, x.shape)):
        raise TensorError(f"expand: cannot expand {x.shape} to {shape}")
    axes = tuple(i for i, (s, d) in enumerate(zip(shape, x.shape)) if s != d)
    return _result(np.broadcast_to(x.data, shape), "expand", (x,),
                   lambda g: (g.sum(axis=axes, keepdims=True),))


def lstm(x, w_ih, w_hh, b, reverse: bool = False) -> Tensor:
    """One direction of an LSTM layer over ``(batch, time, features)``.

    Gate order along the ``4*hidden`` axis is input, forget, cell, output.
    Fused into a single tape node; backward is truncation-free BPTT.
    """
    x, w_ih, w_hh, b = _wrap(x), _wrap(w_ih), _wrap(w_hh), _wrap(b)
    if x.ndim != 3:
        raise TensorError(f"lstm: expected (batch, time, features), got {x.shape}")
    bsz, steps, nin = x.shape
    hid = w_hh.shape[0]
    if w_ih.shape != (nin, 4 * hid) or w_hh.shape != (hid, 4 * hid) or b.shape != (4 * hid,):
        raise TensorError(f"lstm: weight shapes {w_ih.shape}, {w_hh.shape}, {b.shape} "
                          f"do not fit input {x.shape}")
    dt = x.data.dtype
    xw = x.data @ w_ih.data + b.data
    whh = w_hh.data
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    gates = np.empty((steps, bsz, 4 * hid), dtype=dt)
    cs = np.empty((steps, bsz, hid), dtype=dt)
    hs = np.empty((steps, bsz, hid), dtype=dt)
    h = np.zeros((bsz, hid), dtype=dt)
    c = np.zeros((bsz, hid), dtype=dt)
    for t in order:
        z = xw[:, t] + h @ whh
        a = gates[t]
        a[:, :2 * hid] = expit(z[:, :2 * hid])
        a[:, 2 * hid:3 * hid] = np.tanh(z[:, 2 * hid:3 * hid])
        a[:, 3 * hid:] = expit(z[:, 3 * hid:])
        c = a[:, hid:2 * hid] * c + a[:, :hid] * a[:, 2 * hid:3 * hid]
        h = a[:, 3 * hid:] * np.tanh(c)
        cs[t] = c
        hs[t] = h
    y = np.ascontiguousarray(hs.transpose(1, 0, 2))

    def back(g):
        seq = list(order)
        dz_all = np.empty((steps, bsz, 4 * hid), dtype=dt)
        dh_next = np.zeros((bsz, hid), dtype=dt)
        dc_next = np.zeros((bsz, hid), dtype=dt)
        gw_hh = np.zeros_like(whh)
        zero = np.zeros((bsz, hid), dtype=dt)
        for k in range(steps - 1, -1, -1):
            t = seq[k]
            prev = seq[k - 1] if k > 0 else None
            a = gates[t]
            gi, gf, gg, go = a[:, :hid], a[:, hid:2 * hid], a[:, 2 * hid:3 * hid], a[:, 3 * hid:]
            c_prev = cs[prev] if prev is not None else zero
            h_prev = hs[prev] if prev is not None else zero
            tc = np.tanh(cs[t])
            dh = g[:, t] + dh_next
            dc = dh * go * (1 - tc * tc) + dc_next
            dz = dz_all[t]
            dz[:, :hid] = dc * gg * gi * (1 - gi)
            dz[:, hid:2 * hid] = dc * c_prev * gf * (1 - gf)
            dz[:, 2 * hid:3 * hid] = dc * gi * (1 - gg * gg)
            dz[:, 3 * hid:] = dh * tc * go * (1 - go)
            dc_next = dc * gf
            gw_hh += h_prev.T @ dz
            dh_next = dz @ whh.T
        dxw = dz_all.transpose(1, 0, 2)
        gx = dxw @ w_ih.data.T if x.requires_grad else None
        gw_ih = x.data.reshape(-1, nin).T @ dxw.reshape(-1, 4 * hid)
        return gx, gw_ih, gw_hh, dxw.sum(axis=(0, 1))

    return _result(y, "lstm", (x, w_ih, w_hh, b), back)


# ---------------------------------------------------------------------------
# finite-difference gradient check


@dataclass
class GradCheckReport:
    errors: list[float] = field(default_factory=list)
    names: list[str] = field(default_factory=list)
    tol: float = 1e-4
    checked: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors, default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def __str__(self) -> str:
        worst = self.names[int(np.argmax(self.errors))] if self.errors else "-"
        status = "PASS" if self.passed else "FAIL"
        return (f"grad_check {status}: max rel err {self.max_error:.3e} "
                f"(tol {self.tol:g}, {self.checked} coords, worst '{worst}')")


def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               tol: float = 1e-4, max_checks: int | None = None, seed: int = 0,
               atol: float = 1e-6, names: Sequence[str] | None = None) -> GradCheckReport:
    """Compare tape gradients of ``f()`` against central differences.

    ``f`` takes no arguments and closes over ``inputs``, which are perturbed
    in place. The error per coordinate is ``|a - n| / (max(|a|, |n|) + atol)``;
    the report keeps the maximum per input tensor. ``max_checks`` limits the
    number of randomly chosen coordinates per input.
    """
    for x in inputs:
        if x.data.dtype != np.float64:
            raise TensorError("grad_check: inputs must be float64; wrap in precision(np.float64)")
    zero_grad(inputs)
    clear_tape()
    loss = f()
    backward(loss)
    analytic = [x.grad if x.grad is not None else np.zeros_like(x.data) for x in inputs]
    zero_grad(inputs)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    with no_grad():
        for k, x in enumerate(inputs):
            flat = x.data.reshape(-1)
            if max_checks is not None and flat.size > max_checks:
                coords = rng.choice(flat.size, size=max_checks, replace=False)
            else:
                coords = np.arange(flat.size)
            a_flat = analytic[k].reshape(-1)
            worst = 0.0
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                a = a_flat[i]
                err = abs(a - num) / (max(abs(a), abs(num)) + atol)
                worst = max(worst, err)
            report.errors.append(float(worst))
            report.names.append(names[k] if names else (x.name or f"input{k}"))
            report.checked += len(coords)
    return report
