"""Reverse-mode differentiation over a fixed operation set.

A ``Tape`` records operations executed while it is active (``with Tape() as
tape:``); ``backward(tape, loss)`` then accumulates adjoints into every
``Variable`` with ``requires_grad``. Gradients are additive: calling
``backward`` twice without resetting grads doubles them, and a Variable used
twice receives the sum of its single-use adjoints.

``finite_diff_check`` is the independent central-difference oracle used by
the verification suite; it never calls an operation's analytic backward to
produce its numeric side.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError

_ACTIVE_TAPE = None


class Variable:
    """A tensor value plus its accumulated adjoint."""

    __slots__ = ("value", "grad", "requires_grad", "node_id", "_tape")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = None
        self._tape = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Variable(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return neg(self)


def _wrap(x) -> Variable:
    return x if isinstance(x, Variable) else Variable(np.asarray(x))


class Tape:
    """Ordered record of executed operations; one forward/backward at a time."""

    def __init__(self):
        self.nodes = []  # (output, parents, backward_fn)

    def release(self):
        """Drop recorded nodes (and their saved forward buffers) eagerly.

        Breaks the tape<->variable reference cycle so large intermediates are
        freed without waiting for a gc pass. The tape is unusable afterwards.
        """
        for out, _, _ in self.nodes:
            out._tape = None
        self.nodes.clear()

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a Tape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False


def _record(out: Variable, parents: tuple, backward_fn) -> Variable:
    tape = _ACTIVE_TAPE
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node_id = len(tape.nodes)
        out._tape = tape
        tape.nodes.append((out, parents, backward_fn))
    return out


def backward(tape: Tape, loss: Variable) -> None:
    """Accumulate d(loss)/d(v) into v.grad for every variable on the tape."""
    if loss.value.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.value.shape}")
    if loss._tape is not tape:
        raise ValueError("loss was not produced on this tape")
    seed = np.ones_like(loss.value)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    for out, parents, fn in reversed(tape.nodes):
        if out.grad is None:
            continue
        for parent, g in zip(parents, fn(out.grad)):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g
    # Clear recorded-node grads so a repeat call re-seeds from 1 (leaf grads
    # persist, hence calling backward twice without reset doubles them).
    for out, _, _ in tape.nodes:
        out.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.astype(g.dtype, copy=False)


# ---------------------------------------------------------------------------
# pointwise


def add(a: Variable, b: Variable) -> Variable:
    out = Variable(a.value + b.value)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Variable, b: Variable) -> Variable:
    out = Variable(a.value - b.value)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Variable, b: Variable) -> Variable:
    out = Variable(a.value * b.value)

    def back(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _record(out, (a, b), back)


def div(a: Variable, b: Variable) -> Variable:
    if np.any(b.value == 0):
        raise NumericError("division by exact zero")
    out = Variable(a.value / b.value)

    def back(g):
        ga = _unbroadcast(g / b.value, a.shape)
        gb = _unbroadcast(-g * a.value / (b.value * b.value), b.shape)
        return ga, gb

    return _record(out, (a, b), back)


def neg(a: Variable) -> Variable:
    return _record(Variable(-a.value), (a,), lambda g: (-g,))


def relu(a: Variable) -> Variable:
    # subgradient at exactly 0 is 0
    mask = a.value > 0
    out = Variable(np.where(mask, a.value, 0))
    return _record(out, (a,), lambda g: (g * mask,))


def leaky_relu(a: Variable, alpha: float = 0.01) -> Variable:
    mask = a.value > 0
    out = Variable(np.where(mask, a.value, alpha * a.value))
    return _record(out, (a,), lambda g: (g * np.where(mask, 1.0, alpha).astype(g.dtype),))


def relu6(a: Variable) -> Variable:
    mask = (a.value > 0) & (a.value < 6)
    out = Variable(np.clip(a.value, 0, 6))
    return _record(out, (a,), lambda g: (g * mask,))


def identity(a: Variable) -> Variable:
    return _record(Variable(a.value.copy()), (a,), lambda g: (g,))


def tanh(a: Variable) -> Variable:
    t = np.tanh(a.value)
    out = Variable(t)
    return _record(out, (a,), lambda g: (g * (1.0 - t * t),))


def sigmoid(a: Variable) -> Variable:
    with np.errstate(over="ignore"):  # exp overflow saturates correctly to 0/1
        s = 1.0 / (1.0 + np.exp(-a.value))
    out = Variable(s)
    return _record(out, (a,), lambda g: (g * s * (1.0 - s),))


def sqrt(a: Variable) -> Variable:
    r = np.sqrt(a.value)
    out = Variable(r)
    return _record(out, (a,), lambda g: (g * (0.5 / r),))


def exp(a: Variable) -> Variable:
    e = np.exp(a.value)
    out = Variable(e)
    return _record(out, (a,), lambda g: (g * e,))


def log(a: Variable) -> Variable:
    out = Variable(np.log(a.value))
    return _record(out, (a,), lambda g: (g / a.value,))


# ---------------------------------------------------------------------------
# linear algebra / structure


def matmul(a: Variable, b: Variable) -> Variable:
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents disagree: {a.shape} x {b.shape}")
    out = Variable(a.value @ b.value)

    def back(g):
        return g @ b.value.T, a.value.T @ g

    return _record(out, (a, b), back)


def transpose(a: Variable) -> Variable:
    out = Variable(a.value.T)
    return _record(out, (a,), lambda g: (g.T,))


def reshape(a: Variable, shape) -> Variable:
    out = Variable(a.value.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def vsum(a: Variable, axis=None, keepdims: bool = False) -> Variable:
    out_val = a.value.sum(axis=axis, dtype=np.float64, keepdims=keepdims).astype(a.dtype)
    out = Variable(out_val)
    axes = _norm_axes(axis, a.value.ndim)

    def back(g):
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

    return _record(out, (a,), back)


def vmean(a: Variable, axis=None, keepdims: bool = False) -> Variable:
    out_val = a.value.mean(axis=axis, dtype=np.float64, keepdims=keepdims).astype(a.dtype)
    out = Variable(out_val)
    axes = _norm_axes(axis, a.value.ndim)
    count = a.value.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))

    def back(g):
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype, copy=False),)

    return _record(out, (a,), back)


def _norm_axes(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def repeat(a: Variable, times: int, axis: int) -> Variable:
    """Duplicate each slice along ``axis`` ``times`` consecutive times."""
    out = Variable(np.repeat(a.value, times, axis=axis))
    shape = a.shape

    def back(g):
        expanded = g.reshape(shape[:axis] + (shape[axis], times) + shape[axis + 1 :])
        return (expanded.sum(axis=axis + 1),)

    return _record(out, (a,), back)


def pick(logits: Variable, labels: np.ndarray) -> Variable:
    """out[b] = logits[b, labels[b]]."""
    labels = np.asarray(labels)
    rows = np.arange(logits.shape[0])
    out = Variable(logits.value[rows, labels])

    def back(g):
        gl = np.zeros_like(logits.value)
        gl[rows, labels] = g
        return (gl,)

    return _record(out, (logits,), back)


# ---------------------------------------------------------------------------
# spatial ops


def conv2d(x: Variable, w: Variable, stride: int = 1, padding: int = 0) -> Variable:
    """NCHW convolution (cross-correlation) with square stride/padding."""
    bsz, cin, h, ww = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv channel mismatch: input {cin} vs weight {cin_w}")
    xp = np.pad(x.value, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (ww + 2 * padding - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        bsz * ho * wo, cin * kh * kw
    )
    wmat = w.value.reshape(cout, cin * kh * kw)
    out_val = (cols @ wmat.T).reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2)
    out = Variable(np.ascontiguousarray(out_val))

    def back(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(bsz * ho * wo, cout)
        gw = (g2.T @ cols).reshape(w.shape)
        gcols = (g2 @ wmat).reshape(bsz, ho, wo, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += gcols[
                    :, :, :, :, i, j
                ]
        gx = gxp[:, :, padding : padding + h, padding : padding + ww] if padding else gxp
        return gx, gw

    return _record(out, (x, w), back)


def avg_pool2d(x: Variable, kernel: int) -> Variable:
    bsz, c, h, w = x.shape
    k = kernel
    if h % k or w % k:
        raise ShapeError(f"pool kernel {k} does not tile {h}x{w}")
    ho, wo = h // k, w // k
    out = Variable(x.value.reshape(bsz, c, ho, k, wo, k).mean(axis=(3, 5)))

    def back(g):
        gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (gx.astype(x.dtype, copy=False),)

    return _record(out, (x,), back)


def max_pool2d(x: Variable, kernel: int) -> Variable:
    bsz, c, h, w = x.shape
    k = kernel
    if h % k or w % k:
        raise ShapeError(f"pool kernel {k} does not tile {h}x{w}")
    ho, wo = h // k, w // k
    win = x.value.reshape(bsz, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(
        bsz, c, ho, wo, k * k
    )
    idx = win.argmax(axis=-1)
    out = Variable(np.take_along_axis(win, idx[..., None], axis=-1)[..., 0])

    def back(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(bsz, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(
            bsz, c, h, w
        )
        return (gx,)

    return _record(out, (x,), back)


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class FiniteDiffEntry:
    name: str
    max_rel_err: float
    excluded: int = 0


@dataclass
class FiniteDiffReport:
    tol_rel: float
    entries: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.max_rel_err <= self.tol_rel for e in self.entries)

    @property
    def worst(self) -> FiniteDiffEntry:
        return max(self.entries, key=lambda e: e.max_rel_err)


def finite_diff_check(f, params, step: float = 1e-5, tol_rel: float = 1e-4,
                      names=None) -> FiniteDiffReport:
    """Compare analytic gradients of scalar f() against central differences.

    ``f`` must be deterministic and rebuild its computation from the current
    ``param.value`` contents on every call. Elements sitting on a kink
    (one-sided slopes disagreeing sharply) are excluded from pass/fail.
    """
    if names is None:
        names = [f"param{i}" for i in range(len(params))]

    def value():
        return float(np.asarray(f().value).reshape(()))

    v1, v2 = value(), value()
    if v1 != v2:
        raise NumericError("function is non-deterministic: two forward passes disagree")

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
        backward(tape, loss)
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]

    report = FiniteDiffReport(tol_rel=tol_rel)
    f0 = v1
    for p, a, name in zip(params, analytic, names):
        flat = p.value.reshape(-1)
        worst = 0.0
        excluded = 0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = value()
            flat[i] = orig - step
            fm = value()
            flat[i] = orig
            left = (f0 - fm) / step
            right = (fp - f0) / step
            if abs(left - right) > 1e-3 * max(1.0, abs(left), abs(right)):
                excluded += 1  # non-differentiable point
                continue
            numeric = (fp - fm) / (2 * step)
            ai = a.reshape(-1)[i]
            rel = abs(ai - numeric) / max(abs(ai), abs(numeric), 1e-8)
            worst = max(worst, rel)
        report.entries.append(FiniteDiffEntry(name=name, max_rel_err=worst, excluded=excluded))
    return report
