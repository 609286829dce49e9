"""Dense rank-4 tensors with tape-based reverse-mode differentiation.

Every tensor is laid out row-major as ``[N, C, H, W]``. For spiking layers the
leading axis folds time and batch together in time-major order, i.e. row
``t * B + b`` holds sample ``b`` at step ``t``.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient. Outside a tape they run as plain
inference and the result carries no gradient.

Values are 32-bit by default. Float64 inputs are carried through unchanged so
that finite-difference checks can run in double precision.
"""
from __future__ import annotations

import os
import threading
from typing import Callable, Sequence

import numpy as np
import torch
from torch.nn.grad import conv2d_input, conv2d_weight

from .errors import ConfigError, ContractError, DimensionError, NumericError

_FLOATS = (np.float32, np.float64)


def configure_threads(n: int | None = None) -> int:
    """Bound kernel parallelism; ``SPIKEIR_THREADS`` is the default source."""
    if n is None:
        n = int(os.environ.get("SPIKEIR_THREADS", "1"))
    n = max(1, n)
    torch.set_num_threads(n)
    return n


configure_threads()


class TensorRec:
    """A rank-4 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in _FLOATS:
            arr = arr.astype(np.float32)
        if arr.ndim != 4:
            raise DimensionError(f"expected a rank-4 array, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "TensorRec":
        return TensorRec(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"TensorRec(shape={self.shape}, dtype={self.dtype}{flag})"


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> TensorRec:
    """Build a tensor, padding lower-rank input with leading unit axes."""
    arr = np.asarray(data, dtype=dtype)
    while arr.ndim < 4:
        arr = arr[None]
    return TensorRec(arr, requires_grad=requires_grad)


def zeros(shape, dtype=np.float32) -> TensorRec:
    return TensorRec(np.zeros(shape, dtype=dtype))


class _Node:
    __slots__ = ("op", "inputs", "out", "backward")

    def __init__(self, op, inputs, out, backward):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of the operations executed inside its ``with`` block.

    A tape has a single writer. Nested tapes are allowed; operations record on
    the innermost one.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tapes must be closed in LIFO order")
        stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


_local = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def record(op: str, inputs: Sequence[TensorRec], out: np.ndarray,
           backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> TensorRec:
    """Wrap ``out`` in a tensor and log the op if any input needs a gradient.

    ``backward`` maps the output gradient to one gradient (or None) per input.
    """
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op} produced non-finite values")
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    res = TensorRec(out, requires_grad=needs)
    if needs:
        node = _Node(op, tuple(inputs), res, backward)
        res._node = node
        tape.nodes.append(node)
    return res


def backward(tape: Tape, loss: TensorRec) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf on the tape.

    Nodes are replayed in exact reverse recording order; gradients meeting at
    a fan-out are summed.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    if not tape.nodes:
        raise ContractError("tape is empty")
    if loss._node is None:
        raise ContractError("loss was not produced on this tape")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise ContractError(f"{node.op}: gradient shape {gi.shape} != {inp.shape}")
            if inp._node is None:
                gi = gi.astype(inp.dtype, copy=False)
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                pending[key] = gi if key not in pending else pending[key] + gi
    tape.nodes.clear()


def _dtype(*ts: TensorRec):
    return np.result_type(*(t.data for t in ts))


def _same_shape(op, a: TensorRec, b: TensorRec):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _broadcast_axes(op, full, small) -> tuple[int, ...]:
    axes = []
    for i, (f, s) in enumerate(zip(full, small)):
        if s == 1 and f != 1:
            axes.append(i)
        elif s != f:
            raise DimensionError(f"{op}: cannot broadcast {small} onto {full}")
    return tuple(axes)


# --- pointwise -----------------------------------------------------------

def relu(x: TensorRec) -> TensorRec:
    mask = x.data > 0
    return record("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype),
                  lambda g: (g * mask,))


def elementwise_add(a: TensorRec, b: TensorRec) -> TensorRec:
    _same_shape("add", a, b)
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


add = elementwise_add


def sub(a: TensorRec, b: TensorRec) -> TensorRec:
    _same_shape("sub", a, b)
    return record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def scale(x: TensorRec, s: float) -> TensorRec:
    s = x.dtype.type(s)
    return record("scale", (x,), x.data * s, lambda g: (g * s,))


def abs_(x: TensorRec) -> TensorRec:
    sign = np.sign(x.data)
    return record("abs", (x,), np.abs(x.data), lambda g: (g * sign,))


def sigmoid(x: TensorRec) -> TensorRec:
    y = (1.0 / (1.0 + np.exp(-x.data))).astype(x.dtype)
    return record("sigmoid", (x,), y, lambda g: (g * y * (1 - y),))


def mul(a: TensorRec, b: TensorRec) -> TensorRec:
    """Product where each axis of ``b`` equals that of ``a`` or is 1."""
    axes = _broadcast_axes("mul", a.shape, b.shape)
    out = (a.data * b.data).astype(_dtype(a, b))

    def bw(g):
        gb = g * a.data
        if axes:
            gb = gb.sum(axis=axes, keepdims=True)
        return g * b.data, gb

    return record("mul", (a, b), out, bw)


def add_broadcast(a: TensorRec, b: TensorRec) -> TensorRec:
    """Sum where each axis of ``b`` equals that of ``a`` or is 1."""
    axes = _broadcast_axes("add_broadcast", a.shape, b.shape)
    out = (a.data + b.data).astype(_dtype(a, b))
    return record("add_broadcast", (a, b), out,
                  lambda g: (g, g.sum(axis=axes, keepdims=True) if axes else g))


# --- reductions and reshaping --------------------------------------------

def reduce_mean(x: TensorRec, axis=None) -> TensorRec:
    """Mean over ``axis`` (int, tuple, or None for all); rank is preserved."""
    if axis is None:
        axis = (0, 1, 2, 3)
    elif isinstance(axis, int):
        axis = (axis,)
    axis = tuple(sorted(set(axis)))
    if any(a not in (0, 1, 2, 3) for a in axis):
        raise DimensionError(f"reduce_mean: axis {axis} out of range")
    n = 1
    for a in axis:
        n *= x.shape[a]
    if n == 0:
        raise DimensionError("reduce_mean over an empty axis")
    out = x.data.mean(axis=axis, keepdims=True, dtype=np.float64).astype(x.dtype)
    shape = x.shape
    return record("reduce_mean", (x,), out,
                  lambda g: (np.broadcast_to(g / n, shape).astype(g.dtype),))


def time_mean(x: TensorRec, steps: int) -> TensorRec:
    """Average the ``steps`` time slices folded into axis 0."""
    n = x.shape[0]
    if steps < 1 or n % steps:
        raise DimensionError(f"time_mean: axis 0 ({n}) not divisible by T={steps}")
    b = n // steps
    out = x.data.reshape(steps, b, *x.shape[1:]).mean(axis=0, dtype=np.float64)
    return record("time_mean", (x,), out.astype(x.dtype),
                  lambda g: (np.tile(g / steps, (steps, 1, 1, 1)).astype(g.dtype),))


def time_tile(x: TensorRec, steps: int) -> TensorRec:
    """Repeat ``x`` as ``steps`` consecutive time slices along axis 0."""
    if steps < 1:
        raise ConfigError("time_tile needs steps >= 1")
    b = x.shape[0]
    out = np.tile(x.data, (steps, 1, 1, 1))
    return record("time_tile", (x,), out,
                  lambda g: (g.reshape(steps, b, *g.shape[1:]).sum(axis=0),))


def crop(x: TensorRec, h: int, w: int) -> TensorRec:
    """Top-left ``h`` x ``w`` window."""
    if h > x.shape[2] or w > x.shape[3]:
        raise DimensionError(f"crop {h}x{w} larger than {x.shape}")
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, :, :h, :w] = g
        return (full,)

    return record("crop", (x,), x.data[:, :, :h, :w].copy(), bw)


# --- convolution ---------------------------------------------------------

def conv2d(x: TensorRec, kernel: TensorRec, bias: TensorRec | None = None,
           stride: int = 1, padding: int | None = None) -> TensorRec:
    """2-D cross-correlation with zero padding.

    ``padding`` defaults to ``k // 2`` (same size at stride 1). The forward
    pass accumulates in 64-bit and rounds once to the output dtype.
    """
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise DimensionError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} must have odd extents")
    if bias is not None and bias.data.size != cout:
        raise DimensionError(f"conv2d: bias has {bias.data.size} entries, need {cout}")
    if padding is None:
        padding = kh // 2
    pad = (padding, padding)
    dtype = _dtype(x, kernel)

    xt = torch.from_numpy(np.ascontiguousarray(x.data))
    wt = torch.from_numpy(np.ascontiguousarray(kernel.data))
    bt = None if bias is None else torch.from_numpy(bias.data.reshape(-1).astype(np.float64))
    out = torch.nn.functional.conv2d(xt.double(), wt.double(), bt, stride=stride, padding=pad)
    out = out.numpy().astype(dtype)
    if not np.all(np.isfinite(kernel.data)):
        raise NumericError("conv2d kernel is not finite")

    def bw(g):
        gt = torch.from_numpy(np.ascontiguousarray(g, dtype=dtype))
        xg = xt.to(gt.dtype)
        wg = wt.to(gt.dtype)
        gx = conv2d_input(x.shape, wg, gt, stride=stride, padding=pad).numpy() \
            if x.requires_grad else None
        gw = conv2d_weight(xg, kernel.shape, gt, stride=stride, padding=pad).numpy() \
            if kernel.requires_grad else None
        gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(dtype).reshape(bias.shape)
        return gx, gw, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record("conv2d", inputs, out, bw)


# --- resampling ----------------------------------------------------------

def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row ``i`` holds the align-corners=false weights of output sample ``i``."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    ratio = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def bilinear_resize(x: TensorRec, h: int, w: int) -> TensorRec:
    if h < 1 or w < 1:
        raise ConfigError(f"target size must be >= 1, got {h}x{w}")
    rh = bilinear_matrix(x.shape[2], h)
    rw = bilinear_matrix(x.shape[3], w)
    out = (rh @ x.data.astype(np.float64) @ rw.T).astype(x.dtype)
    return record("bilinear_resize", (x,), out,
                  lambda g: ((rh.T @ g.astype(np.float64) @ rw).astype(g.dtype),))


def channel_avg_pool(x: TensorRec, c_out: int) -> TensorRec:
    """Average contiguous channel groups down to ``c_out`` channels.

    When ``c_out`` does not divide C, the last channel is repeated until it
    does.
    """
    n, c, h, w = x.shape
    if c_out < 1 or c_out > c:
        raise DimensionError(f"channel_avg_pool: cannot pool {c} channels to {c_out}")
    extra = (-c) % c_out
    data = x.data
    if extra:
        data = np.concatenate([data, np.repeat(data[:, -1:], extra, axis=1)], axis=1)
    group = (c + extra) // c_out
    out = data.reshape(n, c_out, group, h, w).mean(axis=2, dtype=np.float64).astype(x.dtype)

    def bw(g):
        gp = np.repeat(g / group, group, axis=1)
        if extra:
            gp[:, c - 1] += gp[:, c:].sum(axis=1)
            gp = gp[:, :c]
        return (np.ascontiguousarray(gp),)

    return record("channel_avg_pool", (x,), out, bw)


# --- spectral ------------------------------------------------------------

def rdft2(x: TensorRec) -> tuple[TensorRec, TensorRec]:
    """Half-spectrum 2-D DFT over (H, W); returns (real, imaginary) parts.

    Output shape is ``[N, C, H, W // 2 + 1]``. Gradients use the exact adjoint
    of the truncated transform.
    """
    n, c, h, w = x.shape
    half = w // 2 + 1
    spec = np.fft.rfft2(x.data.astype(np.float64), axes=(2, 3))

    def adjoint(gc):
        full = np.zeros((n, c, h, w), dtype=np.complex128)
        full[..., :half] = gc
        return (np.real(np.fft.ifft2(full, axes=(2, 3))) * (h * w)).astype(x.dtype)

    re = record("rdft2_re", (x,), spec.real.astype(x.dtype),
                lambda g: (adjoint(g.astype(np.float64)),))
    im = record("rdft2_im", (x,), spec.imag.astype(x.dtype),
                lambda g: (adjoint(1j * g.astype(np.float64)),))
    return re, im


# --- composite helpers ---------------------------------------------------

def mse(a: TensorRec, b: TensorRec) -> TensorRec:
    d = sub(a, b)
    return reduce_mean(mul(d, d))


def l1(a: TensorRec, b: TensorRec) -> TensorRec:
    return reduce_mean(abs_(sub(a, b)))
