"""Minimal shaped-array engine with reverse-mode differentiation.

All values are 64-bit floats.  Tensors are immutable once created; every op
returns a fresh tensor.  Gradients are recorded on an explicit ``Tape``:

    with Tape() as tape:
        loss = sum_all(sigmoid(x))
        tape.backward(loss)

Tapes are thread-local, one per training worker.  Ops called with no active
tape are pure and safe to share across threads.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Raised when a value is NaN/Inf or an op hits a numeric degeneracy."""


# sigmoid saturates to exactly 0/1 in f64 around |x| ~ 37; keep outputs
# strictly inside (0, 1) so downstream logs stay finite
_SIG_EPS = 1e-15
_LOG_CLAMP = 1e-12


class Tensor:
    """A shaped f64 array, optionally carrying a gradient after backward()."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor contains NaN or Inf")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

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
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are accepted where unambiguous
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class _Record:
    __slots__ = ("out", "inputs", "back")

    def __init__(self, out: Tensor, inputs: tuple, back: Callable):
        self.out = out
        self.inputs = inputs
        self.back = back


_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def _active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered op records; append order is a valid topological order."""

    def __init__(self):
        self.records: list[_Record] = []
        self._tracked: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def _tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def backward(self, loss: Tensor) -> None:
        """Populate .grad on every requires_grad leaf reachable from loss.

        Repeated calls without zero_grad accumulate into existing grads.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        if loss.requires_grad:
            _accum_leaf(loss, grads[id(loss)])
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.back(g)
            for t, ig in zip(rec.inputs, in_grads):
                if ig is None or not self._tracks(t):
                    continue
                if t.requires_grad:
                    _accum_leaf(t, ig)
                if id(t) in self._tracked:
                    prev = grads.get(id(t))
                    grads[id(t)] = ig if prev is None else prev + ig


def _accum_leaf(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def backward(loss: Tensor) -> None:
    """Backward on the innermost active tape."""
    tape = _active_tape()
    if tape is None:
        raise RuntimeError("backward() called with no active Tape")
    tape.backward(loss)


def _emit(out_data: np.ndarray, inputs: tuple, back: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(tape._tracks(t) for t in inputs):
        tape.records.append(_Record(out, inputs, back))
        tape._tracked.add(id(out))
    return out


def sgd_step(params: Sequence[Tensor], lr: float) -> None:
    """p <- p - lr * grad for each param; grads are cleared afterwards."""
    for p in params:
        if p.grad is None:
            raise NumericError("sgd_step: parameter has no gradient")
        p.data = p.data - lr * p.grad
        if not np.all(np.isfinite(p.data)):
            raise NumericError("sgd_step produced non-finite parameter")
        p.grad = None


# ---------------------------------------------------------------------------
# broadcasting helper: equal shapes, scalar, or a vector against the
# channel dim (rank-1 b against a of rank >= 3, channel axis = -3)


def _broadcast_pair(a: Tensor, b: Tensor):
    """Return (b_view, reduce_fn) mapping a-shaped grads back to b's shape."""
    if a.shape == b.shape:
        return b.data, None
    if b.data.size == 1:
        return b.data.reshape(()), lambda g: np.sum(g).reshape(b.shape)
    if b.ndim == 1 and a.ndim >= 3 and b.shape[0] == a.shape[-3]:
        view = b.data.reshape(b.shape[0], 1, 1)
        axes = tuple(range(a.ndim - 3)) + (a.ndim - 2, a.ndim - 1)
        return view, lambda g: np.sum(g, axis=axes)
    raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    bv, reduce_b = _broadcast_pair(a, b)
    out = a.data + bv

    def back(g):
        gb = g if reduce_b is None else reduce_b(g)
        return g, gb

    return _emit(out, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    bv, reduce_b = _broadcast_pair(a, b)
    out = a.data - bv

    def back(g):
        gb = -g if reduce_b is None else -reduce_b(g)
        return g, gb

    return _emit(out, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    bv, reduce_b = _broadcast_pair(a, b)
    out = a.data * bv
    ad = a.data

    def back(g):
        ga = g * bv
        gb = g * ad
        if reduce_b is not None:
            gb = reduce_b(gb)
        return ga, gb

    return _emit(out, (a, b), back)


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a/b; b may be scalar or equal-shaped."""
    bv, reduce_b = _broadcast_pair(a, b)
    out = a.data / bv
    ad = a.data

    def back(g):
        ga = g / bv
        gb = -g * ad / (bv * bv)
        if reduce_b is not None:
            gb = reduce_b(gb)
        return ga, gb

    return _emit(out, (a, b), back)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    out = np.where(mask, a.data, 0.0)
    return _emit(out, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-a.data))
    s = np.clip(s, _SIG_EPS, 1.0 - _SIG_EPS)

    def back(g):
        return (g * s * (1.0 - s),)

    return _emit(s, (a,), back)


def elementwise(op: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dispatch form of the elementwise ops: add, mul, relu, sigmoid."""
    if op == "add":
        if b is None:
            raise ShapeError("add needs two operands")
        return add(a, b)
    if op == "mul":
        if b is None:
            raise ShapeError("mul needs two operands")
        return mul(a, b)
    if op == "relu":
        return relu(a)
    if op == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown elementwise op: {op!r}")


def log(a: Tensor) -> Tensor:
    """Natural log, input clamped below at 1e-12."""
    x = np.maximum(a.data, _LOG_CLAMP)
    out = np.log(x)
    mask = a.data >= _LOG_CLAMP

    def back(g):
        return (g * mask / x,)

    return _emit(out, (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def back(g):
        return g @ bd.T, ad.T @ g

    return _emit(out, (a, b), back)


def transpose2d(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose2d expects a matrix, got {a.shape}")
    return _emit(a.data.T.copy(), (a,), lambda g: (g.T,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape

    def back(g):
        return (np.full(shape, float(g.reshape(-1)[0])),)

    return _emit(np.array(np.sum(a.data)), (a,), back)


def mean_all(a: Tensor) -> Tensor:
    return mul(sum_all(a), Tensor(1.0 / a.size))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape {a.shape} -> {shape} changes element count")
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis (axis 0 for rank 3, axis 1 for rank 4)."""
    if not tensors:
        raise ShapeError("concat of empty list")
    nd = tensors[0].ndim
    if nd not in (3, 4):
        raise ShapeError(f"concat expects rank-3/4 tensors, got rank {nd}")
    axis = 0 if nd == 3 else 1
    spatial = tensors[0].shape[axis + 1 :]
    for t in tensors:
        if t.ndim != nd or t.shape[axis + 1 :] != spatial or t.shape[:axis] != tensors[0].shape[:axis]:
            raise ShapeError(f"concat spatial dims differ: {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(out, tuple(tensors), back)


def take_channel(a: Tensor, index: int) -> Tensor:
    """Select one channel of a rank-3 tensor (C,H,W) -> (H,W)."""
    if a.ndim != 3:
        raise ShapeError(f"take_channel expects rank-3, got {a.shape}")
    if not 0 <= index < a.shape[0]:
        raise ShapeError(f"channel {index} out of range for {a.shape}")
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _emit(a.data[index].copy(), (a,), back)


def take_batch(a: Tensor, index: int) -> Tensor:
    """Select one item along the leading (batch) axis."""
    if a.ndim < 2:
        raise ShapeError(f"take_batch expects rank >= 2, got {a.shape}")
    if not 0 <= index < a.shape[0]:
        raise ShapeError(f"batch index {index} out of range for {a.shape}")
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _emit(a.data[index].copy(), (a,), back)


def channel_mean(a: Tensor) -> Tensor:
    """Mean over the channel axis: (C,H,W) -> (H,W)."""
    if a.ndim != 3:
        raise ShapeError(f"channel_mean expects rank-3, got {a.shape}")
    c = a.shape[0]

    def back(g):
        return (np.broadcast_to(g / c, a.shape).copy(),)

    return _emit(a.data.mean(axis=0), (a,), back)


def expand_channel(m: Tensor, channels: int) -> Tensor:
    """Tile a (H,W) map into (channels,H,W); gradient sums over channels."""
    if m.ndim != 2:
        raise ShapeError(f"expand_channel expects rank-2, got {m.shape}")
    out = np.broadcast_to(m.data, (channels,) + m.shape).copy()
    return _emit(out, (m,), lambda g: (g.sum(axis=0),))


def gap(a: Tensor) -> Tensor:
    """Global average pooling: (C,h,w) -> (C,) or (N,C,h,w) -> (N,C)."""
    if a.ndim == 3:
        c, h, w = a.shape
        out = a.data.reshape(c, h * w).mean(axis=1)

        def back(g):
            return (np.broadcast_to(g.reshape(c, 1, 1) / (h * w), a.shape).copy(),)

        return _emit(out, (a,), back)
    if a.ndim == 4:
        n, c, h, w = a.shape
        out = a.data.reshape(n, c, h * w).mean(axis=2)

        def back4(g):
            return (np.broadcast_to(g.reshape(n, c, 1, 1) / (h * w), a.shape).copy(),)

        return _emit(out, (a,), back4)
    raise ShapeError(f"gap expects rank-3/4 input, got {a.shape}")


def softmax_rows(m: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D matrix, max-subtracted for stability."""
    if m.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {m.shape}")
    z = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        dot = np.sum(g * s, axis=1, keepdims=True)
        return (s * (g - dot),)

    return _emit(s, (m,), back)


def minmax_normalize(m: Tensor) -> Tensor:
    """(x - min) / (max - min); a constant input maps to all zeros."""
    flat = m.data.reshape(-1)
    p = int(np.argmin(flat))
    q = int(np.argmax(flat))
    mn, mx = flat[p], flat[q]
    if mx == mn:
        shape = m.shape
        return _emit(np.zeros(shape), (m,), lambda g: (np.zeros(shape),))
    r = mx - mn
    y = (m.data - mn) / r

    def back(g):
        gf = g.reshape(-1)
        dx = gf / r
        total = gf.sum() / r
        s = np.sum(gf * y.reshape(-1)) / r
        dx = dx.copy()
        dx[p] -= total
        dx[q] -= s
        dx[p] += s
        return (dx.reshape(m.shape),)

    return _emit(y, (m,), back)


# ---------------------------------------------------------------------------
# convolution family


def _pair(v):
    return (v, v) if np.isscalar(v) else tuple(v)


def _slice_bounds(off: int, stride: int, count: int) -> slice:
    return slice(off, off + stride * (count - 1) + 1, stride)


def _conv2d_forward(x: np.ndarray, k: np.ndarray, stride, pad):
    """Shift-and-matmul correlation: one batched matmul per kernel offset."""
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    n, ci, hp, wp = xp.shape
    co, _, kh, kw = k.shape
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    out = np.zeros((n, co, ho * wo))
    for u in range(kh):
        rows = _slice_bounds(u, sh, ho)
        for v in range(kw):
            xs = xp[:, :, rows, _slice_bounds(v, sw, wo)].reshape(n, ci, ho * wo)
            out += k[:, :, u, v] @ xs
    return out.reshape(n, co, ho, wo)


def _conv2d_weight_grad(x: np.ndarray, dy: np.ndarray, kshape, stride, pad):
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    n, ci = xp.shape[0], xp.shape[1]
    co, _, kh, kw = kshape
    ho, wo = dy.shape[2], dy.shape[3]
    dyf = dy.reshape(n, co, ho * wo)
    dk = np.zeros(kshape)
    for u in range(kh):
        rows = _slice_bounds(u, sh, ho)
        for v in range(kw):
            xs = xp[:, :, rows, _slice_bounds(v, sw, wo)].reshape(n, ci, ho * wo)
            dk[:, :, u, v] = np.einsum("noa,nia->oi", dyf, xs, optimize=True)
    return dk


def _conv2d_input_grad(dy: np.ndarray, k: np.ndarray, stride, pad, in_hw):
    """Adjoint of _conv2d_forward w.r.t. x, exact for any floor-truncated case."""
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    hin, win_ = in_hw
    n, co, ho, wo = dy.shape
    kh, kw = k.shape[2], k.shape[3]
    gxp = np.zeros((n, k.shape[1], hin + 2 * ph, win_ + 2 * pw))
    dyf = dy.reshape(n, co, ho * wo)
    for u in range(kh):
        rows = _slice_bounds(u, sh, ho)
        for v in range(kw):
            g = (k[:, :, u, v].T @ dyf).reshape(n, k.shape[1], ho, wo)
            gxp[:, :, rows, _slice_bounds(v, sw, wo)] += g
    return np.ascontiguousarray(gxp[:, :, ph : ph + hin, pw : pw + win_])


def _norm_x4(x: Tensor, rank: int):
    """Promote rank-(rank-1) input to a batch of one; returns (arr, had_batch)."""
    if x.ndim == rank:
        return x.data, True
    if x.ndim == rank - 1:
        return x.data[None], False
    raise ShapeError(f"expected rank {rank - 1} or {rank} input, got {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, stride=1, pad=0) -> Tensor:
    """2-D correlation, (N,Ci,H,W) or (Ci,H,W) with kernel (Co,Ci,kh,kw)."""
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be rank-4, got {kernel.shape}")
    xd, batched = _norm_x4(x, 4)
    if xd.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input {xd.shape} vs kernel {kernel.shape}"
        )
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    kh, kw = kernel.shape[2], kernel.shape[3]
    ho = (xd.shape[2] + 2 * ph - kh) // sh + 1
    wo = (xd.shape[3] + 2 * pw - kw) // sw + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(
            f"conv2d output dims non-positive: input {xd.shape}, kernel {kernel.shape}, "
            f"stride {stride}, pad {pad}"
        )
    out = _conv2d_forward(xd, kernel.data, stride, pad)
    out = out[:, :, :ho, :wo]
    in_hw = (xd.shape[2], xd.shape[3])
    kd = kernel.data
    kshape = kernel.shape

    def back(g):
        if g.ndim == 3:
            g = g[None]
        gx = _conv2d_input_grad(g, kd, stride, pad, in_hw)
        gk = _conv2d_weight_grad(xd, g, kshape, stride, pad)
        if not batched:
            gx = gx[0]
        return gx, gk

    return _emit(out if batched else out[0], (x, kernel), back)


def deconv2d(y: Tensor, kernel: Tensor, stride=1, pad=0, out_hw=None) -> Tensor:
    """Transposed conv2d: the exact adjoint of conv2d with the same kernel.

    <conv2d(x,K), y> == <x, deconv2d(y,K)> for all x, y.  Output spatial dims
    default to (in-1)*stride - 2*pad + k; pass out_hw to resolve the
    floor-truncated ambiguity.
    """
    if kernel.ndim != 4:
        raise ShapeError(f"deconv2d kernel must be rank-4, got {kernel.shape}")
    yd, batched = _norm_x4(y, 4)
    if yd.shape[1] != kernel.shape[0]:
        raise ShapeError(
            f"deconv2d channel mismatch: input {yd.shape} vs kernel {kernel.shape}"
        )
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    kh, kw = kernel.shape[2], kernel.shape[3]
    if out_hw is None:
        out_hw = ((yd.shape[2] - 1) * sh - 2 * ph + kh, (yd.shape[3] - 1) * sw - 2 * pw + kw)
    if out_hw[0] <= 0 or out_hw[1] <= 0:
        raise ShapeError(f"deconv2d output dims non-positive: {out_hw}")
    out = _conv2d_input_grad(yd, kernel.data, stride, pad, out_hw)
    kd = kernel.data
    kshape = kernel.shape

    def back(g):
        if g.ndim == 3:
            g = g[None]
        gy = _conv2d_forward(g, kd, stride, pad)
        gy = gy[:, :, : yd.shape[2], : yd.shape[3]]
        gk = _conv2d_weight_grad(g, yd, kshape, stride, pad)
        if not batched:
            gy = gy[0]
        return gy, gk

    return _emit(out if batched else out[0], (y, kernel), back)


def conv3d(x: Tensor, kernel: Tensor, stride=1, pad=0) -> Tensor:
    """3-D correlation over (T,H,W); time axis is valid (no pad, stride 1).

    Input (N,Ci,T,H,W) or (Ci,T,H,W); kernel (Co,Ci,kt,kh,kw); stride/pad
    apply spatially.
    """
    if kernel.ndim != 5:
        raise ShapeError(f"conv3d kernel must be rank-5, got {kernel.shape}")
    xd, batched = _norm_x4(x, 5)
    if xd.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"conv3d channel mismatch: input {xd.shape} vs kernel {kernel.shape}"
        )
    kt = kernel.shape[2]
    t_in = xd.shape[2]
    if t_in < kt:
        raise ShapeError(f"conv3d time axis too short: {t_in} < {kt}")
    t_out = t_in - kt + 1
    # fold (Ci,kt) into the 2-D machinery per output time step
    k2 = kernel.data.reshape(kernel.shape[0], kernel.shape[1] * kt, kernel.shape[3], kernel.shape[4])
    k2t = Tensor(k2)
    outs = []
    slabs = []
    for t0 in range(t_out):
        slab = xd[:, :, t0 : t0 + kt].reshape(xd.shape[0], xd.shape[1] * kt, xd.shape[3], xd.shape[4])
        slabs.append(slab)
        o = _conv2d_forward(slab, k2, stride, pad)
        outs.append(o)
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    kh, kw = kernel.shape[3], kernel.shape[4]
    ho = (xd.shape[3] + 2 * ph - kh) // sh + 1
    wo = (xd.shape[4] + 2 * pw - kw) // sw + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv3d output dims non-positive")
    out = np.stack([o[:, :, :ho, :wo] for o in outs], axis=2)  # (N,Co,T',Ho,Wo)
    in_hw = (xd.shape[3], xd.shape[4])
    kshape = kernel.shape

    def back(g):
        if g.ndim == 4:
            g = g[None]
        gx = np.zeros_like(xd)
        gk = np.zeros(kshape)
        for t0 in range(t_out):
            gt = g[:, :, t0]
            gslab = _conv2d_input_grad(gt, k2, stride, pad, in_hw)
            gx[:, :, t0 : t0 + kt] += gslab.reshape(
                xd.shape[0], xd.shape[1], kt, xd.shape[3], xd.shape[4]
            )
            gk2 = _conv2d_weight_grad(slabs[t0], gt, k2.shape, stride, pad)
            gk += gk2.reshape(kshape)
        if not batched:
            gx_ = gx[0]
            return gx_, gk
        return gx, gk

    return _emit(out if batched else out[0], (x, kernel), back)


# ---------------------------------------------------------------------------
# bilinear upsampling (corner-aligned), expressed as two interpolation matrices


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    w = np.zeros((n_out, n_in))
    if n_in == 1:
        w[:, 0] = 1.0
        return w
    if n_out == 1:
        w[0, 0] = 1.0
        return w
    scale = (n_in - 1) / (n_out - 1)
    for i in range(n_out):
        pos = i * scale
        lo = int(np.floor(pos))
        hi = min(lo + 1, n_in - 1)
        frac = pos - lo
        w[i, lo] += 1.0 - frac
        w[i, hi] += frac
    return w


_INTERP_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _interp(n_in: int, n_out: int) -> np.ndarray:
    key = (n_in, n_out)
    m = _INTERP_CACHE.get(key)
    if m is None:
        m = _interp_matrix(n_in, n_out)
        _INTERP_CACHE[key] = m
    return m


def upsample_bilinear(x: Tensor, target_hw) -> Tensor:
    """Corner-aligned bilinear resize of (...,H,W) to (...,Ho,Wo)."""
    ho, wo = int(target_hw[0]), int(target_hw[1])
    if x.ndim < 2:
        raise ShapeError(f"upsample needs at least 2 dims, got {x.shape}")
    hi, wi = x.shape[-2], x.shape[-1]
    wr = _interp(hi, ho)
    wc = _interp(wi, wo)
    out = np.einsum("ij,...jk,lk->...il", wr, x.data, wc, optimize=True)

    def back(g):
        return (np.einsum("ji,...jk,kl->...il", wr, g, wc, optimize=True),)

    return _emit(out, (x,), back)


def resize_bilinear(arr: np.ndarray, target_hw) -> np.ndarray:
    """Pure-array bilinear resize (no tape), same kernel as upsample_bilinear."""
    t = upsample_bilinear(Tensor(arr), target_hw)
    return t.data
