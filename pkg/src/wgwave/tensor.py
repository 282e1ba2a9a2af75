"""Dense tensors with tape-based reverse-mode autodiff.

Everything the models and losses need is expressed through the primitive
ops in this module. Each op computes its forward result with NumPy and,
when a Tape is active and the result requires grad, appends a backward
closure to the tape. ``backward(loss)`` replays the tape in reverse,
accumulating gradients into ``.grad`` buffers (summed across reuses).

Conventions:
  * signals are (batch, channels, time) with time contiguous;
  * ops never mutate their inputs;
  * binary elementwise ops take exactly-matching shapes or a Python scalar;
  * no tape active (or no input requiring grad) means pure inference --
    nothing is recorded and the overhead is a couple of attribute checks.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ShapeError, StateError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _active_tape():
    return getattr(_state, "tape", None)


class Tape:
    """Ordered record of executed ops; reverse order is a valid backprop order."""

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        if _active_tape() is not None:
            raise StateError("a tape is already active on this thread")
        _state.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.tape = None
        return False

    def __len__(self):
        return len(self._nodes)

    def _record(self, backward_fn):
        self._nodes.append(backward_fn)


class Tensor:
    """N-D float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype):
        t = Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)
        return t

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; scalars allowed on either side
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_array(x, like):
    """Coerce a scalar operand to the dtype of ``like``."""
    return np.asarray(x, dtype=like.dtype)


def _make(data, parents, backward_fn):
    """Create a result tensor and record ``backward_fn`` if grads are wanted.

    ``backward_fn(out)`` reads ``out.grad`` and accumulates into the parents.
    """
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    tape = _active_tape()
    if req and tape is not None:

        def node():
            if out.grad is not None:
                backward_fn(out.grad)

        tape._record(node)
    return out


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not match")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtypes {a.data.dtype} and {b.data.dtype} do not match")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    if not isinstance(b, Tensor):
        return _make(a.data + _as_array(b, a.data), [a], lambda g: a.accumulate_grad(g))
    if not isinstance(a, Tensor):
        return add(b, a)
    _check_same_shape(a, b, "add")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _make(a.data + b.data, [a, b], bwd)


def sub(a, b):
    if not isinstance(b, Tensor):
        return add(a, -b)
    _check_same_shape(a, b, "sub")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)

    return _make(a.data - b.data, [a, b], bwd)


def mul(a, b):
    if not isinstance(b, Tensor):
        return scale(a, b)
    if not isinstance(a, Tensor):
        return scale(b, a)
    _check_same_shape(a, b, "mul")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _make(a.data * b.data, [a, b], bwd)


def scale(x, c):
    c = float(c)
    return _make(x.data * np.asarray(c, dtype=x.data.dtype), [x],
                 lambda g: x.accumulate_grad(g * np.asarray(c, dtype=x.data.dtype)))


def neg(x):
    return _make(-x.data, [x], lambda g: x.accumulate_grad(-g))


def exp(x):
    out_data = np.exp(x.data)
    return _make(out_data, [x], lambda g: x.accumulate_grad(g * out_data))


def log(x):
    if np.any(x.data <= 0):
        from .errors import NumericError

        raise NumericError("log of non-positive value; clamp at the call site")
    return _make(np.log(x.data), [x], lambda g: x.accumulate_grad(g / x.data))


def tanh(x):
    out_data = np.tanh(x.data)
    return _make(out_data, [x], lambda g: x.accumulate_grad(g * (1.0 - out_data * out_data)))


def sigmoid(x):
    # stable logistic: exp on the negative half only
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    return _make(out_data, [x], lambda g: x.accumulate_grad(g * out_data * (1.0 - out_data)))


def relu(x):
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0), [x], lambda g: x.accumulate_grad(g * mask))


def abs_(x):
    s = np.sign(x.data)
    return _make(np.abs(x.data), [x], lambda g: x.accumulate_grad(g * s))


def sqrt(x):
    out_data = np.sqrt(x.data)

    def bwd(g):
        x.accumulate_grad(g * (0.5 / out_data))

    return _make(out_data, [x], bwd)


def clamp_min(x, floor):
    floor = float(floor)
    mask = x.data > floor
    return _make(np.where(mask, x.data, np.asarray(floor, dtype=x.data.dtype)), [x],
                 lambda g: x.accumulate_grad(g * mask))


def sum_(x):
    """Full reduction to a scalar tensor."""

    def bwd(g):
        x.accumulate_grad(np.full_like(x.data, g))

    return _make(x.data.sum(dtype=x.data.dtype), [x], bwd)


def mean(x):
    return scale(sum_(x), 1.0 / x.data.size)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.data.shape} as {shape}")
    old = x.data.shape
    return _make(x.data.reshape(shape), [x], lambda g: x.accumulate_grad(g.reshape(old)))


def slice_channels(x, lo, hi):
    """x[:, lo:hi, :] for a (B, C, T) tensor."""
    if x.data.ndim != 3:
        raise ShapeError("slice_channels expects (B, C, T)")
    B, C, T = x.data.shape
    if not (0 <= lo < hi <= C):
        raise ShapeError(f"slice_channels: [{lo}, {hi}) out of range for C={C}")

    def bwd(g):
        full = np.zeros_like(x.data)
        full[:, lo:hi, :] = g
        x.accumulate_grad(full)

    return _make(np.ascontiguousarray(x.data[:, lo:hi, :]), [x], bwd)


def concat_channels(a, b):
    """Concatenate two (B, C, T) tensors along channels."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError("concat_channels expects (B, C, T)")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2] != b.data.shape[2]:
        raise ShapeError(f"concat_channels: {a.data.shape} vs {b.data.shape}")
    Ca = a.data.shape[1]

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g[:, :Ca, :])
        if b.requires_grad:
            b.accumulate_grad(g[:, Ca:, :])

    return _make(np.concatenate([a.data, b.data], axis=1), [a, b], bwd)


def take_row(x, i):
    """Row i of a 2-D tensor as a 1-D tensor."""
    if x.data.ndim != 2:
        raise ShapeError("take_row expects a 2-D tensor")
    i = int(i)

    def bwd(g):
        full = np.zeros_like(x.data)
        full[i] = g
        x.accumulate_grad(full)

    return _make(x.data[i].copy(), [x], bwd)


def unfold_time(x, g):
    """(B, C, T) -> (B, C*g, T//g): out[b, c*g+p, n] = x[b, c, n*g+p].

    Groups g consecutive timesteps into channels. Requires g | T.
    """
    if x.data.ndim != 3:
        raise ShapeError("unfold_time expects (B, C, T)")
    B, C, T = x.data.shape
    g = int(g)
    if g < 1 or T % g != 0:
        raise ShapeError(f"unfold_time: T={T} not a multiple of g={g}")
    N = T // g

    def fwd(d):
        return d.reshape(B, C, N, g).transpose(0, 1, 3, 2).reshape(B, C * g, N)

    def bwd(grad):
        x.accumulate_grad(
            grad.reshape(B, C, g, N).transpose(0, 1, 3, 2).reshape(B, C, T)
        )

    return _make(np.ascontiguousarray(fwd(x.data)), [x], bwd)


def fold_time(x, g):
    """Inverse of unfold_time: (B, C*g, N) -> (B, C, N*g)."""
    if x.data.ndim != 3:
        raise ShapeError("fold_time expects (B, C*g, N)")
    B, Cg, N = x.data.shape
    g = int(g)
    if g < 1 or Cg % g != 0:
        raise ShapeError(f"fold_time: channel count {Cg} not a multiple of g={g}")
    C = Cg // g

    def bwd(grad):
        x.accumulate_grad(
            grad.reshape(B, C, N, g).transpose(0, 1, 3, 2).reshape(B, Cg, N)
        )

    out_data = x.data.reshape(B, C, g, N).transpose(0, 1, 3, 2).reshape(B, C, N * g)
    return _make(np.ascontiguousarray(out_data), [x], bwd)


def repeat_time(x, factor):
    """Duplicate every timestep of (B, C, T) ``factor`` times -> (B, C, T*factor)."""
    if x.data.ndim != 3:
        raise ShapeError("repeat_time expects (B, C, T)")
    B, C, T = x.data.shape
    factor = int(factor)
    if factor < 1:
        raise ShapeError("repeat_time: factor must be >= 1")

    def bwd(g):
        x.accumulate_grad(g.reshape(B, C, T, factor).sum(axis=3))

    return _make(np.repeat(x.data, factor, axis=2), [x], bwd)


def reflect_pad(x, left, right):
    """Reflect-pad a 1-D tensor (no edge repetition)."""
    if x.data.ndim != 1:
        raise ShapeError("reflect_pad expects a 1-D tensor")
    T = x.data.shape[0]
    if left >= T or right >= T:
        raise ShapeError(f"reflect_pad: pad ({left}, {right}) too large for length {T}")
    idx = np.pad(np.arange(T), (left, right), mode="reflect")

    def bwd(g):
        acc = np.zeros_like(x.data)
        np.add.at(acc, idx, g)
        x.accumulate_grad(acc)

    return _make(x.data[idx], [x], bwd)


def frame_signal(x, frame_len, hop, window=None):
    """Slice a 1-D tensor into overlapping frames (F, frame_len).

    Frame f covers x[f*hop : f*hop+frame_len]; an optional constant window
    (ndarray of length frame_len) is applied to every frame.
    """
    if x.data.ndim != 1:
        raise ShapeError("frame_signal expects a 1-D tensor")
    T = x.data.shape[0]
    frame_len = int(frame_len)
    hop = int(hop)
    if frame_len < 1 or hop < 1:
        raise ShapeError("frame_signal: frame_len and hop must be positive")
    if T < frame_len:
        raise ShapeError(f"frame_signal: signal length {T} shorter than frame {frame_len}")
    F = (T - frame_len) // hop + 1
    idx = np.arange(F)[:, None] * hop + np.arange(frame_len)[None, :]
    frames = x.data[idx]
    if window is not None:
        window = np.asarray(window, dtype=x.data.dtype)
        if window.shape != (frame_len,):
            raise ShapeError("frame_signal: window length must equal frame_len")
        frames = frames * window

    def bwd(g):
        if window is not None:
            g = g * window
        acc = np.zeros_like(x.data)
        np.add.at(acc, idx, g)
        x.accumulate_grad(acc)

    return _make(frames, [x], bwd)


# ---------------------------------------------------------------------------
# linear-algebra ops


def matmul(a, b):
    """2-D matrix product."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D tensors")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.data.shape} @ {b.data.shape}")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _make(a.data @ b.data, [a, b], bwd)


def channel_mix(x, w):
    """Apply a square channel-mixing matrix per timestep: out[b,:,t] = w @ x[b,:,t]."""
    if x.data.ndim != 3:
        raise ShapeError("channel_mix expects (B, C, T)")
    if w.data.ndim != 2 or w.data.shape[0] != w.data.shape[1]:
        raise ShapeError(f"channel_mix: weight must be square, got {w.data.shape}")
    if w.data.shape[1] != x.data.shape[1]:
        raise ShapeError(f"channel_mix: weight {w.data.shape} vs channels {x.data.shape[1]}")

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(np.matmul(w.data.T, g))
        if w.requires_grad:
            w.accumulate_grad(np.matmul(g, x.data.transpose(0, 2, 1)).sum(axis=0))

    return _make(np.matmul(w.data, x.data), [x, w], bwd)


def mat_inverse(w):
    """Matrix inverse with the standard reverse rule dW = -Y^T g Y^T."""
    if w.data.ndim != 2 or w.data.shape[0] != w.data.shape[1]:
        raise ShapeError("mat_inverse expects a square matrix")
    inv = np.linalg.inv(w.data)

    def bwd(g):
        w.accumulate_grad(-(inv.T @ g @ inv.T))

    return _make(inv, [w], bwd)


def log_abs_det(w):
    """log|det W| as a scalar tensor; gradient is (W^-1)^T."""
    if w.data.ndim != 2 or w.data.shape[0] != w.data.shape[1]:
        raise ShapeError("log_abs_det expects a square matrix")
    sign, logdet = np.linalg.slogdet(w.data)
    if sign == 0:
        from .errors import NumericError

        raise NumericError("log_abs_det: singular matrix")

    def bwd(g):
        w.accumulate_grad(np.asarray(g, dtype=w.data.dtype) * np.linalg.inv(w.data).T)

    return _make(np.asarray(logdet, dtype=w.data.dtype), [w], bwd)


def conv1d(x, w, bias=None, dilation=1, padding="same"):
    """Dilated 1-D cross-correlation.

    x: (B, C_in, T); w: (C_out, C_in, K); bias: (C_out,) or None.
    padding "same" zero-pads symmetrically (K must be odd); padding None is
    a valid convolution with T' = T - dilation*(K-1).
    """
    if x.data.ndim != 3:
        raise ShapeError("conv1d expects input (B, C_in, T)")
    if w.data.ndim != 3:
        raise ShapeError("conv1d expects weight (C_out, C_in, K)")
    B, Ci, T = x.data.shape
    Co, Ciw, K = w.data.shape
    if Ciw != Ci:
        raise ShapeError(f"conv1d: input channels {Ci} vs weight {Ciw}")
    if K < 1:
        raise ShapeError("conv1d: kernel must have K >= 1")
    dilation = int(dilation)
    if dilation < 1:
        raise ShapeError("conv1d: dilation must be >= 1")
    if bias is not None and bias.data.shape != (Co,):
        raise ShapeError(f"conv1d: bias shape {bias.data.shape} vs C_out {Co}")

    span = dilation * (K - 1)
    if padding == "same":
        if K % 2 == 0:
            raise ShapeError("conv1d: same padding requires an odd kernel")
        pad = span // 2
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad))) if pad else x.data
        T_out = T
    elif padding is None:
        pad = 0
        xp = x.data
        T_out = T - span
        if T_out < 1:
            raise ShapeError(f"conv1d: kernel span {span + 1} exceeds input length {T}")
    else:
        raise ShapeError(f"conv1d: unknown padding {padding!r}")

    out_data = np.zeros((B, Co, T_out), dtype=x.data.dtype)
    for k in range(K):
        lo = k * dilation
        out_data += np.matmul(w.data[:, :, k], xp[:, :, lo:lo + T_out])
    if bias is not None:
        out_data += bias.data[None, :, None]

    parents = [x, w] if bias is None else [x, w, bias]

    def bwd(g):
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for k in range(K):
                lo = k * dilation
                dxp[:, :, lo:lo + T_out] += np.matmul(w.data[:, :, k].T, g)
            x.accumulate_grad(dxp[:, :, pad:pad + T] if pad else dxp)
        if w.requires_grad:
            dw = np.empty_like(w.data)
            gt = g.transpose(0, 2, 1)
            for k in range(K):
                lo = k * dilation
                dw[:, :, k] = np.matmul(xp[:, :, lo:lo + T_out], gt).sum(axis=0).T
            w.accumulate_grad(dw)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2)))

    return _make(out_data, parents, bwd)


# ---------------------------------------------------------------------------
# backward driver


def backward(loss):
    """Populate .grad for every requires_grad tensor reachable from ``loss``."""
    tape = _active_tape()
    if tape is None:
        raise StateError("backward() requires an active tape")
    if not isinstance(loss, Tensor) or loss.data.ndim != 0:
        raise ShapeError("backward() expects a scalar tensor")
    if len(tape) == 0:
        raise StateError("backward() on an empty tape")
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(tape._nodes):
        node()


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of a scalar-valued f at x, same shape as x.

    Runs f with the tape disabled; f must be deterministic.
    """
    if h <= 0:
        raise ValueError("finite_diff_grad: h must be positive")
    base = np.array(x.data, copy=True)
    grad = np.zeros_like(base, dtype=np.float64)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    saved_tape = _active_tape()
    _state.tape = None
    try:
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(base.copy())).data)
            flat[i] = orig - h
            fm = float(f(Tensor(base.copy())).data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    finally:
        _state.tape = saved_tape
    return Tensor(grad)
