"""Deterministic reverse-mode differentiation over dense tensors.

Exactly the op set the encoders and the contrastive loss need: convolutions
(1D/2D), group/instance normalization, affine layers, a fused GRU step loop,
and the reductions/pointwise ops that glue them together.  Every forward op
validates that its output is finite; training runs in float32, while the
``precision("float64")`` context switches newly created tensors to float64
for tight gradient verification.

Ops record onto the active :class:`Tape` (a plain ordered op list) only when
at least one input requires gradients.  ``backward(tape, loss)`` replays the
records once, in reverse, accumulating additively into ``Tensor.grad``.
"""

import math
from contextlib import contextmanager

import numpy as np

from terralign import kernels
from terralign.errors import (
    ConfigError,
    DegenerateInputError,
    DimensionError,
    NumericalError,
)

_DTYPE = np.float32
_ACTIVE_TAPE = None

# Ops with registered gradients; the per-op gradient sweep asserts it covers
# this list, so anything added here must grow a test as well.
REGISTERED_OPS = (
    "add",
    "sub",
    "mul",
    "scale",
    "exp",
    "relu",
    "sigmoid",
    "tanh",
    "matmul",
    "linear",
    "conv1d",
    "conv2d",
    "group_norm",
    "instance_norm",
    "mean_pool",
    "l2_normalize",
    "log_softmax",
    "take_diag",
    "concat",
    "slice_last",
    "reshape",
    "swap_last2",
    "pad_replicate",
    "sum_all",
    "mean_all",
    "gru_sequence",
)


def default_dtype():
    return _DTYPE


def set_precision(name):
    """Switch the dtype used for newly created tensors ('float32'/'float64')."""
    global _DTYPE
    if name not in ("float32", "float64"):
        raise ConfigError(f"unknown precision {name!r}")
    _DTYPE = np.float32 if name == "float32" else np.float64


@contextmanager
def precision(name):
    previous = "float32" if _DTYPE == np.float32 else "float64"
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


class Tensor:
    """Dense float array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=_DTYPE)
        # ascontiguousarray would promote 0-d scalars to 1-d
        self.data = np.ascontiguousarray(arr) if arr.ndim else arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"


class Tape:
    """Ordered record of executed ops; recording is active inside ``with``."""

    def __init__(self):
        self.ops = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self):
        return len(self.ops)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite_or_raise(arr, op_name):
    if arr.size and not np.isfinite(arr).all():
        raise NumericalError(f"{op_name} produced a non-finite value")


def _record(op_name, inputs, out_data, backward_fn):
    """Wrap op output in a Tensor; push a tape record if gradients flow."""
    _finite_or_raise(out_data, op_name)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    if _ACTIVE_TAPE is not None and out.requires_grad:
        _ACTIVE_TAPE.ops.append((out, backward_fn))
    return out


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.data)
    tensor.grad += grad


def backward(tape, loss):
    """Accumulate d(loss)/d(input) for every requires_grad tensor on the tape.

    Leaf gradients accumulate additively across calls; intermediate (op
    output) gradients are local to one pass and reset here.
    """
    if not isinstance(loss, Tensor):
        raise DimensionError("loss must be a Tensor")
    if loss.size != 1:
        raise DimensionError(f"loss must be scalar, got shape {loss.shape}")
    for out, _ in tape.ops:
        out.grad = None
    loss.grad = np.ones_like(loss.data)
    for out, backward_fn in reversed(tape.ops):
        if out.grad is None:
            continue
        backward_fn(out.grad)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# pointwise and structural ops
# ---------------------------------------------------------------------------


def _binary_shapes(a, b, op_name):
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise DimensionError(f"{op_name}: shapes {a.data.shape} and {b.data.shape} differ")


def _reduce_to(grad, tensor):
    if grad.shape == tensor.data.shape:
        return grad
    return np.sum(grad).reshape(tensor.data.shape).astype(grad.dtype)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")

    def back(g):
        _accumulate(a, _reduce_to(g, a))
        _accumulate(b, _reduce_to(g, b))

    return _record("add", (a, b), a.data + b.data, back)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")

    def back(g):
        _accumulate(a, _reduce_to(g, a))
        _accumulate(b, _reduce_to(-g, b))

    return _record("sub", (a, b), a.data - b.data, back)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")

    def back(g):
        _accumulate(a, _reduce_to(g * b.data, a))
        _accumulate(b, _reduce_to(g * a.data, b))

    return _record("mul", (a, b), a.data * b.data, back)


def scale(a, s):
    a = _as_tensor(a)
    s = float(s)

    def back(g):
        _accumulate(a, g * s)

    return _record("scale", (a,), a.data * s, back)


def exp(a):
    a = _as_tensor(a)
    with np.errstate(over="ignore"):  # overflow is caught by the finite guard
        out_data = np.exp(a.data)

    def back(g):
        _accumulate(a, g * out_data)

    return _record("exp", (a,), out_data, back)


def relu(a):
    a = _as_tensor(a)

    def back(g):
        _accumulate(a, g * (a.data > 0))

    return _record("relu", (a,), np.maximum(a.data, 0), back)


def sigmoid(a):
    a = _as_tensor(a)
    out_data = _sigmoid_array(a.data)

    def back(g):
        _accumulate(a, g * out_data * (1 - out_data))

    return _record("sigmoid", (a,), out_data, back)


def _sigmoid_array(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(a):
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def back(g):
        _accumulate(a, g * (1 - out_data * out_data))

    return _record("tanh", (a,), out_data, back)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def back(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _record("matmul", (a, b), a.data @ b.data, back)


def linear(x, w, b=None):
    """Affine map on row vectors: y = x @ w.T (+ b)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: x {x.shape} does not match w {w.shape}")
    out_data = x.data @ w.data.T
    inputs = (x, w)
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[0],):
            raise DimensionError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
        out_data = out_data + b.data
        inputs = (x, w, b)

    def back(g):
        _accumulate(x, g @ w.data)
        _accumulate(w, g.T @ x.data)
        if b is not None:
            _accumulate(b, g.sum(axis=0))

    return _record("linear", inputs, out_data, back)


def concat(parts, axis=-1):
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat of zero tensors")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(p, g[tuple(idx)])

    return _record("concat", tuple(parts), out_data, back)


def slice_last(x, start, stop):
    x = _as_tensor(x)
    out_data = np.ascontiguousarray(x.data[..., start:stop])

    def back(g):
        buf = np.zeros_like(x.data)
        buf[..., start:stop] = g
        _accumulate(x, buf)

    return _record("slice_last", (x,), out_data, back)


def reshape(x, shape):
    x = _as_tensor(x)
    out_data = x.data.reshape(shape)

    def back(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _record("reshape", (x,), np.ascontiguousarray(out_data), back)


def swap_last2(x):
    x = _as_tensor(x)
    if x.ndim < 2:
        raise DimensionError("swap_last2 needs at least 2 axes")
    out_data = np.ascontiguousarray(np.swapaxes(x.data, -1, -2))

    def back(g):
        _accumulate(x, np.swapaxes(g, -1, -2))

    return _record("swap_last2", (x,), out_data, back)


def pad_replicate(x, length):
    """Tile the last (time) axis until it reaches `length` frames exactly."""
    x = _as_tensor(x)
    t = x.shape[-1]
    if t == 0 or t > length:
        raise DimensionError(f"pad_replicate: cannot pad {t} frames to {length}")
    reps = -(-length // t)
    out_data = np.ascontiguousarray(np.tile(x.data, (1,) * (x.ndim - 1) + (reps,))[..., :length])

    def back(g):
        buf = np.zeros_like(x.data)
        for r in range(reps):
            chunk = g[..., r * t : (r + 1) * t]
            buf[..., : chunk.shape[-1]] += chunk
        _accumulate(x, buf)

    return _record("pad_replicate", (x,), out_data, back)


def sum_all(x):
    x = _as_tensor(x)

    def back(g):
        _accumulate(x, np.full_like(x.data, g))

    return _record("sum_all", (x,), np.asarray(x.data.sum(), dtype=x.data.dtype), back)


def mean_all(x):
    x = _as_tensor(x)
    inv = 1.0 / x.size

    def back(g):
        _accumulate(x, np.full_like(x.data, g * inv))

    return _record("mean_all", (x,), np.asarray(x.data.mean(), dtype=x.data.dtype), back)


def mean_pool(x):
    """Mean over the trailing time axis: (..., C, T) -> (..., C)."""
    x = _as_tensor(x)
    if x.ndim < 2:
        raise DimensionError("mean_pool needs a time axis")
    t = x.shape[-1]

    def back(g):
        _accumulate(x, np.repeat(g[..., None], t, axis=-1) / t)

    return _record("mean_pool", (x,), np.ascontiguousarray(x.data.mean(axis=-1)), back)


def l2_normalize(x):
    """Normalize the last axis to unit Euclidean norm."""
    x = _as_tensor(x)
    norms = np.sqrt(np.sum(x.data.astype(np.float64) ** 2, axis=-1, keepdims=True))
    if np.any(norms == 0.0):
        raise DegenerateInputError("l2_normalize: zero-norm vector")
    norms = norms.astype(x.data.dtype)
    out_data = x.data / norms

    def back(g):
        inner = np.sum(g * out_data, axis=-1, keepdims=True)
        _accumulate(x, (g - out_data * inner) / norms)

    return _record("l2_normalize", (x,), out_data, back)


def log_softmax(x, axis=-1):
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out_data = shifted - log_z
    probs = np.exp(out_data)

    def back(g):
        _accumulate(x, g - probs * g.sum(axis=axis, keepdims=True))

    return _record("log_softmax", (x,), out_data, back)


def take_diag(x):
    x = _as_tensor(x)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise DimensionError(f"take_diag: expected square matrix, got {x.shape}")

    def back(g):
        buf = np.zeros_like(x.data)
        np.fill_diagonal(buf, g)
        _accumulate(x, buf)

    return _record("take_diag", (x,), np.ascontiguousarray(np.diagonal(x.data)), back)


# ---------------------------------------------------------------------------
# convolutions and normalizations
# ---------------------------------------------------------------------------


def _conv_batch(x, expected_ndim, op_name):
    if x.ndim == expected_ndim - 1:
        return x.data[None], True
    if x.ndim == expected_ndim:
        return x.data, False
    raise DimensionError(f"{op_name}: expected {expected_ndim - 1}D or {expected_ndim}D input, got {x.ndim}D")


def conv1d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation over the time axis. x: (C_in, T) or (N, C_in, T)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if stride < 1:
        raise ConfigError("conv1d: stride must be >= 1")
    if w.ndim != 3:
        raise DimensionError(f"conv1d: kernel must be 3D, got {w.shape}")
    xb, squeeze = _conv_batch(x, 3, "conv1d")
    if xb.shape[1] != w.shape[1]:
        raise DimensionError(f"conv1d: {xb.shape[1]} input channels vs kernel {w.shape[1]}")
    t, k = xb.shape[2], w.shape[2]
    if t + 2 * padding < k:
        raise DimensionError(f"conv1d: length {t} + 2*{padding} shorter than kernel {k}")
    dtype = np.result_type(xb.dtype, w.data.dtype)
    xb = np.ascontiguousarray(xb, dtype=dtype)
    w_data = np.ascontiguousarray(w.data, dtype=dtype)
    xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding))) if padding else xb
    out_data = kernels.conv1d_forward(xp, w_data, stride)
    inputs = (x, w)
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[0],):
            raise DimensionError(f"conv1d: bias shape {b.shape} != ({w.shape[0]},)")
        out_data = out_data + b.data[None, :, None]
        inputs = (x, w, b)

    def back(g):
        g3 = g[None] if squeeze else g
        gx, gw = kernels.conv1d_backward(
            xp, w_data, np.ascontiguousarray(g3, dtype=dtype), stride
        )
        if padding:
            gx = gx[:, :, padding:-padding]
        _accumulate(x, gx[0] if squeeze else gx)
        _accumulate(w, gw)
        if b is not None:
            _accumulate(b, g3.sum(axis=(0, 2)))

    out_data = out_data[0] if squeeze else out_data
    return _record("conv1d", inputs, np.ascontiguousarray(out_data), back)


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation over two spatial axes. x: (C_in, H, W) or (N, C_in, H, W)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if stride < 1:
        raise ConfigError("conv2d: stride must be >= 1")
    if w.ndim != 4:
        raise DimensionError(f"conv2d: kernel must be 4D, got {w.shape}")
    xb, squeeze = _conv_batch(x, 4, "conv2d")
    if xb.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: {xb.shape[1]} input channels vs kernel {w.shape[1]}")
    h, wd = xb.shape[2], xb.shape[3]
    kh, kw = w.shape[2], w.shape[3]
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise DimensionError("conv2d: input smaller than kernel")
    dtype = np.result_type(xb.dtype, w.data.dtype)
    xb = np.ascontiguousarray(xb, dtype=dtype)
    w_data = np.ascontiguousarray(w.data, dtype=dtype)
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(xb, pad) if padding else xb
    out_data = kernels.conv2d_forward(xp, w_data, stride)
    inputs = (x, w)
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[0],):
            raise DimensionError(f"conv2d: bias shape {b.shape} != ({w.shape[0]},)")
        out_data = out_data + b.data[None, :, None, None]
        inputs = (x, w, b)

    def back(g):
        g4 = g[None] if squeeze else g
        gx, gw = kernels.conv2d_backward(
            xp, w_data, np.ascontiguousarray(g4, dtype=dtype), stride
        )
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        _accumulate(x, gx[0] if squeeze else gx)
        _accumulate(w, gw)
        if b is not None:
            _accumulate(b, g4.sum(axis=(0, 2, 3)))

    out_data = out_data[0] if squeeze else out_data
    return _record("conv2d", inputs, np.ascontiguousarray(out_data), back)


def group_norm(x, gamma, beta, groups, eps=1e-5):
    """Normalize channel groups to zero mean / unit variance, then apply affine.

    x: (C, T) single sample, or batched with a leading batch axis
    ((N, C, T) / (N, C, H, W)); gamma/beta: (C,).
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if eps <= 0:
        raise ConfigError("group_norm: eps must be positive")
    if x.ndim < 2:
        raise DimensionError("group_norm: input must have channel and time axes")
    squeeze = x.ndim == 2
    xb = x.data[None] if squeeze else x.data
    n, c = xb.shape[0], xb.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"group_norm: affine shape must be ({c},)")
    if c % groups != 0:
        raise ConfigError(f"group_norm: {c} channels not divisible by {groups} groups")
    spatial = int(np.prod(xb.shape[2:], dtype=np.int64))
    group_shape = (n, groups, (c // groups) * spatial)
    xg = xb.reshape(group_shape)
    mean = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = ((xg - mean) * inv_std).reshape(xb.shape)
    affine_shape = (1, c) + (1,) * (xb.ndim - 2)
    out_data = x_hat * gamma.data.reshape(affine_shape) + beta.data.reshape(affine_shape)

    def back(g):
        gb = g[None] if squeeze else g
        reduce_axes = (0,) + tuple(range(2, xb.ndim))
        _accumulate(gamma, (gb * x_hat).sum(axis=reduce_axes))
        _accumulate(beta, gb.sum(axis=reduce_axes))
        g_hat = (gb * gamma.data.reshape(affine_shape)).reshape(group_shape)
        xh = x_hat.reshape(group_shape)
        m1 = g_hat.mean(axis=-1, keepdims=True)
        m2 = (g_hat * xh).mean(axis=-1, keepdims=True)
        gx = (inv_std * (g_hat - m1 - xh * m2)).reshape(xb.shape)
        _accumulate(x, gx[0] if squeeze else gx)

    out_data = out_data[0] if squeeze else out_data
    return _record("group_norm", (x, gamma, beta), np.ascontiguousarray(out_data), back)


def instance_norm(x, eps=1e-5):
    """Per-channel zero-mean/unit-variance over the trailing axes (no affine)."""
    x = _as_tensor(x)
    if eps <= 0:
        raise ConfigError("instance_norm: eps must be positive")
    if x.ndim < 2:
        raise DimensionError("instance_norm: input must have channel and time axes")
    xb, squeeze = (x.data[None], True) if x.ndim == 2 else (x.data, False)
    if xb.ndim < 3:
        raise DimensionError("instance_norm: batched input must be (N, C, T)")
    n, c = xb.shape[0], xb.shape[1]
    spatial = int(np.prod(xb.shape[2:], dtype=np.int64))
    if spatial < 2:
        raise DimensionError("instance_norm: needs at least 2 samples per channel")
    flat = (n, c, spatial)
    xg = xb.reshape(flat)
    mean = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (xg - mean) * inv_std
    out_data = x_hat.reshape(xb.shape)

    def back(g):
        gb = (g[None] if squeeze else g).reshape(flat)
        m1 = gb.mean(axis=-1, keepdims=True)
        m2 = (gb * x_hat).mean(axis=-1, keepdims=True)
        gx = (inv_std * (gb - m1 - x_hat * m2)).reshape(xb.shape)
        _accumulate(x, gx[0] if squeeze else gx)

    out_data = out_data[0] if squeeze else out_data
    return _record("instance_norm", (x,), np.ascontiguousarray(out_data), back)


# ---------------------------------------------------------------------------
# fused GRU
# ---------------------------------------------------------------------------


def gru_sequence(x_seq, h0, w_ih, w_hh, b_ih, b_hh):
    """Run a GRU over (N, T, D) inputs from initial state (N, H).

    Returns the hidden states (N, T, H).  Gate layout along the 3H axis is
    [reset; update; candidate].  Implemented as one fused op: the whole
    BPTT loop runs inside the backward closure, which keeps tapes short.
    """
    x_seq, h0 = _as_tensor(x_seq), _as_tensor(h0)
    w_ih, w_hh = _as_tensor(w_ih), _as_tensor(w_hh)
    b_ih, b_hh = _as_tensor(b_ih), _as_tensor(b_hh)
    if x_seq.ndim != 3 or h0.ndim != 2:
        raise DimensionError("gru_sequence: x_seq must be (N, T, D), h0 (N, H)")
    n, t_len, d = x_seq.shape
    h_dim = h0.shape[1]
    if w_ih.shape != (3 * h_dim, d) or w_hh.shape != (3 * h_dim, h_dim):
        raise DimensionError("gru_sequence: weight shapes inconsistent with h0/x")
    if b_ih.shape != (3 * h_dim,) or b_hh.shape != (3 * h_dim,):
        raise DimensionError("gru_sequence: bias shapes inconsistent")

    gi_all = x_seq.data.reshape(n * t_len, d) @ w_ih.data.T + b_ih.data
    gi_all = gi_all.reshape(n, t_len, 3 * h_dim)
    dtype = np.result_type(x_seq.data.dtype, h0.data.dtype, w_hh.data.dtype)
    hs = np.empty((n, t_len, h_dim), dtype=dtype)
    cache = []
    h = h0.data
    for t in range(t_len):
        gh = h @ w_hh.data.T + b_hh.data
        gi = gi_all[:, t]
        r = _sigmoid_array(gi[:, :h_dim] + gh[:, :h_dim])
        z = _sigmoid_array(gi[:, h_dim : 2 * h_dim] + gh[:, h_dim : 2 * h_dim])
        ghn = gh[:, 2 * h_dim :]
        cand = np.tanh(gi[:, 2 * h_dim :] + r * ghn)
        h_new = (1 - z) * cand + z * h
        cache.append((h, r, z, cand, ghn))
        hs[:, t] = h_new
        h = h_new

    def back(g):
        dW_ih = np.zeros_like(w_ih.data)
        dW_hh = np.zeros_like(w_hh.data)
        db_ih = np.zeros_like(b_ih.data)
        db_hh = np.zeros_like(b_hh.data)
        dx = np.zeros_like(x_seq.data)
        dh = np.zeros((n, h_dim), dtype=g.dtype)
        for t in range(t_len - 1, -1, -1):
            h_prev, r, z, cand, ghn = cache[t]
            dh = dh + g[:, t]
            dz = dh * (h_prev - cand)
            dn = dh * (1 - z)
            dh_prev = dh * z
            dgn = dn * (1 - cand * cand)
            dghn = dgn * r
            dr = dgn * ghn
            dgr = dr * r * (1 - r)
            dgz = dz * z * (1 - z)
            dgi = np.concatenate([dgr, dgz, dgn], axis=1)
            dgh = np.concatenate([dgr, dgz, dghn], axis=1)
            x_t = x_seq.data[:, t]
            dW_ih += dgi.T @ x_t
            db_ih += dgi.sum(axis=0)
            dW_hh += dgh.T @ h_prev
            db_hh += dgh.sum(axis=0)
            dx[:, t] = dgi @ w_ih.data
            dh = dh_prev + dgh @ w_hh.data
        _accumulate(x_seq, dx)
        _accumulate(h0, dh)
        _accumulate(w_ih, dW_ih)
        _accumulate(w_hh, dW_hh)
        _accumulate(b_ih, db_ih)
        _accumulate(b_hh, db_hh)

    return _record("gru_sequence", (x_seq, h0, w_ih, w_hh, b_ih, b_hh), hs, back)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


def grad_check(fn, inputs, step=None):
    """Compare analytic gradients of a scalar function against central differences.

    ``fn`` takes one Tensor per entry of ``inputs`` (arrays) and returns a
    scalar Tensor.  The analytic gradient runs at the engine's current
    precision; the central-difference oracle always evaluates at float64 so
    that it stays sharper than what it is checking.  Returns max over all
    input coordinates of |analytic - fd| / max(1, |fd|).
    """
    if step is None:
        step = 1e-3 if _DTYPE == np.float32 else 1e-5
    if step <= 0:
        raise ConfigError("grad_check: step must be positive")
    arrays = [np.asarray(a, dtype=_DTYPE) for a in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*tensors)
    if out.size != 1:
        raise DimensionError("grad_check: function must be scalar-valued")
    backward(tape, out)
    analytic = [
        t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors
    ]

    arrays64 = [a.astype(np.float64) for a in arrays]

    def evaluate(arrs):
        with precision("float64"):
            return fn(*[Tensor(a) for a in arrs]).item()

    worst = 0.0
    for idx, base in enumerate(arrays64):
        flat = base.reshape(-1)
        grad_flat = analytic[idx].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            f_plus = evaluate(arrays64)
            flat[j] = orig - step
            f_minus = evaluate(arrays64)
            flat[j] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            err = abs(float(grad_flat[j]) - fd) / max(1.0, abs(fd))
            if err > worst:
                worst = err
    return worst


def he_uniform(rng, shape, fan_in):
    """Fan-in-scaled uniform init used for all weight tensors."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
