"""Dense N-D tensors with tape-based reverse-mode differentiation.

Only the operations the decoder stack needs are provided. Every op checks its
output for NaN/Inf and, when any input requires a gradient, appends a backward
closure to the active :class:`Tape`. :func:`backward` replays the tape in
reverse execution order.
"""

from __future__ import annotations

import contextlib
import functools
from typing import Callable, Iterator, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(ArithmeticError):
    """Raised when an op produces NaN or Inf."""


class TapeError(RuntimeError):
    """Raised on misuse of the gradient tape."""


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for newly created float tensors."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_leaf")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype.kind == "f" else _DEFAULT_DTYPE
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _scalar_error():
    raise DimensionError("item() requires a single-element tensor")


class Parameter(Tensor):
    """A trainable leaf tensor. Its name is assigned by the owning module."""

    __slots__ = ("name",)

    def __init__(self, data, dtype=None, name: str = ""):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name


class Buffer(Tensor):
    """Non-trainable persistent state (batch-norm running statistics)."""

    __slots__ = ()


class Tape:
    """Ordered record of executed differentiable ops."""

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], fn: Callable) -> None:
        self.entries.append((out, inputs, fn))

    def reset(self) -> None:
        self.entries = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.entries)


_TAPE = Tape()


def get_tape() -> Tape:
    return _TAPE


@contextlib.contextmanager
def use_tape(tape: Tape) -> Iterator[Tape]:
    global _TAPE
    prev = _TAPE
    _TAPE = tape
    try:
        yield tape
    finally:
        _TAPE = prev


def reset_tape() -> None:
    _TAPE.reset()


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(data: np.ndarray, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("operation produced NaN or Inf")
    out = Tensor.__new__(Tensor)
    out.data = data if data.flags.c_contiguous else np.ascontiguousarray(data)
    out.grad = None
    out._leaf = False
    track = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out.requires_grad = track
    if track:
        _TAPE.record(out, tuple(inputs), fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``."""
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _TAPE
    if tape.consumed:
        raise TapeError("backward already ran on this tape; reset it first")
    if not tape.entries or not loss.requires_grad:
        raise TapeError("loss is not connected to any recorded operation")
    loss.grad = np.ones_like(loss.data)
    for out, inputs, fn in reversed(tape.entries):
        g = out.grad
        if g is None:
            continue
        grads = fn(g)
        for t, gt in zip(inputs, grads):
            if gt is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.array(gt, dtype=t.dtype)
            else:
                t.grad = (t.grad + gt).astype(t.dtype, copy=False)
        if not out._leaf:
            out.grad = None
    tape.consumed = True


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), fn)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * x.dtype.type(c), (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum_(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} into {shape}") from exc
    return _result(out, (x,), lambda g: (g.reshape(src),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for {x.ndim}-d tensor")
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise DimensionError(f"concat extent mismatch: {[t.shape for t in tensors]}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, fn)


def split(x: Tensor, axis: int, parts) -> list[Tensor]:
    """Split along ``axis`` into ``parts`` equal pieces or pieces of the given sizes."""
    ax = axis % x.ndim
    n = x.shape[ax]
    if isinstance(parts, int):
        if parts < 1 or n % parts:
            raise DimensionError(f"extent {n} not divisible into {parts} parts")
        sizes = [n // parts] * parts
    else:
        sizes = [int(p) for p in parts]
        if sum(sizes) != n:
            raise DimensionError(f"split sizes {sizes} do not sum to {n}")
    out = []
    start = 0
    for size in sizes:
        out.append(_slice(x, ax, start, start + size))
        start += size
    return out


def _slice(x: Tensor, ax: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    shape, dtype = x.shape, x.dtype

    def fn(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _result(x.data[index].copy(), (x,), fn)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return _result(np.matmul(ad, bd), (a, b), fn)


def softmax_rows(m: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    if m.ndim == 0 or m.shape[-1] < 1:
        raise DimensionError("softmax needs a non-empty last axis")
    z = m.data - m.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (m,), fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    c = x.shape[-1]
    if c < 1 or gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def fn(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(-1, keepdims=True) - xhat * (gh * xhat).mean(-1, keepdims=True))
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, c).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, c).sum(axis=0)
        return gx, gg, gb

    return _result((xhat * gd + beta.data).astype(x.dtype), (x, gamma, beta), fn)


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation of an NCHW tensor.

    In training mode batch statistics over (N, H, W) are used and the running
    estimates are updated in place; in eval mode the running estimates are used.
    """
    if x.ndim != 4:
        raise DimensionError(f"batch_norm2d expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    bshape = (1, c, 1, 1)
    gd = gamma.data.reshape(bshape)
    if training:
        count = n * h * w
        if count < 2:
            raise DimensionError("batch_norm2d in train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        unbiased = var.reshape(c) * (count / (count - 1))
        running_mean.data = ((1 - momentum) * running_mean.data + momentum * mu.reshape(c)).astype(
            running_mean.dtype
        )
        running_var.data = ((1 - momentum) * running_var.data + momentum * unbiased).astype(
            running_var.dtype
        )

        def fn(g):
            gx = None
            if x.requires_grad:
                gh = g * gd
                gx = inv * (
                    gh
                    - gh.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gh * xhat).mean(axis=(0, 2, 3), keepdims=True)
                )
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    else:
        inv = 1.0 / np.sqrt(running_var.data.reshape(bshape) + eps)
        xhat = (x.data - running_mean.data.reshape(bshape)) * inv

        def fn(g):
            return g * gd * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = (xhat * gd + beta.data.reshape(bshape)).astype(x.dtype)
    return _result(out, (x, gamma, beta), fn)


# ---------------------------------------------------------------- spatial ops


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW input with an OCkk kernel."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != w.shape[3] or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: x {x.shape}, w {w.shape}")
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    if h + 2 * pad < k or wd + 2 * pad < k or ho < 1 or wo < 1:
        raise DimensionError(f"kernel {k} larger than padded input {h}x{wd} (pad {pad})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = w.data.reshape(o, c * k * k)
    out = (wmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data.reshape(1, o, 1, 1)
    inputs = (x, w) if b is None else (x, w, b)
    hp, wp = xp.shape[2:]

    def fn(g):
        gx = None
        if x.requires_grad:
            # input gradient = full correlation of the dilated output grad with the flipped kernel
            if stride > 1:
                gd = np.zeros((n, o, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=g.dtype)
                gd[:, :, ::stride, ::stride] = g
            else:
                gd = g
            extra_h = hp - (gd.shape[2] + k - 1)
            extra_w = wp - (gd.shape[3] + k - 1)
            gd = np.pad(gd, ((0, 0), (0, 0), (k - 1, k - 1 + extra_h), (k - 1, k - 1 + extra_w)))
            wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, o * k * k)
            gxp = (wflip @ _im2col(gd, k, 1, hp, wp)).reshape(c, n, hp, wp).transpose(1, 0, 2, 3)
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        gw = None
        if w.requires_grad:
            g2 = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
            gw = (g2 @ cols.T).reshape(w.shape)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(out, inputs, fn)


def transposed_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed convolution with kernel size equal to stride.

    ``w`` has layout (C_in, C_out, k, k), i.e. the layout of the forward conv
    whose adjoint this is.
    """
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"transposed_conv2d weight must be (Ci, Co, k, k), got {w.shape}")
    k = w.shape[2]
    if k != stride or k not in (2, 4):
        raise DimensionError(f"unsupported kernel/stride combination: kernel {k}, stride {stride}")
    if x.ndim != 4 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"transposed_conv2d shape mismatch: x {x.shape}, w {w.shape}")
    n, ci, h, wd = x.shape
    co = w.shape[1]
    out = np.einsum("nchw,coij->nohiwj", x.data, w.data, optimize=True).reshape(n, co, h * k, wd * k)
    if b is not None:
        out = out + b.data.reshape(1, co, 1, 1)
    inputs = (x, w) if b is None else (x, w, b)
    xd, wdat = x.data, w.data

    def fn(g):
        g6 = g.reshape(n, co, h, k, wd, k)
        gx = np.einsum("nohiwj,coij->nchw", g6, wdat, optimize=True) if x.requires_grad else None
        gw = np.einsum("nchw,nohiwj->coij", xd, g6, optimize=True) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(out, inputs, fn)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"avg_pool2d expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if k < 1 or h % k or w % k:
        raise DimensionError(f"spatial extent {h}x{w} not divisible by pool size {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
    inv = 1.0 / (k * k)

    def fn(g):
        g6 = np.broadcast_to(g[:, :, :, None, :, None] * inv, (n, c, h // k, k, w // k, k))
        return (g6.reshape(n, c, h, w),)

    return _result(out, (x,), fn)


@functools.lru_cache(maxsize=None)
def interp_matrix(n_in: int, factor: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation matrix (n_in*factor, n_in), half-pixel centres, clamped borders."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    u = np.zeros((n_out, n_in))
    np.add.at(u, (np.arange(n_out), i0), 1.0 - frac)
    np.add.at(u, (np.arange(n_out), i1), frac)
    u = u.astype(dtype)
    u.setflags(write=False)
    return u


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling of the last two axes by an integer factor."""
    if x.ndim < 2 or factor < 1:
        raise DimensionError(f"bilinear_upsample: bad input {x.shape} or factor {factor}")
    h, w = x.shape[-2:]
    uh = interp_matrix(h, factor, x.dtype.type)
    uw = interp_matrix(w, factor, x.dtype.type)
    out = np.matmul(uh, np.matmul(x.data, uw.T))
    return _result(out, (x,), lambda g: (np.matmul(uh.T, np.matmul(g, uw)),))


def bilinear_upsample2x(x: Tensor) -> Tensor:
    return bilinear_upsample(x, 2)


# ---------------------------------------------------------------- losses


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int | None = 255) -> Tensor:
    """Mean pixel cross-entropy of NKHW logits against NHW integer labels."""
    labels = np.asarray(labels)
    if logits.ndim != 4 or labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    valid = np.ones(labels.shape, bool) if ignore_index is None else labels != ignore_index
    if np.any(labels[valid] < 0) or np.any(labels[valid] >= k):
        raise DimensionError(f"label ids outside [0, {k}) for a {k}-class prediction")
    safe = np.where(valid, labels, 0)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = np.take_along_axis(z, safe[:, None], axis=1)[:, 0]
    count = int(valid.sum())
    if count == 0:
        return _result(np.zeros((), logits.dtype), (logits,), lambda g: (np.zeros_like(logits.data),))
    loss = np.asarray(((lse - picked) * valid).sum() / count, dtype=logits.dtype)

    def fn(g):
        p = np.exp(z - lse[:, None])
        np.put_along_axis(p, safe[:, None], np.take_along_axis(p, safe[:, None], axis=1) - 1.0, axis=1)
        return (p * (valid[:, None] * (g / count)),)

    return _result(loss, (logits,), fn)


def l1_loss(pred: Tensor, target, mask: np.ndarray | None = None) -> Tensor:
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise DimensionError(f"l1_loss: pred {pred.shape} vs target {target.shape}")
    m = np.ones(pred.shape, bool) if mask is None else np.broadcast_to(np.asarray(mask, bool), pred.shape)
    count = int(m.sum())
    if count == 0:
        return _result(np.zeros((), pred.dtype), (pred,), lambda g: (np.zeros_like(pred.data),))
    diff = pred.data - target
    loss = np.asarray((np.abs(diff) * m).sum() / count, dtype=pred.dtype)
    return _result(loss, (pred,), lambda g: (np.sign(diff) * m * (g / count),))


class Rng:
    """Counter-based deterministic random stream (Philox)."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.Philox(key=self.seed))

    def normal(self, shape, std: float = 1.0, dtype=None) -> np.ndarray:
        return (self.gen.standard_normal(shape) * std).astype(dtype or _DEFAULT_DTYPE)

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0):
        return self.gen.uniform(low, high, shape)

    def integers(self, low: int, high: int | None = None, size=None):
        return self.gen.integers(low, high, size)

    def child(self, index: int) -> "Rng":
        return Rng(int(np.random.SeedSequence([self.seed, index]).generate_state(1, np.uint64)[0]))
