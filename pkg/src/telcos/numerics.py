"""Dense NCHW tensors with a recording tape for reverse-mode gradients.

Every differentiable op is a pure function of numpy arrays.  When a
:class:`GradTape` is active and at least one input requires a gradient, the
op appends a record (inputs, output, forward closure, backward closure) to the
tape; :meth:`GradTape.backward` walks the records in reverse.

Convolutions have two accumulation strategies.  The default contracts with
BLAS; :func:`ordered_accumulation` switches to a fixed-order elementwise sum
over (input channel, kernel row, kernel column), which makes results
independent of how many other channels or filters exist.  Channel pruning
relies on that to remove dead channels without changing a single bit.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "GradTape",
    "NumericError",
    "backward",
    "conv2d",
    "depthwise_conv2d",
    "add_bias",
    "relu",
    "channel_split",
    "channel_slice",
    "channel_concat",
    "channel_shuffle",
    "channel_permute",
    "shuffle_permutation",
    "avg_pool2",
    "bilinear_upsample2",
    "softmax_channels",
    "log_softmax_channels",
    "logcosh",
    "matmul",
    "stripe_max",
    "sign_ste",
    "ordered_accumulation",
    "save_tensor",
    "load_tensor",
]


class NumericError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class Tensor:
    """An n-dimensional array, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return total(self)

    def mean(self):
        return mean(self)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# tape


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    forward: Callable[..., np.ndarray]
    backward: Callable[..., tuple]


_TAPES: list["GradTape"] = []


class GradTape:
    """Ordered record of differentiable ops; single writer.

    Use as a context manager around the forward computation, then call
    :meth:`backward` on a scalar result.
    """

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, params: Sequence[Tensor] | None = None) -> list[np.ndarray] | None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf.

        Returns the gradients of ``params`` (zeros for parameters the loss does
        not reach) when ``params`` is given.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(r.output) for r in self.records}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.backward(g, *[t.data for t in rec.inputs], rec.output.data)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.data.shape:
                    gi = _unbroadcast(gi, t.data.shape)
                key = id(t)
                if key in produced:
                    grads[key] = grads[key] + gi if key in grads else gi
                else:
                    t.grad = gi.astype(t.dtype, copy=False) if t.grad is None else t.grad + gi
        if params is None:
            return None
        return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    def replay(self) -> bool:
        """Re-run every recorded forward from its recorded inputs.

        True when every output is reproduced bit-for-bit.
        """
        for rec in self.records:
            again = rec.forward(*[t.data for t in rec.inputs])
            if not np.array_equal(again, rec.output.data):
                return False
        return True


def backward(tape: GradTape, loss: Tensor, params: Sequence[Tensor] | None = None):
    """Functional alias for :meth:`GradTape.backward`."""
    return tape.backward(loss, params)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        bad = int((~np.isfinite(arr)).sum())
        raise NumericError(f"{op}: produced {bad} non-finite value(s) in output of shape {arr.shape}")


def _apply(op: str, inputs: Sequence[Tensor], forward, backward_fn) -> Tensor:
    out = forward(*[t.data for t in inputs])
    _check_finite(op, out)
    needs = any(t.requires_grad for t in inputs)
    res = Tensor(out, requires_grad=needs)
    if needs and _TAPES:
        _TAPES[-1].records.append(Record(op, tuple(inputs), res, forward, backward_fn))
    return res


# ---------------------------------------------------------------------------
# accumulation mode

_ORDERED = [False]


@contextlib.contextmanager
def ordered_accumulation(enabled: bool = True) -> Iterator[None]:
    """Contract convolutions in a fixed elementwise order (slow, exact)."""
    prev = _ORDERED[0]
    _ORDERED[0] = enabled
    try:
        yield
    finally:
        _ORDERED[0] = prev


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a if isinstance(a, Tensor) else None)
    return _apply("add", (a, b), lambda x, y: x + y, lambda g, x, y, o: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a if isinstance(a, Tensor) else None)
    return _apply("sub", (a, b), lambda x, y: x - y, lambda g, x, y, o: (g, -g))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _apply("scale", (a,), lambda x: x * c, lambda g, x, o: (g * c,))
    return _apply("mul", (a, b), lambda x, y: x * y, lambda g, x, y, o: (g * y, g * x))


def total(a: Tensor) -> Tensor:
    return _apply("sum", (a,), lambda x: np.asarray(x.sum(), dtype=x.dtype),
                  lambda g, x, o: (np.broadcast_to(g, x.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _apply("mean", (a,), lambda x: np.asarray(x.sum() / n, dtype=x.dtype),
                  lambda g, x, o: (np.full_like(x, g / n),))


def relu(x: Tensor) -> Tensor:
    return _apply("relu", (x,), lambda a: np.maximum(a, 0), lambda g, a, o: (g * (a > 0),))


def _logcosh(d: np.ndarray) -> np.ndarray:
    ad = np.abs(d)
    small = ad < 1.0
    out = np.empty_like(d)
    s = np.sinh(0.5 * d[small])
    out[small] = np.log1p(2.0 * s * s)
    big = ad[~small]
    out[~small] = big + np.log1p(np.exp(-2.0 * big)) - np.log(2.0)
    return out


def logcosh(x: Tensor) -> Tensor:
    """Elementwise log(cosh(x)), accurate for tiny and huge arguments."""
    return _apply("logcosh", (x,), _logcosh, lambda g, a, o: (g * np.tanh(a),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return _apply("matmul", (a, b), lambda x, y: x @ y, lambda g, x, y, o: (g @ y.T, x.T @ g))


def sign_ste(x: Tensor) -> Tensor:
    """Heaviside bits (x >= 0) with a hard-tanh straight-through gradient."""
    return _apply("sign_ste", (x,), lambda a: (a >= 0).astype(a.dtype),
                  lambda g, a, o: (g * (np.abs(a) <= 1.0),))


# ---------------------------------------------------------------------------
# convolutions


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_out(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    kh, kw = w.shape[2:]
    xp = _pad(x, padding)
    if _ORDERED[0]:
        n = x.shape[0]
        ho = _conv_out(x.shape[2], kh, stride, padding)
        wo = _conv_out(x.shape[3], kw, stride, padding)
        out = np.zeros((n, w.shape[0], ho, wo), dtype=np.result_type(x, w))
        for c in range(w.shape[1]):
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, c : c + 1, i : i + stride * ho : stride, j : j + stride * wo : stride]
                    out += w[None, :, c, i, j, None, None] * patch
        return out
    win = _windows(xp, kh, kw, stride)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an (N, C, H, W) input with an (O, C, kh, kw) kernel."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    if kernel.shape[1] != x.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input {x.shape} has {x.shape[1]} channels, "
            f"kernel {kernel.shape} expects {kernel.shape[1]}"
        )
    if stride not in (1, 2):
        raise ValueError(f"conv2d stride must be 1 or 2, got {stride}")
    kh, kw = kernel.shape[2:]
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise ValueError(f"conv2d kernel {kernel.shape} larger than padded input {x.shape}")

    def fwd(a, w):
        return _conv_forward(a, w, stride, padding)

    def bwd(g, a, w, out):
        ap = _pad(a, padding)
        win = _windows(ap, kh, kw, stride)
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(g, w, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
        ho, wo = g.shape[2:]
        gp = np.zeros_like(ap)
        for i in range(kh):
            for j in range(kw):
                gp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[..., i, j].transpose(0, 3, 1, 2)
        h, wd = a.shape[2:]
        return gp[:, :, padding : padding + h, padding : padding + wd], gw

    return _apply("conv2d", (x, kernel), fwd, bwd)


def depthwise_conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel convolution with a (C, 1, kh, kw) kernel."""
    if kernel.data.ndim != 4 or kernel.shape[1] != 1 or kernel.shape[0] != x.shape[1]:
        raise ValueError(
            f"depthwise_conv2d needs one kernel plane per channel: input {x.shape}, kernel {kernel.shape}"
        )
    if stride not in (1, 2):
        raise ValueError(f"depthwise_conv2d stride must be 1 or 2, got {stride}")
    kh, kw = kernel.shape[2:]

    def fwd(a, w):
        ap = _pad(a, padding)
        ho = _conv_out(a.shape[2], kh, stride, padding)
        wo = _conv_out(a.shape[3], kw, stride, padding)
        out = np.zeros((a.shape[0], a.shape[1], ho, wo), dtype=np.result_type(a, w))
        for i in range(kh):
            for j in range(kw):
                out += w[None, :, 0, i, j, None, None] * ap[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
        return out

    def bwd(g, a, w, out):
        ap = _pad(a, padding)
        ho, wo = g.shape[2:]
        gp = np.zeros_like(ap)
        gw = np.zeros_like(w)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
                gw[:, 0, i, j] = (g * ap[sl]).sum(axis=(0, 2, 3))
                gp[sl] += g * w[None, :, 0, i, j, None, None]
        h, wd = a.shape[2:]
        return gp[:, :, padding : padding + h, padding : padding + wd], gw

    return _apply("depthwise_conv2d", (x, kernel), fwd, bwd)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias of shape (C,) to an (N, C, ...) tensor."""
    if bias.data.ndim != 1 or bias.shape[0] != x.shape[1]:
        raise ValueError(f"bias {bias.shape} does not match channels of {x.shape}")
    extra = (None,) * (x.data.ndim - 2)
    axes = (0,) + tuple(range(2, x.data.ndim))

    def fwd(a, b):
        return a + b[(None, slice(None)) + extra]

    return _apply("add_bias", (x, bias), fwd, lambda g, a, b, o: (g, g.sum(axis=axes)))


# ---------------------------------------------------------------------------
# channel plumbing


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[1]:
        raise ValueError(f"channel slice [{start}:{stop}] out of range for {x.shape}")

    def bwd(g, a, o):
        ga = np.zeros_like(a)
        ga[:, start:stop] = g
        return (ga,)

    return _apply("channel_slice", (x,), lambda a: a[:, start:stop].copy(), bwd)


def channel_split(x: Tensor) -> tuple[Tensor, Tensor]:
    c = x.shape[1]
    if c % 2:
        raise ValueError(f"channel_split needs an even channel count, got {c} in {x.shape}")
    return channel_slice(x, 0, c // 2), channel_slice(x, c // 2, c)


def channel_concat(*xs: Tensor) -> Tensor:
    if len(xs) == 1 and isinstance(xs[0], (list, tuple)):
        xs = tuple(xs[0])
    spatial = {t.shape[:1] + t.shape[2:] for t in xs}
    if len(spatial) != 1:
        raise ValueError(f"channel_concat shape mismatch: {[t.shape for t in xs]}")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def bwd(g, *args):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return _apply("channel_concat", xs, lambda *a: np.concatenate(a, axis=1), bwd)


def shuffle_permutation(channels: int, groups: int) -> np.ndarray:
    """Source index for each output channel of a channel shuffle.

    Input channel g*n + c (group g, position c) lands at output c*groups + g.
    """
    if groups < 1 or channels % groups:
        raise ValueError(f"cannot shuffle {channels} channels in {groups} groups")
    n = channels // groups
    return np.arange(channels).reshape(groups, n).T.reshape(-1)


def channel_permute(x: Tensor, perm: Sequence[int]) -> Tensor:
    """Output channel i is input channel ``perm[i]``."""
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(x.shape[1])):
        raise ValueError(f"permutation of length {len(perm)} is not a bijection on {x.shape[1]} channels")
    inv = np.argsort(perm)
    return _apply("channel_permute", (x,), lambda a: a[:, perm], lambda g, a, o: (g[:, inv],))


def channel_shuffle(x: Tensor, groups: int = 2) -> Tensor:
    return channel_permute(x, shuffle_permutation(x.shape[1], groups))


# ---------------------------------------------------------------------------
# resampling


def _replicate_even(a: np.ndarray) -> np.ndarray:
    h, w = a.shape[-2:]
    if h % 2:
        a = np.concatenate([a, a[..., -1:, :]], axis=-2)
    if w % 2:
        a = np.concatenate([a, a[..., :, -1:]], axis=-1)
    return a


def _pool_array(a: np.ndarray) -> np.ndarray:
    a = _replicate_even(a)
    return 0.25 * (a[..., 0::2, 0::2] + a[..., 0::2, 1::2] + a[..., 1::2, 0::2] + a[..., 1::2, 1::2])


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 mean pooling with stride 2; odd extents replicate the last row/column."""

    def bwd(g, a, o):
        h, w = a.shape[-2:]
        q = 0.25 * g
        big = np.repeat(np.repeat(q, 2, axis=-2), 2, axis=-1)
        if h % 2:
            big[..., h - 1, :] += big[..., h, :]
            big = big[..., :h, :]
        if w % 2:
            big[..., :, w - 1] += big[..., :, w]
            big = big[..., :, :w]
        return (big,)

    return _apply("avg_pool2", (x,), _pool_array, bwd)


def _up1d(a: np.ndarray, axis: int) -> np.ndarray:
    a = np.moveaxis(a, axis, -1)
    prev = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    nxt = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out = np.empty(a.shape[:-1] + (2 * a.shape[-1],), dtype=a.dtype)
    out[..., 0::2] = a + 0.25 * (prev - a)
    out[..., 1::2] = a + 0.25 * (nxt - a)
    return np.moveaxis(out, -1, axis)


def _up1d_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    out = 0.75 * (ge + go)
    out[..., :-1] += 0.25 * ge[..., 1:]
    out[..., 0] += 0.25 * ge[..., 0]
    out[..., 1:] += 0.25 * go[..., :-1]
    out[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(out, -1, axis)


def bilinear_upsample2(x: Tensor) -> Tensor:
    """Bilinear x2 upsampling, half-pixel centres (align_corners=False)."""
    return _apply(
        "bilinear_upsample2",
        (x,),
        lambda a: _up1d(_up1d(a, -2), -1),
        lambda g, a, o: (_up1d_adjoint(_up1d_adjoint(g, -1), -2),),
    )


# ---------------------------------------------------------------------------
# softmax family


def _softmax(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels(x: Tensor) -> Tensor:
    def bwd(g, a, p):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _apply("softmax_channels", (x,), _softmax, bwd)


def log_softmax_channels(x: Tensor) -> Tensor:
    def fwd(a):
        z = a - a.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def bwd(g, a, out):
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

    return _apply("log_softmax_channels", (x,), fwd, bwd)


# ---------------------------------------------------------------------------
# pooling over horizontal stripes


def stripe_max(x: Tensor, n_stripes: int) -> Tensor:
    """Max over each of ``n_stripes`` horizontal stripes: (N, C, H, W) -> (N, n_stripes * C).

    Heights not divisible by ``n_stripes`` are padded by replicating the last row.
    The output is stripe-major: slot ``s * C + c`` holds stripe s, channel c.
    """
    n, c, h, w = x.shape
    rows = -(-h // n_stripes)
    pad = rows * n_stripes - h

    def fwd(a):
        if pad:
            a = np.concatenate([a, np.repeat(a[:, :, -1:], pad, axis=2)], axis=2)
        s = a.reshape(n, c, n_stripes, rows * w).max(axis=3)
        return np.ascontiguousarray(s.transpose(0, 2, 1)).reshape(n, n_stripes * c)

    def bwd(g, a, o):
        if pad:
            a2 = np.concatenate([a, np.repeat(a[:, :, -1:], pad, axis=2)], axis=2)
        else:
            a2 = a
        blk = a2.reshape(n, c, n_stripes, rows * w)
        idx = blk.argmax(axis=3)
        gb = np.zeros_like(blk)
        gs = g.reshape(n, n_stripes, c).transpose(0, 2, 1)
        np.put_along_axis(gb, idx[..., None], gs[..., None], axis=3)
        ga = gb.reshape(n, c, rows * n_stripes, w)
        if pad:
            ga[:, :, h - 1] += ga[:, :, h:].sum(axis=2)
            ga = ga[:, :, :h]
        return (ga,)

    return _apply("stripe_max", (x,), fwd, bwd)


# ---------------------------------------------------------------------------
# raw dump format: b"TLCT", u32 rank, u32 extents..., float64 little-endian data

_DUMP_MAGIC = b"TLCT"


def save_tensor(path, arr) -> None:
    a = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_DUMP_MAGIC)
        fh.write(struct.pack("<I", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
        fh.write(np.ascontiguousarray(a).tobytes())


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _DUMP_MAGIC:
        raise ValueError(f"{path}: not a tensor dump (bad magic {raw[:4]!r})")
    (rank,) = struct.unpack_from("<I", raw, 4)
    shape = struct.unpack_from(f"<{rank}I", raw, 8)
    off = 8 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(raw) - off != 8 * count:
        raise ValueError(f"{path}: expected {count} float64 values, found {(len(raw) - off) / 8:g}")
    return np.frombuffer(raw, dtype="<f8", offset=off).reshape(shape).copy()
