"""Float64 tensors with a reverse-mode differentiation tape.

Every primitive computes its forward value eagerly with numpy. When a
:class:`Tape` is active and at least one input requires a gradient, the
primitive appends a record holding a closure that maps the output cotangent
to input cotangents. :func:`backward` walks the records in reverse.

Example::

    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum()
    grads = tape.gradient(loss, [x])   # [array([2., 4.])]
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
PAD_MODES = ("circular_x_reflect_y", "circular")


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class TapeError(RuntimeError):
    pass


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method sugar --------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape


@dataclass
class Record:
    op: str
    inputs: tuple[int, ...]
    output: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered list of primitive records. One tape per training step."""

    records: list[Record] = field(default_factory=list)
    _ids: dict[int, int] = field(default_factory=dict, repr=False)
    _tensors: list[Tensor] = field(default_factory=list, repr=False)

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def node_id(self, t: Tensor) -> int | None:
        return self._ids.get(id(t))

    def _register(self, t: Tensor) -> int:
        key = id(t)
        if key not in self._ids:
            self._ids[key] = len(self._tensors)
            # holding the reference keeps id() unique for the tape's lifetime
            self._tensors.append(t)
        return self._ids[key]

    def tensor(self, node: int) -> Tensor:
        return self._tensors[node]

    def gradient(self, loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
        grads = backward(self, loss)
        out = []
        for t in wrt:
            node = self.node_id(t)
            g = grads.get(node) if node is not None else None
            out.append(np.zeros_like(t.data) if g is None else g)
        return out


def _record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], bwd) -> Tensor:
    if not np.isfinite(out_data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        in_ids = tuple(tape._register(t) if t.requires_grad else -1 for t in inputs)
        out_id = tape._register(out)
        tape.records.append(Record(op, in_ids, out_id, bwd))
    return out


def custom_op(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], bwd) -> Tensor:
    """Register a user primitive; ``bwd(g)`` returns one cotangent per input."""
    return _record(op, np.asarray(out_data, dtype=DTYPE), list(inputs), bwd)


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(node) for every node on the tape.

    Discrete backprop: the gradient is exact for whatever sequence of
    primitives was executed, including unrolled solver steps.
    """
    if loss.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    root = tape.node_id(loss)
    grads: dict[int, np.ndarray] = {}
    if root is None:
        return grads
    grads[root] = np.ones_like(loss.data)
    prev_out = len(tape._tensors)
    for rec in reversed(tape.records):
        if rec.output >= prev_out or any(i >= rec.output for i in rec.inputs):
            raise TapeError(f"tape is not topologically ordered at op {rec.op}")
        prev_out = rec.output
        g = grads.pop(rec.output, None) if rec.output != root else grads.get(root)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for node, gi in zip(rec.inputs, in_grads):
            if node < 0 or gi is None:
                continue
            if node in grads:
                grads[node] = grads[node] + gi
            else:
                grads[node] = gi
    # leaves keep their gradients; intermediate entries were popped
    return grads


@contextlib.contextmanager
def no_tape():
    """Suspend recording (e.g. for evaluation inside a training step)."""
    if not hasattr(_local, "stack"):
        _local.stack = []
    _local.stack.append(None)
    try:
        yield
    finally:
        _local.stack.pop()


# ---------------------------------------------------------------------------
# elementwise and broadcasting primitives


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd

    def bwd(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _record("div", out, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise TypeError("power supports constant exponents only")
    p = float(exponent)
    ad = a.data
    return _record("pow", ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record("log", np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _record("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    pos = ad > 0
    em1 = np.expm1(np.minimum(ad, 0.0))
    out = np.where(pos, ad, alpha * em1)
    return _record("elu", out, (a,), lambda g: (g * np.where(pos, 1.0, alpha * (em1 + 1.0)),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)
    # d/dx log(1+e^x) = sigmoid(x)
    sig = np.exp(ad - out)
    return _record("softplus", out, (a,), lambda g: (g * sig,))


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "elu": elu,
    "relu": relu,
    "tanh": tanh,
    "softplus": softplus,
}


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", np.asarray(out), (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis=axes, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inv),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ValueError(f"broadcast: cannot broadcast {old} to {tuple(shape)}") from None
    return _record("broadcast", out, (a,), lambda g: (_unbroadcast(g, old),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.array(a.data[index], dtype=DTYPE)

    def bwd(g):
        full = np.zeros(shape, dtype=DTYPE)
        if _is_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _record("slice", out, (a,), bwd)


def _is_advanced(index) -> bool:
    idx = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray, Tensor)) for i in idx)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat: empty input")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ValueError(f"concat: shape mismatch {ts[0].shape} vs {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in ts], axis=ax)

    def bwd(g):
        sl = [slice(None)] * nd
        res = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[ax] = slice(lo, hi)
            res.append(g[tuple(sl)])
        return res

    return _record("concat", out, ts, bwd)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    nd = ts[0].ndim + 1
    return concat([reshape(t, np.expand_dims(t.data, axis % nd).shape) for t in ts], axis=axis)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul: operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record("matmul", out, (a, b), bwd)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax", out, (x,), bwd)


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


# ---------------------------------------------------------------------------
# spherical padding and convolution


def _pad_index(n: int, p: int, mode: str) -> np.ndarray:
    idx = np.arange(-p, n + p)
    if mode == "wrap":
        return idx % n
    if n == 1:
        return np.zeros_like(idx)
    # reflect without repeating the edge: -1 -> 1, n -> n-2
    period = 2 * (n - 1)
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def pad_indices(h: int, w: int, ph: int, pw: int, pad_mode: str) -> tuple[np.ndarray, np.ndarray]:
    if pad_mode not in PAD_MODES:
        raise ValueError(f"unknown pad_mode {pad_mode!r}")
    lat = "reflect" if pad_mode == "circular_x_reflect_y" else "wrap"
    return _pad_index(h, ph, lat), _pad_index(w, pw, "wrap")


def _fold(g: np.ndarray, idx: np.ndarray, n: int, axis: int) -> np.ndarray:
    """Adjoint of ``take(x, idx, axis)`` for a pad index ``[left | 0..n-1 | right]``."""
    p = (len(idx) - n) // 2
    g = np.moveaxis(g, axis, -1)
    out = g[..., p:p + n].copy()
    for j in (*range(p), *range(p + n, len(idx))):
        out[..., idx[j]] += g[..., j]
    return np.moveaxis(out, -1, axis)


def sphere_pad(x, ph: int, pw: int, pad_mode: str = "circular_x_reflect_y") -> Tensor:
    """Pad the two trailing axes: latitude (axis -2) and longitude (axis -1)."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    if ph >= h and pad_mode == "circular_x_reflect_y" and h > 1:
        raise ValueError(f"reflect padding {ph} needs more than {ph} rows, got {h}")
    ih, iw = pad_indices(h, w, ph, pw, pad_mode)
    out = np.take(np.take(x.data, ih, axis=-2), iw, axis=-1)

    def bwd(g):
        return (_fold(_fold(g, iw, w, -1), ih, h, -2),)

    return _record("sphere_pad", out, (x,), bwd)


def _out_size(n: int, stride: int) -> int:
    return -(-n // stride)


def conv2d(x, weight, bias=None, stride: int = 1,
           pad_mode: str = "circular_x_reflect_y") -> Tensor:
    """2-D cross-correlation on ``[Cin,H,W]`` or ``[N,Cin,H,W]`` inputs.

    Padding ``(k-1)/2`` is applied before striding: circular along longitude
    (last axis), reflective or circular along latitude. Output spatial size is
    ``ceil(H/stride), ceil(W/stride)``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 4:
        raise ValueError(f"conv2d: kernels must be [Cout,Cin,kh,kw], got {weight.shape}")
    cout, cin, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or xd.shape[1] != cin:
        raise ValueError(f"conv2d: input {x.shape} does not match kernels {weight.shape}")
    n, _, h, w = xd.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    ih, iw = pad_indices(h, w, ph, pw, pad_mode)
    if kh == 1 and kw == 1:
        xp = xd
    else:
        xp = np.take(np.take(xd, ih, axis=-2), iw, axis=-1)
    ho, wo = _out_size(h, stride), _out_size(w, stride)
    ck, npix = cin * kh * kw, ho * wo
    if kh == 1 and kw == 1 and stride == 1:
        cols = xd.reshape(n, ck, npix)
    else:
        # [N, Cin, Ho, Wo, kh, kw] -> [N, Cin*kh*kw, Ho*Wo]
        win = sliding_window_view(xp, (kh, kw), axis=(-2, -1))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, ck, npix)
    wmat = weight.data.reshape(cout, ck)
    out = (wmat @ cols).reshape(n, cout, ho, wo)
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(f"conv2d: bias must have shape ({cout},), got {bias.shape}")
        out = out + bias.data[None, :, None, None]
        inputs.append(bias)
    if squeeze:
        out = out[0]

    def bwd(g):
        gmat = (g[None] if squeeze else g).reshape(n, cout, npix)
        gw = None
        if weight.requires_grad:
            gw = (gmat @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = wmat.T @ gmat
            if kh == 1 and kw == 1 and stride == 1:
                gx = gcols.reshape(xd.shape)
            else:
                gcols = gcols.reshape(n, cin, kh, kw, ho, wo)
                gxp = np.zeros(xp.shape, dtype=DTYPE)
                for a in range(kh):
                    for b in range(kw):
                        gxp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += gcols[:, :, a, b]
                gx = gxp if kh == 1 and kw == 1 else _fold(_fold(gxp, iw, w, -1), ih, h, -2)
            if squeeze:
                gx = gx[0]
        res = [gx, gw]
        if bias is not None:
            res.append(g.sum(axis=(-2, -1)).reshape(-1, cout).sum(axis=0))
        return res

    return _record("conv2d", np.ascontiguousarray(out), inputs, bwd)
