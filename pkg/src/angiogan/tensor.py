"""Tape-based reverse-mode autodiff over float32 numpy buffers.

Ops record a node on the innermost active :class:`Tape` whenever at least one
input requires a gradient. Outside a tape nothing is recorded, which is how
inference runs.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

DTYPE = np.float32

_TAPES: list["Tape"] = []
_DEBUG = False


def set_debug(flag: bool) -> None:
    """Enable the NaN/Inf check after every recorded or unrecorded op."""
    global _DEBUG
    _DEBUG = bool(flag)


def debug_enabled() -> bool:
    return _DEBUG


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Run the engine in another float dtype, e.g. float64 for finite-difference checks.

    Only tensors created inside the block use it.
    """
    global DTYPE
    prev, DTYPE = DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

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
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        if p == 2:
            return square(self)
        raise ValueError("only integer power 2 is supported")

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops; use as a context manager.

    Nodes are appended in creation order, which is already topological.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        """Accumulate dloss/dleaf into ``.grad`` of every reachable leaf."""
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owners: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            owners.pop(id(node.out), None)
            needs = tuple(t.requires_grad for t in node.inputs)
            in_grads = node.backward(g, needs)
            for t, need, gi in zip(node.inputs, needs, in_grads):
                if not need or gi is None:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    owners[key] = t
        for key, g in grads.items():
            t = owners[key]
            if not t.requires_grad:
                continue
            g = np.asarray(g, dtype=DTYPE).reshape(t.shape)
            t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def _finish(out_data: np.ndarray, inputs: Sequence[Tensor], bwd: Callable, name: str) -> Tensor:
    out = Tensor(out_data)
    if _DEBUG and not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"non-finite values produced by {name}")
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, tuple(inputs), bwd))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bwd(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    return _finish(a.data + b.data, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bwd(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(-g, sb) if needs[1] else None)

    return _finish(a.data - b.data, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        c = DTYPE(b)
        a = as_tensor(a)
        return _finish(a.data * c, (a,), lambda g, needs: (g * c,), "scale")
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bwd(g, needs):
        return (_unbroadcast(g * bd, ad.shape) if needs[0] else None,
                _unbroadcast(g * ad, bd.shape) if needs[1] else None)

    return _finish(ad * bd, (a, b), bwd, "mul")


def square(a: Tensor) -> Tensor:
    x = a.data
    return _finish(x * x, (a,), lambda g, needs: (2.0 * g * x,), "square")


def tabs(a: Tensor) -> Tensor:
    x = a.data
    return _finish(np.abs(x), (a,), lambda g, needs: (g * np.sign(x).astype(DTYPE),), "abs")


def relu(a: Tensor) -> Tensor:
    x = a.data
    mask = x > 0
    # NaN passes through so divergence stays visible to the loss checks
    return _finish(np.maximum(x, 0).astype(DTYPE), (a,), lambda g, needs: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    x = a.data
    scale = np.where(x >= 0, DTYPE(1.0), DTYPE(slope)).astype(DTYPE)
    return _finish(x * scale, (a,), lambda g, needs: (g * scale,), "leaky_relu")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _finish(y, (a,), lambda g, needs: (g * (1.0 - y * y),), "tanh")


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def bwd(g, needs):
        return (np.broadcast_to(g.reshape(kept), shape).astype(DTYPE),)

    return _finish(a.data.sum(axis=axes, dtype=DTYPE), (a,), bwd, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axis), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _finish(a.data.reshape(shape), (a,), lambda g, needs: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bwd(g, needs):
        return tuple(np.split(g, cuts, axis=axis))

    return _finish(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd, "concat")


# ---------------------------------------------------------------- convolution

def _check_conv_args(stride: int, dilation: int) -> None:
    if int(stride) < 1 or int(dilation) < 1:
        raise ValueError(f"stride and dilation must be positive, got {stride}, {dilation}")


def _im2col(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    if k == 1 and stride == 1:
        return xp.reshape(n, c, ho * wo)
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, k, k, ho, wo),
        strides=(sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
        writeable=False,
    )
    return view.reshape(n, c * k * k, ho * wo)


def _col2im(cols: np.ndarray, shape: tuple, k: int, stride: int, dilation: int, ho: int, wo: int):
    n, c, hp, wp = shape
    out = np.zeros(shape, dtype=DTYPE)
    cols = cols.reshape(n, c, k, k, ho, wo)
    for i in range(k):
        r0 = i * dilation
        for j in range(k):
            c0 = j * dilation
            out[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride] += cols[:, :, i, j]
    return out


def _out_size(size: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           dilation: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation, NCHW input and OIHW weight."""
    _check_conv_args(stride, dilation)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin or k != k2:
        raise ValueError(f"conv2d channel/kernel mismatch: input {x.shape}, weight {weight.shape}")
    extent = (k - 1) * dilation + 1
    if extent > h + 2 * padding or extent > w + 2 * padding:
        raise ValueError("kernel extent exceeds padded input")
    ho, wo = _out_size(h, k, stride, dilation, padding), _out_size(w, k, stride, dilation, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    xp = np.ascontiguousarray(xp)
    cols = _im2col(xp, k, stride, dilation, ho, wo)
    w2 = weight.data.reshape(cout, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1)
    out = out.reshape(n, cout, ho, wo)
    xp_shape = xp.shape
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g, needs):
        g2 = g.reshape(n, cout, ho * wo)
        gx = gw = gb = None
        if needs[0]:
            dcols = np.matmul(w2.T, g2)
            if k == 1 and stride == 1:
                gxp = dcols.reshape(xp_shape)
            else:
                gxp = _col2im(dcols, xp_shape, k, stride, dilation, ho, wo)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if needs[1]:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if bias is not None and needs[2]:
            gb = g2.sum(axis=(0, 2))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _finish(out, inputs, bwd, "conv2d")


def depthwise_conv2d(x: Tensor, weight: Tensor, stride: int = 1, dilation: int = 1,
                     padding: int = 0) -> Tensor:
    """One k x k filter per channel; weight shape (C, 1, k, k)."""
    _check_conv_args(stride, dilation)
    n, c, h, w = x.shape
    wc, one, k, _ = weight.shape
    if wc != c or one != 1:
        raise ValueError(f"depthwise weight {weight.shape} does not match {c} input channels")
    ho, wo = _out_size(h, k, stride, dilation, padding), _out_size(w, k, stride, dilation, padding)
    if ho < 1 or wo < 1:
        raise ValueError("kernel extent exceeds padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wd = weight.data[:, 0]
    out = np.zeros((n, c, ho, wo), dtype=DTYPE)
    taps = []
    for i in range(k):
        for j in range(k):
            r0, c0 = i * dilation, j * dilation
            sl = (slice(None), slice(None),
                  slice(r0, r0 + stride * (ho - 1) + 1, stride),
                  slice(c0, c0 + stride * (wo - 1) + 1, stride))
            taps.append(sl)
            out += xp[sl] * wd[:, i, j].reshape(1, c, 1, 1)
    xp_shape = xp.shape

    def bwd(g, needs):
        gx = gw = None
        if needs[0]:
            gxp = np.zeros(xp_shape, dtype=DTYPE)
            for t, sl in enumerate(taps):
                i, j = divmod(t, k)
                gxp[sl] += g * wd[:, i, j].reshape(1, c, 1, 1)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if needs[1]:
            gw = np.empty(weight.shape, dtype=DTYPE)
            for t, sl in enumerate(taps):
                i, j = divmod(t, k)
                gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[sl])
        return gx, gw

    return _finish(out, (x, weight), bwd, "depthwise_conv2d")


def separable_conv2d(x: Tensor, depthwise_weight: Tensor, pointwise_weight: Tensor,
                     stride: int = 1, dilation: int = 1, padding: int = 0,
                     bias: Optional[Tensor] = None) -> Tensor:
    if depthwise_weight.shape[0] != x.shape[1] or pointwise_weight.shape[1] != x.shape[1]:
        raise ValueError("separable conv channel mismatch")
    h = depthwise_conv2d(x, depthwise_weight, stride=stride, dilation=dilation, padding=padding)
    return conv2d(h, pointwise_weight, bias)


def transposed_conv2d(x: Tensor, weight: Tensor, stride: int = 2, padding: Optional[int] = None,
                      output_padding: Optional[int] = None, bias: Optional[Tensor] = None) -> Tensor:
    """Adjoint of :func:`conv2d`; weight shape (Cin, Cout, k, k).

    With ``output_padding=None`` the output is exactly ``stride`` times the input
    size; a ``ValueError`` is raised when the kernel/padding cannot give that.
    """
    _check_conv_args(stride, 1)
    n, cin, h, w = x.shape
    wcin, cout, k, _ = weight.shape
    if wcin != cin:
        raise ValueError(f"transposed conv weight {weight.shape} does not match {cin} input channels")
    if padding is None:
        padding = (k - 1) // 2
    if output_padding is None:
        output_padding = stride * h - ((h - 1) * stride - 2 * padding + k)
        if output_padding != stride * w - ((w - 1) * stride - 2 * padding + k):
            raise ValueError("cannot double non-square input with one output padding")
    if not 0 <= output_padding < stride:
        raise ValueError(f"k={k}, stride={stride}, padding={padding} cannot produce the requested size")
    ho = (h - 1) * stride - 2 * padding + k + output_padding
    wo = (w - 1) * stride - 2 * padding + k + output_padding
    if ho < 1 or wo < 1:
        raise ValueError("transposed conv output is empty")
    buf_shape = (n, cout, ho + 2 * padding, wo + 2 * padding)
    w2 = weight.data.reshape(cin, cout * k * k)
    x2 = x.data.reshape(n, cin, h * w)
    cols = np.matmul(w2.T, x2)
    buf = _col2im(cols, buf_shape, k, stride, 1, h, w)
    out = buf[:, :, padding:padding + ho, padding:padding + wo]
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g, needs):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        gcols = _im2col(np.ascontiguousarray(gp), k, stride, 1, h, w)
        gx = np.matmul(w2, gcols).reshape(x.shape) if needs[0] else None
        gw = np.tensordot(x2, gcols, axes=([0, 2], [0, 2])).reshape(weight.shape) if needs[1] else None
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=(0, 2, 3)) if needs[2] else None)

    return _finish(out, inputs, bwd, "transposed_conv2d")


# ---------------------------------------------------------------- normalization / spatial

class RunningStats:
    """Per-channel running mean/variance for batch-norm eval mode."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.mean = np.zeros(channels, dtype=DTYPE)
        self.var = np.ones(channels, dtype=DTYPE)
        self.momentum = momentum


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: Optional[RunningStats] = None,
               training: bool = True, eps: float = 1e-5, update_stats: bool = True) -> Tensor:
    n, c, h, w = x.shape
    m = n * h * w
    xd = x.data
    gd = gamma.data.reshape(1, c, 1, 1)
    if training:
        if m < 2:
            raise ValueError("batch_norm in train mode needs at least two values per channel")
        mu = xd.mean(axis=(0, 2, 3), dtype=DTYPE)
        var = xd.var(axis=(0, 2, 3), dtype=DTYPE)
        if state is not None and update_stats:
            mom = DTYPE(state.momentum)
            state.mean = ((1 - mom) * state.mean + mom * mu).astype(DTYPE)
            state.var = ((1 - mom) * state.var + mom * var * (m / (m - 1))).astype(DTYPE)
    else:
        if state is None:
            raise ValueError("eval-mode batch_norm requires running statistics")
        mu, var = state.mean, state.var
    inv = (1.0 / np.sqrt(var + DTYPE(eps))).astype(DTYPE).reshape(1, c, 1, 1)
    xhat = (xd - mu.reshape(1, c, 1, 1)) * inv
    out = xhat * gd + beta.data.reshape(1, c, 1, 1)

    def bwd(g, needs):
        gx = None
        if needs[0]:
            dxhat = g * gd
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (inv / m) * (m * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if needs[1] else None
        gbeta = g.sum(axis=(0, 2, 3)) if needs[2] else None
        return gx, ggamma, gbeta

    return _finish(out.astype(DTYPE), (x, gamma, beta), bwd, "batch_norm")


def reflection_pad(x: Tensor, pad: int) -> Tensor:
    """Mirror padding of the last two axes without repeating the edge pixel."""
    if pad == 0:
        return x
    h, w = x.shape[-2:]
    if pad < 0 or pad >= h or pad >= w:
        raise ValueError(f"reflection pad {pad} needs spatial size > pad, got {h}x{w}")
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(x.data, widths, mode="reflect")
    p = pad

    def bwd(g, needs):
        rows = g[..., p:p + h, :].copy()
        rows[..., 1:p + 1, :] += g[..., p - 1::-1, :][..., :p, :]
        rows[..., h - 1 - p:h - 1, :] += g[..., p + h:, :][..., ::-1, :]
        cols = rows[..., p:p + w].copy()
        cols[..., 1:p + 1] += rows[..., p - 1::-1][..., :p]
        cols[..., w - 1 - p:w - 1] += rows[..., p + w:][..., ::-1]
        return (cols,)

    return _finish(out, (x,), bwd, "reflection_pad")


def average_pool(x: Tensor, k: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if k < 1 or h % k or w % k:
        raise ValueError(f"average_pool: {h}x{w} not divisible by {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5), dtype=DTYPE)
    inv = DTYPE(1.0 / (k * k))

    def bwd(g, needs):
        gg = np.broadcast_to((g * inv)[:, :, :, None, :, None], (n, c, h // k, k, w // k, k))
        return (gg.reshape(n, c, h, w).astype(DTYPE),)

    return _finish(out, (x,), bwd, "average_pool")


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in tensors)
