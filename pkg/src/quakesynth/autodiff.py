"""Reverse-mode automatic differentiation on dense numpy arrays.

A taped graph of primitive ops built on numpy storage. Real tensors carry
real gradients; complex tensors (spectral data) carry complex gradients in
the paired-real convention grad = dL/dRe + i*dL/dIm, which makes the FFT
adjoint rules exact without Wirtinger bookkeeping.

Every forward op validates that its result is finite: NaN/Inf raise
NumericError immediately instead of propagating silently.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import NumericError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(arr, op):
    # single-pass scalar reduction: any NaN/Inf propagates into the sum
    if not np.isfinite(arr.sum()):
        raise NumericError(f"non-finite values produced by op '{op}'")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype == np.float16:
            arr = arr.astype(np.float32)
        elif arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # -- basic introspection ------------------------------------------------
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
        return self.data.item()

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- graph --------------------------------------------------------------
    def _accumulate(self, g):
        g = np.asarray(g)
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        if np.iscomplexobj(g) and not np.iscomplexobj(self.grad):
            g = g.real
        self.grad = self.grad + g

    def backward(self):
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        if self._backward is None and not self.requires_grad:
            raise ValueError("backward on a detached tensor (no recorded graph)")
        if not np.all(np.isfinite(self.data)):
            raise NumericError("backward on a non-finite loss")
        topo, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            # consume the graph; gradients stay on the leaves
            node._parents = ()
            node._backward = None
            if not node.requires_grad:
                node.grad = None

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_ensure(other), -1.0))

    def __rsub__(self, other):
        return add(_ensure(other), mul(self, -1.0))

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)

    # convenience method forms
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _ensure(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _make(data, parents, backward, op):
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad or p._backward is not None
                             for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _binary_shapes(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = _ensure(a), _ensure(b)
    _binary_shapes(a, b, "add")

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return _make(a.data + b.data, (a, b), backward, "add")


def mul(a, b):
    a, b = _ensure(a), _ensure(b)
    _binary_shapes(a, b, "mul")

    def backward(g):
        if np.iscomplexobj(a.data) or np.iscomplexobj(b.data):
            a._accumulate(g * np.conj(b.data))
            b._accumulate(g * np.conj(a.data))
        else:
            a._accumulate(g * b.data)
            b._accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = _ensure(a), _ensure(b)
    _binary_shapes(a, b, "div")

    def backward(g):
        a._accumulate(g / b.data)
        b._accumulate(-g * a.data / (b.data * b.data))

    return _make(a.data / b.data, (a, b), backward, "div")


def sqrt(x):
    x = _ensure(x)
    out_data = np.sqrt(x.data)

    def backward(g):
        x._accumulate(g * 0.5 / out_data)

    return _make(out_data, (x,), backward, "sqrt")


def exp(x):
    x = _ensure(x)
    out_data = np.exp(x.data)

    def backward(g):
        x._accumulate(g * out_data)

    return _make(out_data, (x,), backward, "exp")


def tanh(x):
    x = _ensure(x)
    out_data = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, (x,), backward, "tanh")


def relu(x):
    x = _ensure(x)

    def backward(g):
        x._accumulate(g * (x.data > 0))

    return _make(np.maximum(x.data, 0), (x,), backward, "relu")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x):
    """GELU, tanh approximation (analytic derivative, framework-free)."""
    x = _ensure(x)
    xv = x.data
    inner = _GELU_C * (xv + 0.044715 * (xv * xv * xv))
    t = np.tanh(inner)
    out_data = 0.5 * xv * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xv * xv)
        dx = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * dinner
        x._accumulate(g * dx)

    return _make(out_data, (x,), backward, "gelu")


# -- reductions ---------------------------------------------------------------

def tsum(x, axis=None, keepdims=False):
    x = _ensure(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            for ax in sorted(a % x.data.ndim for a in axes):
                gg = np.expand_dims(gg, ax)
        x._accumulate(np.broadcast_to(gg, x.data.shape))

    return _make(np.asarray(out_data), (x,), backward, "sum")


def tmean(x, axis=None, keepdims=False):
    x = _ensure(x)
    n = x.data.size if axis is None else (
        np.prod([x.data.shape[a] for a in
                 ((axis,) if isinstance(axis, int) else axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


# -- shape manipulation -------------------------------------------------------

def reshape(x, shape):
    x = _ensure(x)

    def backward(g):
        x._accumulate(np.asarray(g).reshape(x.data.shape))

    return _make(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x, axes=None):
    x = _ensure(x)
    out_data = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        x._accumulate(np.transpose(np.asarray(g), inv))

    return _make(out_data, (x,), backward, "transpose")


def tslice(x, key):
    x = _ensure(x)
    out_data = x.data[key]

    def backward(g):
        full = np.zeros_like(x.data)
        full[key] = g
        x._accumulate(full)

    return _make(np.ascontiguousarray(out_data), (x,), backward, "slice")


def gather_rows(x, indices):
    """Per-batch gather along axis 1: out[b, j] = x[b, indices[b, j]]."""
    x = _ensure(x)
    indices = np.asarray(indices)
    batch = np.arange(x.data.shape[0])[:, None]
    out_data = x.data[batch, indices]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (batch, indices), np.asarray(g))
        x._accumulate(full)

    return _make(np.ascontiguousarray(out_data), (x,), backward, "gather")


def concat(tensors, axis=0):
    tensors = [_ensure(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        g = np.asarray(g)
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accumulate(g[tuple(idx)])

    return _make(out_data, tuple(tensors), backward, "concat")


def pad_axis(x, axis, before, after):
    """Zero-pad along one axis."""
    x = _ensure(x)
    widths = [(0, 0)] * x.data.ndim
    widths[axis] = (before, after)
    out_data = np.pad(x.data, widths)

    def backward(g):
        idx = [slice(None)] * x.data.ndim
        idx[axis] = slice(before, before + x.data.shape[axis])
        x._accumulate(np.asarray(g)[tuple(idx)])

    return _make(out_data, (x,), backward, "pad")


def broadcast_to(x, shape):
    x = _ensure(x)

    def backward(g):
        x._accumulate(_unbroadcast(np.asarray(g), x.data.shape))

    return _make(np.ascontiguousarray(np.broadcast_to(x.data, shape)),
                 (x,), backward, "broadcast")


def repeat_interleave(x, repeats, axis):
    """Nearest-neighbour upsampling along one axis."""
    x = _ensure(x)
    out_data = np.repeat(x.data, repeats, axis=axis)

    def backward(g):
        g = np.asarray(g)
        shp = list(x.data.shape)
        shp[axis:axis + 1] = [x.data.shape[axis], repeats]
        x._accumulate(g.reshape(shp).sum(axis=axis + 1))

    return _make(out_data, (x,), backward, "repeat")


# -- contractions -------------------------------------------------------------

def matmul(a, b):
    a, b = _ensure(a), _ensure(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        g = np.asarray(g)
        bd, ad = b.data, a.data
        if bd.ndim == 1:
            a._accumulate(np.outer(g, bd) if ad.ndim == 2 else g * bd)
            b._accumulate(ad.T @ g if ad.ndim == 2 else g * ad)
        else:
            a._accumulate(g @ np.swapaxes(bd, -1, -2))
            b._accumulate(np.swapaxes(ad, -1, -2) @ g)

    return _make(out_data, (a, b), backward, "matmul")


def channel_linear(x, w, b=None):
    """Pointwise linear over the channel axis: x[B,C,...] -> [B,O,...]."""
    x, w = _ensure(x), _ensure(w)
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"channel_linear: x channels {x.shape} vs weight {w.shape}")
    spatial = x.shape[2:]
    xf = np.ascontiguousarray(x.data.reshape(x.shape[0], x.shape[1], -1))
    out_data = np.matmul(w.data, xf).reshape((x.shape[0], w.shape[0]) + spatial)
    parents = [x, w]

    def backward(g):
        gf = np.ascontiguousarray(
            np.asarray(g).reshape(x.shape[0], w.shape[0], -1))
        x._accumulate(np.matmul(w.data.T, gf).reshape(x.shape))
        w._accumulate(np.matmul(gf, xf.transpose(0, 2, 1)).sum(axis=0))
        if b is not None:
            b._accumulate(g.sum(axis=tuple(i for i in range(g.ndim) if i != 1)))

    if b is not None:
        bt = _ensure(b)
        parents.append(bt)
        out_data = out_data + bt.data.reshape((1, -1) + (1,) * (out_data.ndim - 2))
        b = bt
    return _make(out_data, tuple(parents), backward, "channel_linear")


def conv1d(x, w, b=None, stride=1, padding=0):
    """1D convolution, x[B,C,L], w[O,C,K] -> [B,O,Lout]."""
    x, w = _ensure(x), _ensure(w)
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: x channels {x.shape} vs weight {w.shape}")
    B, C, L = x.shape
    O, _, K = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    Lp = xp.shape[-1]
    Lout = (Lp - K) // stride + 1
    cols = np.lib.stride_tricks.sliding_window_view(xp, K, axis=2)[:, :, ::stride]
    out_data = np.einsum("bclk,ock->bol", cols, w.data, optimize=True)
    parents = [x, w]

    def backward(g):
        g = np.asarray(g)
        w._accumulate(np.einsum("bol,bclk->ock", g, cols, optimize=True))
        dcols = np.einsum("bol,ock->bclk", g, w.data, optimize=True)
        dxp = np.zeros_like(xp)
        for k in range(K):
            dxp[:, :, k:k + stride * Lout:stride] += dcols[:, :, :, k]
        x._accumulate(dxp[:, :, padding:padding + L] if padding else dxp)
        if b is not None:
            b._accumulate(g.sum(axis=(0, 2)))

    if b is not None:
        bt = _ensure(b)
        parents.append(bt)
        out_data = out_data + bt.data.reshape(1, -1, 1)
        b = bt
    return _make(out_data, tuple(parents), backward, "conv1d")


def conv2d(x, w, b=None, stride=1, padding=0):
    """2D convolution, x[B,C,H,W], w[O,C,KH,KW] -> [B,O,Hout,Wout]."""
    x, w = _ensure(x), _ensure(w)
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: x channels {x.shape} vs weight {w.shape}")
    B, C, H, W = x.shape
    O, _, KH, KW = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Hout = (xp.shape[2] - KH) // stride + 1
    Wout = (xp.shape[3] - KW) // stride + 1
    cols = np.lib.stride_tricks.sliding_window_view(xp, (KH, KW), axis=(2, 3))
    cols = cols[:, :, ::stride, ::stride]
    out_data = np.einsum("bchwij,ocij->bohw", cols, w.data, optimize=True)
    parents = [x, w]

    def backward(g):
        g = np.asarray(g)
        w._accumulate(np.einsum("bohw,bchwij->ocij", g, cols, optimize=True))
        dcols = np.einsum("bohw,ocij->bchwij", g, w.data, optimize=True)
        dxp = np.zeros_like(xp)
        for i in range(KH):
            for j in range(KW):
                dxp[:, :, i:i + stride * Hout:stride,
                    j:j + stride * Wout:stride] += dcols[:, :, :, :, i, j]
        if padding:
            dxp = dxp[:, :, padding:padding + H, padding:padding + W]
        x._accumulate(dxp)
        if b is not None:
            b._accumulate(g.sum(axis=(0, 2, 3)))

    if b is not None:
        bt = _ensure(b)
        parents.append(bt)
        out_data = out_data + bt.data.reshape(1, -1, 1, 1)
        b = bt
    return _make(out_data, tuple(parents), backward, "conv2d")


# -- complex support ----------------------------------------------------------

def make_complex(re, im):
    re, im = _ensure(re), _ensure(im)
    if re.shape != im.shape:
        raise ShapeError(f"make_complex: shapes {re.shape} and {im.shape}")

    def backward(g):
        g = np.asarray(g)
        re._accumulate(g.real)
        im._accumulate(g.imag)

    return _make(re.data + 1j * im.data, (re, im), backward, "make_complex")


def creal(x):
    x = _ensure(x)

    def backward(g):
        x._accumulate(np.asarray(g).astype(x.data.dtype))

    return _make(np.ascontiguousarray(x.data.real), (x,), backward, "creal")


def cimag(x):
    x = _ensure(x)

    def backward(g):
        x._accumulate(1j * np.asarray(g))

    return _make(np.ascontiguousarray(x.data.imag), (x,), backward, "cimag")


def conj(x):
    x = _ensure(x)

    def backward(g):
        x._accumulate(np.conj(g))

    return _make(np.conj(x.data), (x,), backward, "conj")


def cmul(a, b):
    """Complex elementwise product (same rule as mul, kept for clarity)."""
    return mul(a, b)


def mode_mix(x, r):
    """Per-mode channel mixing: x[B,I,S,K] complex, r[O,I,K] -> [B,O,S,K].

    The spectral-weight contraction of a factorized Fourier layer; S is the
    flattened non-transformed axis, K the kept modes.
    """
    x, r = _ensure(x), _ensure(r)
    if x.shape[1] != r.shape[1] or x.shape[3] != r.shape[2]:
        raise ShapeError(f"mode_mix: x {x.shape} vs weights {r.shape}")
    out_data = np.einsum("bisk,oik->bosk", x.data, r.data, optimize=True)

    def backward(g):
        g = np.asarray(g)
        x._accumulate(np.einsum("bosk,oik->bisk", g, np.conj(r.data),
                                optimize=True))
        r._accumulate(np.einsum("bosk,bisk->oik", g, np.conj(x.data),
                                optimize=True))

    return _make(out_data, (x, r), backward, "mode_mix")


# -- FFT ----------------------------------------------------------------------

def _complex_dtype(dt):
    return np.complex64 if dt in (np.float32, np.complex64) else np.complex128


def fft(x, axis=-1):
    x = _ensure(x)
    n = x.shape[axis]
    out_data = np.fft.fft(x.data, axis=axis).astype(_complex_dtype(x.dtype.type))
    real_input = not np.iscomplexobj(x.data)

    def backward(g):
        gx = n * np.fft.ifft(np.asarray(g), axis=axis)
        x._accumulate(gx.real if real_input else gx)

    return _make(out_data, (x,), backward, "fft")


def ifft(x, axis=-1):
    x = _ensure(x)
    n = x.shape[axis]
    out_data = np.fft.ifft(x.data, axis=axis).astype(_complex_dtype(x.dtype.type))
    real_input = not np.iscomplexobj(x.data)

    def backward(g):
        gx = np.fft.fft(np.asarray(g), axis=axis) / n
        x._accumulate(gx.real if real_input else gx)

    return _make(out_data, (x,), backward, "ifft")


def rfft(x, axis=-1):
    x = _ensure(x)
    if np.iscomplexobj(x.data):
        raise ShapeError("rfft expects a real tensor")
    n = x.shape[axis]
    if n % 2:
        raise ShapeError(f"rfft: even-length axis required, got {n}")
    out_data = np.fft.rfft(x.data, axis=axis).astype(_complex_dtype(x.dtype.type))

    def backward(g):
        g = np.asarray(g)
        shp = list(g.shape)
        shp[axis] = n
        gpad = np.zeros(shp, dtype=g.dtype if np.iscomplexobj(g)
                        else np.complex128)
        idx = [slice(None)] * g.ndim
        idx[axis] = slice(0, n // 2 + 1)
        gpad[tuple(idx)] = g
        x._accumulate((n * np.fft.ifft(gpad, axis=axis)).real)

    return _make(out_data, (x,), backward, "rfft")


def irfft(x, n, axis=-1):
    x = _ensure(x)
    if n % 2:
        raise ShapeError(f"irfft: even output length required, got {n}")
    out_data = np.fft.irfft(x.data, n=n, axis=axis).astype(
        np.float32 if x.dtype == np.complex64 else np.float64)

    def backward(g):
        g = np.asarray(g)
        spec = np.fft.rfft(g, axis=axis) / n
        shp = [1] * spec.ndim
        shp[axis] = spec.shape[axis]
        w = np.full(spec.shape[axis], 2.0)
        w[0] = 1.0
        if n % 2 == 0:
            w[-1] = 1.0
        x._accumulate(spec * w.reshape(shp))

    return _make(out_data, (x,), backward, "irfft")


# -- gradient checking ----------------------------------------------------------

def check_gradient(f, x, eps=1e-5):
    """Max relative error between reverse-mode and central finite differences.

    f maps a Tensor to a scalar Tensor; x must be real float64. Reports the
    maximum over components of |analytic - fd| / (|fd| + 1e-12).
    """
    x0 = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = f(leaf)
    if out._backward is not None or out.requires_grad:
        out.backward()
    analytic = np.zeros_like(x0) if leaf.grad is None else np.asarray(leaf.grad)
    flat = x0.ravel()
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += eps
        xm[i] -= eps
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        fd[i] = (fp - fm) / (2 * eps)
    fd = fd.reshape(x0.shape)
    return float(np.max(np.abs(analytic - fd) / (np.abs(fd) + 1e-12)))
