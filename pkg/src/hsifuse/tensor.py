"""Dense tensors with reverse-mode autodiff and a finite-difference gradient checker.

Every value flowing through the pipeline is a `Tensor`: a numpy array plus an
optional record of how it was computed. Calling ``backward()`` on a scalar
walks the recorded graph and accumulates gradients into the leaves. Trainable
leaves are `Param` objects (named, gradient always allocated). Spectra are
`ComplexTensor` pairs of real tensors, so all differentiation stays real.

Default precision is float32; pass float64 tensors (or build modules with
``dtype=np.float64``) for verification runs, where finite differences are
trustworthy.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Param",
    "ComplexTensor",
    "Module",
    "ShapeError",
    "NumericsError",
    "no_grad",
    "finite_checks",
    "as_tensor",
    "cast",
    "concat",
    "take_axis",
    "matmul",
    "sigmoid",
    "silu",
    "softmax_lastdim",
    "cross_entropy",
    "conv2d_1x1",
    "conv2d_3x3",
    "bilinear_sample",
    "fft2d",
    "ifft2d",
    "spectral_filter",
    "grad_check",
]

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NumericsError(ArithmeticError):
    """An operation produced non-finite values."""


_grad_enabled = True
_finite_checks = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / data plumbing)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def finite_checks():
    """Verify every op output is finite inside the block; raise NumericsError naming the op."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = True
    try:
        yield
    finally:
        _finite_checks = prev


def _promote(*dtypes):
    return np.float64 if any(d == np.float64 for d in dtypes) else np.float32


class Tensor:
    """A numpy array plus the vector-Jacobian products that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_vjps", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._vjps: tuple = ()
        self._op = "leaf"

    # -- introspection -------------------------------------------------------

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

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self._op})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return cast(self, dtype)

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return _elementwise_add(self, as_tensor(other, self.dtype))

    __radd__ = __add__

    def __neg__(self):
        return _make_op(-self.data, [(self, lambda g: -g)], "neg")

    def __sub__(self, other):
        return self + (-as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other):
        return _elementwise_mul(self, as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return self * (1.0 / other)
        raise TypeError("tensor division is only supported by scalars")

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("exponent must be a scalar")
        out = self.data ** exponent
        e = exponent
        return _make_op(out, [(self, lambda g: g * e * self.data ** (e - 1))], "pow")

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is None:
                return np.broadcast_to(g, self.shape).astype(self.dtype, copy=False)
            gg = g if keepdims else np.expand_dims(g, axis)
            return np.broadcast_to(gg, self.shape).astype(self.dtype, copy=False)

        return _make_op(out, [(self, vjp)], "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = self.data.reshape(shape)
        return _make_op(out, [(self, lambda g: g.reshape(self.shape))], "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        out = self.data.transpose(axes)
        return _make_op(out, [(self, lambda g: g.transpose(inv))], "transpose")

    # -- backward ------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode accumulation from a scalar output into leaf ``grad`` fields."""
        if self.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._vjps:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._vjps:  # leaf
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, vjp in node._vjps:
                if not parent.requires_grad:
                    continue
                pg = vjp(g)
                acc = grads.get(id(parent))
                if acc is None:
                    grads[id(parent)] = pg.astype(parent.dtype, copy=True)
                else:
                    acc += pg


class Param(Tensor):
    """Trainable tensor with a unique name and an always-allocated gradient."""

    __slots__ = ("name",)

    def __init__(self, name: str, value, dtype=None):
        super().__init__(value, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape}, dtype={self.dtype.name})"

    def zero_grad(self) -> None:
        self.grad[...] = 0


class ComplexTensor:
    """Complex array stored as two real tensors so gradients stay real."""

    __slots__ = ("real", "imag")

    def __init__(self, real: Tensor, imag: Tensor):
        if real.shape != imag.shape:
            raise ShapeError(f"real/imag shapes differ: {real.shape} vs {imag.shape}")
        self.real = real
        self.imag = imag

    @property
    def shape(self):
        return self.real.shape

    def conj(self) -> "ComplexTensor":
        return ComplexTensor(self.real, -self.imag)

    def mul(self, other: "ComplexTensor") -> "ComplexTensor":
        """Elementwise complex product (a+bi)(c+di)."""
        a, b, c, d = self.real, self.imag, other.real, other.imag
        return ComplexTensor(a * c - b * d, a * d + b * c)

    def abs2(self) -> Tensor:
        return self.real * self.real + self.imag * self.imag

    def numpy(self) -> np.ndarray:
        return self.real.data + 1j * self.imag.data


class Module:
    """Minimal container: anything holding Params directly or through children."""

    def params(self) -> Iterable[Param]:
        seen: set[int] = set()
        yield from self._walk(self, seen)

    @staticmethod
    def _walk(obj, seen):
        if isinstance(obj, Param):
            if id(obj) not in seen:
                seen.add(id(obj))
                yield obj
        elif isinstance(obj, Module):
            for value in vars(obj).values():
                yield from Module._walk(value, seen)
        elif isinstance(obj, (list, tuple)):
            for value in obj:
                yield from Module._walk(value, seen)
        elif isinstance(obj, dict):
            for value in obj.values():
                yield from Module._walk(value, seen)

    def named_params(self) -> Iterable[tuple[str, Param]]:
        for p in self.params():
            yield p.name, p

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_params()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_params():
            if name not in state:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            arr = state[name]
            if tuple(arr.shape) != p.shape:
                raise ShapeError(f"parameter {name!r}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data[...] = arr.astype(p.dtype, copy=False)

    def zero_grads(self) -> None:
        for p in self.params():
            p.zero_grad()

    def freeze(self) -> None:
        for p in self.params():
            p.requires_grad = False

    def unfreeze(self) -> None:
        for p in self.params():
            p.requires_grad = True


# ---------------------------------------------------------------------------
# op plumbing
# ---------------------------------------------------------------------------


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


def _make_op(data: np.ndarray, vjps, op: str) -> Tensor:
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite output of op {op!r}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if _grad_enabled and any(p.requires_grad for p, _ in vjps):
        out.requires_grad = True
        out._vjps = tuple((p, f) for p, f in vjps)
    else:
        out.requires_grad = False
        out._vjps = ()
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _make_op(
        out,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))],
        "add",
    )


def _elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _make_op(
        out,
        [
            (a, lambda g: _unbroadcast(g * b.data, a.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.shape)),
        ],
        "mul",
    )


def cast(x: Tensor, dtype) -> Tensor:
    """Differentiable dtype cast (gradient is cast back)."""
    x = as_tensor(x)
    if x.dtype == dtype:
        return x
    return _make_op(x.data.astype(dtype), [(x, lambda g: g.astype(x.dtype))], "cast")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        return vjp

    return _make_op(out, [(t, make_vjp(i)) for i, t in enumerate(tensors)], "concat")


def take_axis(x: Tensor, indices, axis: int) -> Tensor:
    """Gather along one axis; backward scatter-adds (indices may repeat)."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(x.data, idx, axis=axis)

    def vjp(g):
        gx = np.zeros_like(x.data)
        gm = np.moveaxis(gx, axis, 0)
        np.add.at(gm, idx, np.moveaxis(g, axis, 0))
        return gx

    return _make_op(out, [(x, vjp)], "take_axis")


# ---------------------------------------------------------------------------
# numeric primitives
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; batch dimensions broadcast like numpy's ``@``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def vjp_a(g):
        return _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)

    def vjp_b(g):
        return _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)

    return _make_op(out, [(a, vjp_a), (b, vjp_b)], "matmul")


def sigmoid(x) -> Tensor:
    """Elementwise 1/(1+exp(-x)), overflow-safe on both tails."""
    x = as_tensor(x)
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make_op(out, [(x, lambda g: g * out * (1.0 - out))], "sigmoid")


def silu(x) -> Tensor:
    """Smooth gating activation x * sigmoid(x)."""
    x = as_tensor(x)
    return x * sigmoid(x)


def softmax_lastdim(x) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty last dimension")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return s * (g - inner)

    return _make_op(s, [(x, vjp)], "softmax")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits).

    ``logits`` is [B, K]; ``labels`` holds class indices 0..K-1.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects [B,K] logits and [B] labels, got {logits.shape}, {labels.shape}")
    b = logits.shape[0]
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = z[np.arange(b), labels]
    out = np.asarray((lse - picked).mean(), dtype=logits.dtype)

    def vjp(g):
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(b), labels] -= 1.0
        return g * p / b

    return _make_op(out, [(logits, vjp)], "cross_entropy")


def _split_channel_args(x: Tensor):
    if x.ndim == 3:
        return True, x.shape
    if x.ndim == 4:
        return False, x.shape[1:]
    raise ShapeError(f"expected [H,W,C] or [B,H,W,C], got {x.shape}")


def conv2d_1x1(x, w, bias=None) -> Tensor:
    """Per-pixel linear map across channels: [..,H,W,Cin] x [Cin,Cout] -> [..,H,W,Cout]."""
    x, w = as_tensor(x), as_tensor(w)
    _split_channel_args(x)
    cin = x.shape[-1]
    if w.ndim != 2 or w.shape[0] != cin:
        raise ShapeError(f"conv2d_1x1 channel mismatch: input {x.shape} vs weight {w.shape}")
    cout = w.shape[1]
    lead = x.shape[:-1]
    flat = x.data.reshape(-1, cin)
    out = (flat @ w.data).reshape(*lead, cout)
    vjps = [
        (x, lambda g: (g.reshape(-1, cout) @ w.data.T).reshape(x.shape)),
        (w, lambda g: flat.T @ g.reshape(-1, cout)),
    ]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d_1x1 bias shape {bias.shape} != ({cout},)")
        out = out + bias.data
        vjps.append((bias, lambda g: g.reshape(-1, cout).sum(axis=0)))
    return _make_op(out, vjps, "conv2d_1x1")


_OFF3 = [(dy, dx) for dy in range(3) for dx in range(3)]


def conv2d_3x3(x, w, bias=None) -> Tensor:
    """3x3 convolution with zero padding 1 (same spatial size).

    ``w`` is [3,3,Cin,Cout]; input is [..,H,W,Cin].
    """
    x, w = as_tensor(x), as_tensor(w)
    single, (h, wd, cin) = _split_channel_args(x)
    if w.ndim != 4 or w.shape[:3] != (3, 3, cin):
        raise ShapeError(f"conv2d_3x3 weight {w.shape} does not match input {x.shape}")
    cout = w.shape[3]
    xb = x.data[None] if single else x.data
    b = xb.shape[0]
    xp = np.pad(xb, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((b, h, wd, 9, cin), dtype=x.dtype)
    for k, (dy, dx) in enumerate(_OFF3):
        cols[:, :, :, k, :] = xp[:, dy:dy + h, dx:dx + wd, :]
    wm = w.data.reshape(9 * cin, cout)
    out = (cols.reshape(-1, 9 * cin) @ wm).reshape(b, h, wd, cout)
    if single:
        out = out[0]

    def vjp_x(g):
        gb = (g[None] if single else g).reshape(-1, cout)
        gcols = (gb @ wm.T).reshape(b, h, wd, 9, cin)
        gxp = np.zeros_like(xp)
        for k, (dy, dx) in enumerate(_OFF3):
            gxp[:, dy:dy + h, dx:dx + wd, :] += gcols[:, :, :, k, :]
        gx = gxp[:, 1:h + 1, 1:wd + 1, :]
        return gx[0] if single else gx

    def vjp_w(g):
        gb = (g[None] if single else g).reshape(-1, cout)
        return (cols.reshape(-1, 9 * cin).T @ gb).reshape(3, 3, cin, cout)

    vjps = [(x, vjp_x), (w, vjp_w)]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d_3x3 bias shape {bias.shape} != ({cout},)")
        out = out + bias.data
        vjps.append((bias, lambda g: g.reshape(-1, cout).sum(axis=0)))
    return _make_op(out, vjps, "conv2d_3x3")


# ---------------------------------------------------------------------------
# bilinear resampling (offset-displaced reads with mirror boundary)
# ---------------------------------------------------------------------------


def _mirror_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Reflect integer indices into [0, n): -1 -> 1, n -> n-2 (no edge repeat)."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    j = np.mod(idx, period)
    return np.where(j >= n, period - j, j)


def bilinear_sample(x, offsets) -> Tensor:
    """Read ``x`` at per-pixel displaced locations with bilinear interpolation.

    ``x`` is [..,H,W,C]; ``offsets`` is [..,H,W,2] holding (dy, dx). Out-of-range
    reads mirror back into the image. Differentiable in both arguments.
    """
    x, offsets = as_tensor(x), as_tensor(offsets)
    single, (h, w, c) = _split_channel_args(x)
    if offsets.shape != x.shape[:-1] + (2,):
        raise ShapeError(f"offsets {offsets.shape} do not match input {x.shape}")
    xb = x.data[None] if single else x.data
    ob = offsets.data[None] if single else offsets.data
    b = xb.shape[0]

    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    py = yy[None] + ob[..., 0]
    px = xx[None] + ob[..., 1]
    y0 = np.floor(py)
    x0 = np.floor(px)
    fy = (py - y0)[..., None]
    fx = (px - x0)[..., None]
    iy0 = _mirror_index(y0.astype(np.intp), h)
    iy1 = _mirror_index(y0.astype(np.intp) + 1, h)
    ix0 = _mirror_index(x0.astype(np.intp), w)
    ix1 = _mirror_index(x0.astype(np.intp) + 1, w)
    bi = np.arange(b)[:, None, None]

    v00 = xb[bi, iy0, ix0]
    v01 = xb[bi, iy0, ix1]
    v10 = xb[bi, iy1, ix0]
    v11 = xb[bi, iy1, ix1]
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11
    if single:
        out = out[0]

    def vjp_x(g):
        gb = g[None] if single else g
        gx = np.zeros_like(xb)
        np.add.at(gx, (bi, iy0, ix0), gb * w00)
        np.add.at(gx, (bi, iy0, ix1), gb * w01)
        np.add.at(gx, (bi, iy1, ix0), gb * w10)
        np.add.at(gx, (bi, iy1, ix1), gb * w11)
        return gx[0] if single else gx

    def vjp_off(g):
        gb = g[None] if single else g
        dpy = ((v10 - v00) * (1 - fx) + (v11 - v01) * fx) * gb
        dpx = ((v01 - v00) * (1 - fy) + (v11 - v10) * fy) * gb
        go = np.stack([dpy.sum(axis=-1), dpx.sum(axis=-1)], axis=-1)
        return go[0] if single else go

    return _make_op(out, [(x, vjp_x), (offsets, vjp_off)], "bilinear_sample")


# ---------------------------------------------------------------------------
# 2D discrete Fourier transform over the two spatial axes
# ---------------------------------------------------------------------------

_DFT_CACHE: dict[tuple[int, str], tuple[np.ndarray, np.ndarray]] = {}


def _dft_mats(n: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    """Cos/sin basis matrices for a length-n DFT (any n, O(n^2) apply)."""
    key = (n, np.dtype(dtype).name)
    if key not in _DFT_CACHE:
        k = np.arange(n, dtype=np.float64)
        ang = 2.0 * np.pi * np.outer(k, k) / n
        _DFT_CACHE[key] = (np.cos(ang).astype(dtype), np.sin(ang).astype(dtype))
    return _DFT_CACHE[key]


def _contract_axis(x: Tensor, m: np.ndarray, axis: int) -> Tensor:
    """out[..,i,..] = sum_j m[i,j] * x[..,j,..] along ``axis``; linear so vjp uses m.T."""
    def apply(arr, mat):
        return np.moveaxis(np.tensordot(arr, mat, axes=([axis % arr.ndim], [1])), -1, axis)

    out = apply(x.data, m)
    return _make_op(out, [(x, lambda g: apply(g, m.T))], "contract_axis")


def fft2d(x) -> ComplexTensor:
    """Unnormalized forward DFT over the two spatial axes of [..,H,W,C].

    Computed per channel with explicit O(N^2) basis contractions — the spatial
    dims here are patch-sized, and linearity gives exact gradients for free.
    """
    x = as_tensor(x)
    if x.ndim < 3:
        raise ShapeError(f"fft2d expects [..,H,W,C], got {x.shape}")
    h, w = x.shape[-3], x.shape[-2]
    ch, sh = _dft_mats(h, x.dtype)
    cw, sw = _dft_mats(w, x.dtype)
    ar = _contract_axis(x, ch, -3)
    ai = -_contract_axis(x, sh, -3)
    re = _contract_axis(ar, cw, -2) + _contract_axis(ai, sw, -2)
    im = _contract_axis(ai, cw, -2) - _contract_axis(ar, sw, -2)
    return ComplexTensor(re, im)


def ifft2d(m: ComplexTensor, assert_real_tol: float | None = None) -> Tensor:
    """Inverse DFT with the 1/(H*W) factor; returns the real part.

    With ``assert_real_tol`` set, raises NumericsError if any imaginary residue
    exceeds the tolerance (callers feeding Hermitian-symmetric spectra use this
    to assert their output is genuinely real).
    """
    re, im = m.real, m.imag
    h, w = re.shape[-3], re.shape[-2]
    ch, sh = _dft_mats(h, re.dtype)
    cw, sw = _dft_mats(w, re.dtype)
    ar = _contract_axis(re, ch, -3) - _contract_axis(im, sh, -3)
    ai = _contract_axis(im, ch, -3) + _contract_axis(re, sh, -3)
    out_re = _contract_axis(ar, cw, -2) - _contract_axis(ai, sw, -2)
    if assert_real_tol is not None:
        out_im = _contract_axis(ai, cw, -2) + _contract_axis(ar, sw, -2)
        residue = float(np.abs(out_im.data).max()) / (h * w)
        if residue > assert_real_tol:
            raise NumericsError(f"ifft2d imaginary residue {residue:.3e} exceeds {assert_real_tol:.3e}")
    return out_re * (1.0 / (h * w))


def spectral_filter(x: Tensor, w_re: Tensor, w_im: Tensor, assert_real_tol: float = 1e-6) -> Tensor:
    """Fused Re(iDFT(W * DFT(x))) over the spatial axes of [..,H,W,C].

    Equivalent to fft2d -> elementwise complex multiply -> ifft2d but computed
    as one graph node with a batched FFT, which matters on the training path.
    ``w_re``/``w_im`` give the full [H,W,C] weight field; a Hermitian field
    keeps the output real, asserted against ``assert_real_tol``.
    """
    x, w_re, w_im = as_tensor(x), as_tensor(w_re), as_tensor(w_im)
    if x.ndim < 3:
        raise ShapeError(f"spectral_filter expects [..,H,W,C], got {x.shape}")
    if w_re.shape != x.shape[-3:] or w_im.shape != x.shape[-3:]:
        raise ShapeError(f"weights {w_re.shape}/{w_im.shape} do not match input {x.shape}")
    h, w = x.shape[-3], x.shape[-2]
    axes = (-3, -2)
    spectrum = np.fft.fft2(x.data.astype(np.float64), axes=axes)
    weights = w_re.data.astype(np.float64) + 1j * w_im.data.astype(np.float64)
    filtered = weights * spectrum
    y = np.fft.ifft2(filtered, axes=axes)
    residue = float(np.abs(y.imag).max()) if y.size else 0.0
    if residue > assert_real_tol:
        raise NumericsError(f"spectral_filter imaginary residue {residue:.3e} exceeds {assert_real_tol:.3e}")
    out = y.real.astype(x.dtype)

    lead = tuple(range(x.ndim - 3))

    def vjp_x(g):
        g_filtered = np.fft.fft2(g.astype(np.float64), axes=axes) / (h * w)
        g_spectrum = np.conj(weights) * g_filtered
        return (h * w) * np.fft.ifft2(g_spectrum, axes=axes).real

    last: list = [None, None]  # share the weight-gradient FFT between re/im vjps

    def vjp_w(g):
        if last[0] is not g:
            g_filtered = np.fft.fft2(g.astype(np.float64), axes=axes) / (h * w)
            gw = np.conj(spectrum) * g_filtered
            last[0] = g
            last[1] = gw.sum(axis=lead) if lead else gw
        return last[1]

    return _make_op(
        out,
        [
            (x, lambda g: vjp_x(g).astype(x.dtype)),
            (w_re, lambda g: vjp_w(g).real.astype(w_re.dtype)),
            (w_im, lambda g: vjp_w(g).imag.astype(w_im.dtype)),
        ],
        "spectral_filter",
    )


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


def grad_check(op: Callable, inputs: Sequence[Tensor], eps: float = 1e-4) -> float:
    """Compare reverse-mode gradients of ``sum(op(*inputs))`` to central differences.

    ``inputs`` are the leaves to differentiate; ``op`` may use them positionally
    or close over the same objects. Run in 64-bit: finite differences are not
    trustworthy in float32. Returns the max relative error over every
    coordinate, with denominator max(|analytic|, |numeric|, 1e-8).
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
        t._vjps = ()

    def scalar():
        outs = op(*inputs)
        if isinstance(outs, Tensor):
            outs = [outs]
        elif isinstance(outs, ComplexTensor):
            outs = [outs.real, outs.imag]
        total = None
        for o in outs:
            s = o.sum()
            total = s if total is None else total + s
        return total

    with finite_checks():
        loss = scalar()
        loss.backward()
        analytic = [t.grad.copy() for t in inputs]

        worst = 0.0
        with no_grad():
            for t, ga in zip(inputs, analytic):
                flat = t.data.reshape(-1)
                gflat = ga.reshape(-1)
                for i in range(flat.size):
                    saved = flat[i]
                    flat[i] = saved + eps
                    f_plus = scalar().item()
                    flat[i] = saved - eps
                    f_minus = scalar().item()
                    flat[i] = saved
                    numeric = (f_plus - f_minus) / (2.0 * eps)
                    denom = max(abs(gflat[i]), abs(numeric), 1e-8)
                    worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst
