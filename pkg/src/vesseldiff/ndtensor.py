"""Minimal n-dimensional tensors with reverse-mode automatic differentiation.

Everything is float64 and CPU-only. Operations record themselves on an
implicit tape (a per-tensor parent graph with a global creation counter),
and ``backward`` replays them in exact reverse execution order. Only
same-shape and scalar broadcasting are supported; anything fancier is a
deliberate error so shape bugs in diffusion arithmetic fail loudly.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "ContractError",
    "conv2d",
    "subsample",
    "upsample_nearest",
    "concat_channels",
    "broadcast_hw",
    "silu",
    "sigmoid",
    "log",
    "clip",
    "backward",
    "finite_difference_check",
]


class DimensionError(ValueError):
    """Raised when tensor shapes violate an operation's contract."""


class ContractError(RuntimeError):
    """Raised when an operation is called outside its stated contract."""


_op_counter = 0


def _next_op_id() -> int:
    global _op_counter
    _op_counter += 1
    return _op_counter


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by '{op}'")


class Tensor:
    """A float64 array plus optional gradient bookkeeping.

    Attributes:
        data: the value array (always float64, row-major).
        grad: accumulated gradient of the same shape, or None.
        requires_grad: whether backward should produce a gradient here.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable[[np.ndarray], None]] = None
        self._op_id = 0

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    @staticmethod
    def from_op(data: np.ndarray, parents: Sequence["Tensor"],
                backward_fn: Callable[[np.ndarray], None], op: str) -> "Tensor":
        _check_finite(data, op)
        out = Tensor(data)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
            out._op_id = _next_op_id()
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __sub__(self, other) -> "Tensor":
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other) -> "Tensor":
        return add(_as_tensor(other), mul(self, -1.0))

    def __truediv__(self, other) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other) -> "Tensor":
        return div(_as_tensor(other), self)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _binary_shapes(a: Tensor, b: Tensor, op: str):
    """Enforce same-shape or scalar-with-tensor broadcasting only."""
    if a.data.shape == b.data.shape:
        return
    if a.data.ndim == 0 or b.data.ndim == 0:
        return
    raise DimensionError(
        f"'{op}' requires same-shape or scalar operands, got {a.data.shape} and {b.data.shape}"
    )


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to a scalar operand's shape when broadcast."""
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g, b.data.shape))

    return Tensor.from_op(out_data, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g * a.data, b.data.shape))

    return Tensor.from_op(out_data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "div")
    out_data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor.from_op(out_data, (a, b), bw, "div")


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v, dtype=np.float64)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = _stable_sigmoid(x.data)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g * s * (1.0 - s))

    return Tensor.from_op(s, (x,), bw, "sigmoid")


# test hook: when true, silu's backward is deliberately wrong so gradient
# verification suites can prove they catch broken derivatives
_BREAK_SILU_GRAD = False


def silu(x: Tensor) -> Tensor:
    """silu(x) = x * sigmoid(x)."""
    x = _as_tensor(x)
    s = _stable_sigmoid(x.data)
    out_data = x.data * s

    def bw(g):
        if x.requires_grad:
            d = s + x.data * s * (1.0 - s)
            if _BREAK_SILU_GRAD:
                d = d * 1.5
            x._accumulate(g * d)

    return Tensor.from_op(out_data, (x,), bw, "silu")


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = np.log(x.data)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g / x.data)

    return Tensor.from_op(out_data, (x,), bw, "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes through only inside the range."""
    x = _as_tensor(x)
    out_data = np.clip(x.data, lo, hi)
    inside = (x.data > lo) & (x.data < hi)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g * inside)

    return Tensor.from_op(out_data, (x,), bw, "clip")


def tsum(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = np.asarray(np.sum(x.data))

    def bw(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g, x.data.shape).copy())

    return Tensor.from_op(out_data, (x,), bw, "sum")


def tmean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size
    out_data = np.asarray(np.sum(x.data) / n)

    def bw(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g / n, x.data.shape).copy())

    return Tensor.from_op(out_data, (x,), bw, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    out_data = x.data.reshape(shape)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.data.shape))

    return Tensor.from_op(out_data, (x,), bw, "reshape")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two [N,C,H,W] tensors along the channel axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise DimensionError("concat_channels expects 4-d tensors")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise DimensionError(
            f"concat_channels shape mismatch: {a.data.shape} vs {b.data.shape}")
    ca = a.data.shape[1]
    out_data = np.concatenate([a.data, b.data], axis=1)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g[:, :ca])
        if b.requires_grad:
            b._accumulate(g[:, ca:])

    return Tensor.from_op(out_data, (a, b), bw, "concat_channels")


def broadcast_hw(x: Tensor, h: int, w: int) -> Tensor:
    """Tile a [N,C,1,1] tensor to [N,C,h,w]; backward sums over the tiled axes."""
    x = _as_tensor(x)
    if x.data.ndim != 4 or x.data.shape[2:] != (1, 1):
        raise DimensionError(f"broadcast_hw expects [N,C,1,1], got {x.data.shape}")
    out_data = np.broadcast_to(x.data, x.data.shape[:2] + (h, w)).copy()

    def bw(g):
        if x.requires_grad:
            x._accumulate(g.sum(axis=(2, 3), keepdims=True))

    return Tensor.from_op(out_data, (x,), bw, "broadcast_hw")


def subsample(x: Tensor, factor: int) -> Tensor:
    """Keep every factor-th pixel of a [N,C,H,W] tensor (top-left aligned).

    Composing a stride-1 convolution with this op reproduces a strided
    convolution under floor output semantics.
    """
    x = _as_tensor(x)
    if factor < 1:
        raise ValueError(f"subsample factor must be >= 1, got {factor}")
    if x.data.ndim != 4:
        raise DimensionError("subsample expects a 4-d tensor")
    out_data = x.data[:, :, ::factor, ::factor].copy()

    def bw(g):
        if x.requires_grad:
            gg = np.zeros_like(x.data)
            gg[:, :, ::factor, ::factor] = g
            x._accumulate(gg)

    return Tensor.from_op(out_data, (x,), bw, "subsample")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each pixel of a [N,C,H,W] tensor into a factor x factor block."""
    x = _as_tensor(x)
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if x.data.ndim != 4:
        raise DimensionError("upsample_nearest expects a 4-d tensor")
    out_data = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g):
        if x.requires_grad:
            n, c, h, w = x.data.shape
            gg = g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))
            x._accumulate(gg)

    return Tensor.from_op(out_data, (x,), bw, "upsample_nearest")


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of [N,C,H,W] input with [F,C,kh,kw] kernel.

    kh and kw must be odd; output spatial size must come out integral.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if bias is not None:
        bias = _as_tensor(bias)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError("conv2d expects 4-d input and kernel")
    n, c, h, w = x.data.shape
    f, ck, kh, kw = kernel.data.shape
    if ck != c:
        raise DimensionError(f"kernel expects {ck} input channels, input has {c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError("kernel spatial dims must be odd")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if bias is not None and bias.data.shape != (f,):
        raise DimensionError(f"bias must have shape ({f},), got {bias.data.shape}")
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise DimensionError(
            f"conv2d output size not integral for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data

    # im2col formulation: one GEMM over [N*Ho*Wo, C*kh*kw] patches
    s = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp, (n, c, kh, kw, ho, wo),
        (s[0], s[1], s[2], s[3], s[2] * stride, s[3] * stride))
    cols = np.ascontiguousarray(patches.transpose(0, 4, 5, 1, 2, 3)) \
        .reshape(n * ho * wo, c * kh * kw)
    k2d = kernel.data.reshape(f, c * kh * kw)
    out_data = (cols @ k2d.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    out_data = np.ascontiguousarray(out_data)
    if bias is not None:
        out_data += bias.data[None, :, None, None]

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        g2d = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, f)
        if x.requires_grad:
            gcols = (g2d @ k2d).reshape(n, ho, wo, c, kh, kw) \
                .transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride,
                        j:j + stride * wo:stride] += gcols[:, :, i, j]
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + w]
            x._accumulate(gxp)
        if kernel.requires_grad:
            kernel._accumulate((g2d.T @ cols).reshape(kernel.data.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    return Tensor.from_op(out_data, parents, bw, "conv2d")


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss through every reachable tensor.

    Gradients accumulate (sum) across all consumers; operations are visited
    in exact reverse execution order.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")

    # collect reachable op nodes
    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._backward_fn is not None:
            nodes.append(t)
            stack.extend(t._parents)

    loss._accumulate(np.ones_like(loss.data))
    for t in sorted(nodes, key=lambda n: n._op_id, reverse=True):
        t._backward_fn(t.grad)


def finite_difference_check(f, x: Tensor, h: float = 1e-5,
                            coords: Optional[Sequence[int]] = None) -> float:
    """Compare analytic gradients of scalar f(x) against central differences.

    Returns max over checked coordinates of |analytic - numeric| / max(1, |analytic|).
    ``coords`` restricts the check to a subset of flat indices (all by default).
    """
    x.requires_grad = True
    x.zero_grad()
    loss = f(x)
    backward(loss)
    analytic = x.grad.reshape(-1).copy()

    flat = x.data.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    max_err = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(x.data)).data)
        flat[i] = orig - h
        fm = float(f(Tensor(x.data)).data)
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        max_err = max(max_err, err)
    return max_err
