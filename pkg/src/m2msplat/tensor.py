"""Minimal reverse-mode tensor substrate.

Every differentiable op is a plain function that computes its result with
numpy and, when a :class:`GradTape` is recording and an input requires
gradients, appends a closure that maps the output gradient to input
gradients.  ``GradTape.backward`` replays those closures in exact reverse
order, so the graph is never rebuilt or topologically sorted.

Arrays keep whatever float dtype they were created with: float32 is the
working precision, float64 is used for gradient checking.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

WORK_DTYPE = np.float32

_TAPES: list["GradTape"] = []
_FLOP_COUNTERS: list["FlopCounter"] = []


class ShapeError(ValueError):
    """Operand shapes are inconsistent with an op's contract."""


class Tensor:
    """An n-d real array plus an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(WORK_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype)
    elif not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(WORK_DTYPE)
    return Tensor(arr)


class GradTape:
    """Records differentiable ops executed inside its ``with`` block."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self._nodes.append((out, inputs, backward))

    def backward(self, out: Tensor, grad=None) -> None:
        """Accumulate d(out)/d(leaf) into ``leaf.grad`` for every recorded leaf."""
        if grad is None:
            if out.data.size != 1:
                raise ShapeError("backward without an explicit grad needs a scalar output")
            grad = np.ones_like(out.data)
        grads: dict[int, np.ndarray] = {id(out): np.asarray(grad, dtype=out.dtype)}
        produced = {id(node[0]) for node in self._nodes}
        leaves: dict[int, Tensor] = {}
        for node_out, inputs, fn in reversed(self._nodes):
            g = grads.pop(id(node_out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for inp, gi in zip(inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = g.astype(leaf.dtype, copy=False)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # python scalars adopt the dtype of the tensor operand
    if isinstance(a, (int, float)) and not isinstance(b, (int, float)):
        b = as_tensor(b)
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    if isinstance(b, (int, float)) and not isinstance(a, (int, float)):
        a = as_tensor(a)
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    return as_tensor(a), as_tensor(b)


def _recording(*inputs: Tensor) -> bool:
    return bool(_TAPES) and any(t.requires_grad for t in inputs)


def _finish(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise FloatingPointError("op produced non-finite values")
    out = Tensor(out_data)
    if _recording(*inputs):
        out.requires_grad = True
        _TAPES[-1].record(out, inputs, backward)
    return out


class FlopCounter:
    """Counts floating point operations of the conv kernels run inside it."""

    def __init__(self):
        self.flops = 0

    def __enter__(self) -> "FlopCounter":
        _FLOP_COUNTERS.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _FLOP_COUNTERS.remove(self)


def add_flops(n: int) -> None:
    for counter in _FLOP_COUNTERS:
        counter.flops += int(n)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _finish(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _finish(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _finish(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _finish(out, (a, b), backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _finish(out, (x,), lambda g: (g * out,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _finish(out, (x,), lambda g: (g / (2.0 * out),))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _finish(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def abs_(x) -> Tensor:
    x = as_tensor(x)
    return _finish(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _finish(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    a, b = _pair(a, b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)
    return _finish(out, (a, b), lambda g: (_unbroadcast(np.where(mask, g, 0), a.shape),
                                           _unbroadcast(np.where(mask, 0, g), b.shape)))


def sigmoid(x) -> Tensor:
    """Logistic function, kept strictly inside (0, 1) even when saturated."""
    x = as_tensor(x)
    eps = np.finfo(x.dtype).eps
    out = np.clip(expit(x.data), eps, 1.0 - eps).astype(x.dtype, copy=False)
    return _finish(out, (x,), lambda g: (g * out * (1.0 - out),))


def prelu(x, slope) -> Tensor:
    """Per-channel leaky ramp; channels sit on axis -3."""
    x, slope = as_tensor(x), as_tensor(slope)
    if x.ndim < 3 or slope.shape != (x.shape[-3],):
        raise ShapeError(f"prelu: slope {slope.shape} does not match channels of {x.shape}")
    a = slope.data[:, None, None]
    pos = x.data >= 0
    out = np.where(pos, x.data, a * x.data)

    def backward(g):
        gx = np.where(pos, g, a * g)
        gs = np.where(pos, 0, g * x.data)
        axes = tuple(range(x.ndim - 3)) + (x.ndim - 2, x.ndim - 1)
        return gx, gs.sum(axis=axes)

    return _finish(out, (x, slope), backward)


# -------------------------------------------------------------- structural


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _finish(np.asarray(out), (x,), backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _finish(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        out = np.zeros(x.shape, dtype=g.dtype)
        if _has_advanced(index):
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return _finish(x.data[index], (x,), backward)


def _has_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(ts)))

    return _finish(out, ts, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                   for t in ts], axis=axis)


def global_avg_pool(x, collapse: str) -> Tensor:
    """Mean over the named axes of a (..., C, H, W) tensor, kept as size-1 dims.

    ``collapse`` is any non-empty combination of ``"c"``, ``"h"``, ``"w"``:
    ``"hw"`` gives C x 1 x 1, ``"cw"`` gives 1 x H x 1, ``"ch"`` gives 1 x 1 x W.
    """
    x = as_tensor(x)
    if not collapse or set(collapse) - set("chw"):
        raise ShapeError(f"global_avg_pool: bad axis spec {collapse!r}")
    if x.ndim < 3:
        raise ShapeError(f"global_avg_pool expects (..., C, H, W), got {x.shape}")
    axes = tuple(sorted({"c": x.ndim - 3, "h": x.ndim - 2, "w": x.ndim - 1}[k] for k in collapse))
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=True)
    return _finish(out, (x,), lambda g: (np.broadcast_to(g / count, x.shape).copy(),))


def kronecker_rank1(u, v, w) -> Tensor:
    """Outer product T[..., c, h, w] = u[..., c] * v[..., h] * w[..., w]."""
    u, v, w = as_tensor(u), as_tensor(v), as_tensor(w)
    if min(u.shape[-1], v.shape[-1], w.shape[-1]) == 0:
        raise ShapeError("kronecker_rank1 needs non-empty vectors")
    ud, vd, wd = u.data[..., :, None, None], v.data[..., None, :, None], w.data[..., None, None, :]
    out = ud * vd * wd

    def backward(g):
        return ((g * vd * wd).sum(axis=(-2, -1)),
                (g * ud * wd).sum(axis=(-3, -1)),
                (g * ud * vd).sum(axis=(-3, -2)))

    return _finish(out, (u, v, w), backward)


# ------------------------------------------------------------- convolution


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _as4d(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (C, H, W) or (B, C, H, W), got {x.shape}")


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    k = w.shape[-1]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    b, c = x.shape[:2]
    _, o, ho, wo = g.shape
    gr = g.reshape(b, o, ho * wo)
    dw = np.empty((o, c, k, k), dtype=np.result_type(x, g))
    for i in range(k):
        for j in range(k):
            xs = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride].reshape(b, c, ho * wo)
            dw[:, :, i, j] = np.einsum("bop,bcp->oc", gr, xs, optimize=True)
    return dw


def _conv_input_grad(g: np.ndarray, w: np.ndarray, stride: int, padding: int,
                     in_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of ``_conv_fwd`` w.r.t. its input (scatter of every output tap)."""
    b, _, ho, wo = g.shape
    c, k = w.shape[1], w.shape[-1]
    h, wd = in_hw
    if stride == 1 and padding <= k - 1 and ho == h + 2 * padding - k + 1 and wo == wd + 2 * padding - k + 1:
        # stride one: the adjoint is a full correlation with the flipped kernel
        flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        return _conv_fwd(g, flipped, 1, k - 1 - padding)
    buf = np.zeros((b, c, h + 2 * padding, wd + 2 * padding), dtype=np.result_type(g, w))
    cols = np.tensordot(g, w, axes=([1], [0]))  # (B, Ho, Wo, C, k, k)
    cols = cols.transpose(0, 3, 4, 5, 1, 2)  # (B, C, k, k, Ho, Wo)
    for i in range(k):
        for j in range(k):
            buf[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return buf[:, :, padding:padding + h, padding:padding + wd]


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded cross-correlation; ``weight`` is (C_out, C_in, k, k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    xd, squeezed = _as4d(x.data)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: weight must be (C_out, C_in, k, k), got {weight.shape}")
    if xd.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input has {xd.shape[1]} channels, weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {weight.shape[0]} outputs")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be positive and padding non-negative")
    k = weight.shape[-1]
    h, wd = xd.shape[2:]
    if conv_output_size(h, k, stride, padding) < 1 or conv_output_size(wd, k, stride, padding) < 1:
        raise ShapeError(f"conv2d: input {xd.shape[2:]} smaller than kernel {k}")
    out = _conv_fwd(xd, weight.data, stride, padding)
    if bias is not None:
        out += bias.data[:, None, None]
    add_flops(2 * out.size * weight.shape[1] * k * k)

    def backward(g):
        g4 = g[None] if squeezed else g
        gx = _conv_input_grad(g4, weight.data, stride, padding, (h, wd))
        gw = _conv_weight_grad(xd, g4, k, stride, padding)
        gb = g4.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx[0] if squeezed else gx), gw, gb

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return _finish(out[0] if squeezed else out, inputs, backward)


def conv_transpose2d(x, weight, bias=None, stride: int = 2, padding: int = 0) -> Tensor:
    """Transposed convolution; ``weight`` is (C_in, C_out, k, k).

    Output extent is (H - 1) * stride - 2 * padding + k.  The op is the exact
    adjoint of :func:`conv2d` with the same weight, stride and padding.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    xd, squeezed = _as4d(x.data)
    if weight.ndim != 4 or xd.shape[1] != weight.shape[0]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"conv_transpose2d: bias {bias.shape} does not match {weight.shape[1]} outputs")
    k = weight.shape[-1]
    h, wd = xd.shape[2:]
    ho, wo = (h - 1) * stride - 2 * padding + k, (wd - 1) * stride - 2 * padding + k
    if ho < 1 or wo < 1:
        raise ShapeError("conv_transpose2d: non-positive output size")
    out = _conv_input_grad(xd, weight.data, stride, padding, (ho, wo)).copy()
    if bias is not None:
        out += bias.data[:, None, None]
    add_flops(2 * xd.size * weight.shape[1] * k * k)

    def backward(g):
        g4 = g[None] if squeezed else g
        gx = _conv_fwd(g4, weight.data, stride, padding)
        gw = _conv_weight_grad(g4, xd, k, stride, padding)
        gb = g4.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx[0] if squeezed else gx), gw, gb

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return _finish(out[0] if squeezed else out, inputs, backward)


# ------------------------------------------------------------ conv layer


class ConvLayer:
    """Weights and bias of one (transposed) convolution plus its geometry."""

    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, padding: int = 0,
                 transposed: bool = False, rng: np.random.Generator | None = None,
                 dtype=WORK_DTYPE):
        if stride < 1 or padding < 0:
            raise ValueError("stride must be positive and padding non-negative")
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = c_in * k * k
        bound = 1.0 / np.sqrt(fan_in)
        shape = (c_in, c_out, k, k) if transposed else (c_out, c_in, k, k)
        self.weight = Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, size=c_out).astype(dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding
        self.transposed = transposed

    def __call__(self, x) -> Tensor:
        op = conv_transpose2d if self.transposed else conv2d
        return op(x, self.weight, self.bias, self.stride, self.padding)


# --------------------------------------------------------- gradient check


def grad_check(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], eps: float = 1e-5,
               seed: int = 0, max_coords: int | None = None) -> float:
    """Largest |analytic - central difference| / max(1, |analytic|) over inputs.

    Non-scalar outputs are contracted with a fixed random projection first.
    With ``max_coords`` only a random subset of coordinates per input is
    perturbed.  Inputs are promoted to float64 in place.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.data = t.data.astype(np.float64)
        t.requires_grad = True
        t.grad = None
    rng = np.random.default_rng(seed)

    with GradTape() as tape:
        y = f(*xs) if len(xs) > 1 else f(xs[0])
    _check_finite(y.data, "forward output")
    proj = rng.standard_normal(y.shape) if y.data.size > 1 else np.ones(y.shape)
    tape.backward(y, proj)

    def objective() -> float:
        val = (f(*xs) if len(xs) > 1 else f(xs[0])).data
        _check_finite(val, "perturbed forward output")
        return float(np.sum(val * proj))

    worst = 0.0
    for t in xs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        _check_finite(analytic, "analytic gradient")
        flat = t.data.reshape(-1)
        coords: Iterable[int] = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            plus = objective()
            flat[i] = orig - eps
            minus = objective()
            flat[i] = orig
            numeric = (plus - minus) / (2 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"grad_check: non-finite values in {what}")


# ------------------------------------------------------------- debug dump


def dump_tensor(path, x) -> None:
    """Write rank (u32), extents (u32 each) and float32 data, little-endian."""
    arr = np.asarray(as_tensor(x).data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ValueError("tensor dump truncated")
    (rank,) = struct.unpack_from("<I", raw, 0)
    shape = struct.unpack_from(f"<{rank}I", raw, 4)
    start = 4 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(raw) != start + 4 * count:
        raise ValueError("tensor dump payload length mismatch")
    return Tensor(np.frombuffer(raw, dtype="<f4", offset=start).reshape(shape).astype(np.float32))


@contextmanager
def no_tape():
    """Temporarily hide active tapes (ops inside are not recorded)."""
    saved = _TAPES[:]
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)
