"""Backward warping, forward splatting and time scaling of flow fields.

Flow fields are arrays (or tensors) shaped ``(..., 2, H, W)`` holding
``(u, v)`` = (horizontal, vertical) displacement in pixels.  A multi-flow
field adds one axis in front of the 2: ``(..., N, 2, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _finish, _unbroadcast, as_tensor, concat, mul


class FlowRangeError(ValueError):
    """A flow field is non-finite or implausibly large."""


def check_flow(flow, name: str = "flow") -> np.ndarray:
    """Validate shape and finiteness; returns the underlying array."""
    arr = flow.data if isinstance(flow, Tensor) else np.asarray(flow)
    if arr.ndim < 3 or arr.shape[-3] != 2:
        raise ValueError(f"{name} must be shaped (..., 2, H, W), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise FlowRangeError(f"{name} contains non-finite values")
    bound = 4 * max(arr.shape[-2:])
    if np.abs(arr).max(initial=0.0) > bound:
        raise FlowRangeError(f"{name} magnitude exceeds sanity bound {bound}")
    return arr


def scale_flow(flow, t: float, source: int):
    """Displacement to time ``t``: ``t * F01`` for frame 0, ``(1 - t) * F10`` for frame 1."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    if source not in (0, 1):
        raise ValueError("source must be 0 or 1")
    factor = t if source == 0 else 1.0 - t
    if isinstance(flow, Tensor):
        return mul(flow, factor)
    return np.asarray(flow) * np.asarray(factor, dtype=np.asarray(flow).dtype)


def _grid(h: int, w: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing="ij")
    return xs, ys


def backward_warp(x, flow) -> Tensor:
    """Bilinearly sample ``x`` at ``p + flow(p)``; coordinates clamp to the border.

    ``x`` is ``(..., C, H, W)``; ``flow`` is ``(..., 2, H, W)`` with the same
    leading dims, or plain ``(2, H, W)`` shared by every leading index.
    """
    x, flow = as_tensor(x), as_tensor(flow)
    h, w = x.shape[-2:]
    if flow.shape[-3:] != (2, h, w):
        raise ValueError(f"backward_warp: flow {flow.shape} does not match image {x.shape}")
    lead = x.shape[:-3]
    c = x.shape[-3]
    fd = np.broadcast_to(flow.data, lead + (2, h, w))
    gx, gy = _grid(h, w, x.dtype)
    px_raw = gx + fd[..., 0, :, :]
    py_raw = gy + fd[..., 1, :, :]
    px = np.clip(px_raw, 0, w - 1)
    py = np.clip(py_raw, 0, h - 1)
    in_x = (px_raw >= 0) & (px_raw <= w - 1)
    in_y = (py_raw >= 0) & (py_raw <= h - 1)
    x0 = np.clip(np.floor(px), 0, max(w - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(py), 0, max(h - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (px - x0).astype(x.dtype)
    fy = (py - y0).astype(x.dtype)

    flat = x.data.reshape(lead + (c, h * w))
    idx = [(yy * w + xx).reshape(lead + (1, h * w)) for yy, xx in ((y0, x0), (y0, x1), (y1, x0), (y1, x1))]
    v00, v01, v10, v11 = (np.take_along_axis(flat, np.broadcast_to(i, lead + (c, h * w)), axis=-1)
                          .reshape(lead + (c, h, w)) for i in idx)
    fxe, fye = fx[..., None, :, :], fy[..., None, :, :]
    out = ((1 - fxe) * (1 - fye) * v00 + fxe * (1 - fye) * v01
           + (1 - fxe) * fye * v10 + fxe * fye * v11)

    def backward(g):
        coefs = ((1 - fxe) * (1 - fye), fxe * (1 - fye), (1 - fxe) * fye, fxe * fye)
        n_lead = int(np.prod(lead)) if lead else 1
        offsets = (np.arange(n_lead * c).reshape(lead + (c, 1)) * (h * w))
        gx_acc = np.zeros(n_lead * c * h * w, dtype=np.float64)
        for i, coef in zip(idx, coefs):
            bins = (offsets + i).reshape(-1)
            gx_acc += np.bincount(bins, weights=(g * coef).reshape(-1), minlength=gx_acc.size)
        g_img = gx_acc.reshape(x.shape).astype(x.dtype)
        du = ((1 - fye) * (v01 - v00) + fye * (v11 - v10)) * g
        dv = ((1 - fxe) * (v10 - v00) + fxe * (v11 - v01)) * g
        g_flow = np.stack([du.sum(axis=-3) * in_x, dv.sum(axis=-3) * in_y], axis=-3)
        return g_img, _unbroadcast(g_flow.astype(flow.dtype), flow.shape)

    return _finish(out.astype(x.dtype, copy=False), (x, flow), backward)


def _splat_footprint(fd: np.ndarray, h: int, w: int, dtype):
    gx, gy = _grid(h, w, dtype)
    px = gx + fd[..., 0, :, :]
    py = gy + fd[..., 1, :, :]
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = (px - x0).astype(dtype)
    fy = (py - y0).astype(dtype)
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    # corner order: (x0, y0), (x0+1, y0), (x0, y0+1), (x0+1, y0+1)
    cx = np.stack([x0, x0 + 1, x0, x0 + 1], axis=-1)
    cy = np.stack([y0, y0, y0 + 1, y0 + 1], axis=-1)
    fxs, fys = fx[..., None], fy[..., None]
    coef = np.concatenate([(1 - fxs) * (1 - fys), fxs * (1 - fys), (1 - fxs) * fys, fxs * fys], axis=-1)
    valid = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
    target = np.where(valid, cy * w + cx, 0)
    return fx, fy, coef, valid, target


def splat(values, flow) -> Tensor:
    """Sum-splat every source pixel to ``p + flow(p)`` with bilinear weights.

    ``values`` is ``(..., C, H, W)`` and is broadcast against the leading
    dims of ``flow`` ``(..., 2, H, W)``; the result has the flow's leading
    dims.  Corner contributions outside the frame are dropped.  Accumulation
    runs in raster order over (leading index, channel, source pixel, corner).
    """
    values, flow = as_tensor(values), as_tensor(flow)
    h, w = flow.shape[-2:]
    if values.shape[-2:] != (h, w):
        raise ValueError(f"splat: values {values.shape} do not match flow {flow.shape}")
    check_flow(flow.data)
    lead = np.broadcast_shapes(values.shape[:-3], flow.shape[:-3])
    c = values.shape[-3]
    vd = np.broadcast_to(values.data, lead + (c, h, w))
    fd = np.broadcast_to(flow.data, lead + (2, h, w))
    dtype = np.result_type(values.dtype, flow.dtype)
    fx, fy, coef, valid, target = _splat_footprint(fd, h, w, dtype)

    n_lead = int(np.prod(lead)) if lead else 1
    hw = h * w
    offsets = (np.arange(n_lead * c).reshape(lead + (c, 1, 1)) * hw)
    bins = (offsets + target.reshape(lead + (1, hw, 4))).reshape(-1)
    contrib = (vd.reshape(lead + (c, hw, 1)) * (coef * valid).reshape(lead + (1, hw, 4))).reshape(-1)
    out = np.bincount(bins, weights=contrib, minlength=n_lead * c * hw)
    out = out.reshape(lead + (c, h, w)).astype(dtype)

    def backward(g):
        gflat = g.reshape(lead + (c, hw))
        tgt = np.broadcast_to(target.reshape(lead + (1, hw * 4)), lead + (c, hw * 4))
        gathered = np.take_along_axis(gflat, tgt, axis=-1).reshape(lead + (c, hw, 4))
        gathered = gathered * valid.reshape(lead + (1, hw, 4))
        g_vals = (gathered * coef.reshape(lead + (1, hw, 4))).sum(axis=-1).reshape(lead + (c, h, w))
        # derivatives of the four corner coefficients w.r.t. the landing point
        fxr = fx.reshape(lead + (hw,))
        fyr = fy.reshape(lead + (hw,))
        dcx = np.stack([-(1 - fyr), 1 - fyr, -fyr, fyr], axis=-1)
        dcy = np.stack([-(1 - fxr), -fxr, 1 - fxr, fxr], axis=-1)
        per_src = (gathered * vd.reshape(lead + (c, hw, 1))).sum(axis=-3)
        du = (per_src * dcx).sum(axis=-1).reshape(lead + (h, w))
        dv = (per_src * dcy).sum(axis=-1).reshape(lead + (h, w))
        g_flow = np.stack([du, dv], axis=-3)
        return (_unbroadcast(g_vals.astype(values.dtype), values.shape),
                _unbroadcast(g_flow.astype(flow.dtype), flow.shape))

    return _finish(out, (values, flow), backward)


@dataclass
class SplatAccumulator:
    """Numerator and denominator of the softmax-weighted fusion, before division.

    ``numerator`` is ``(..., 3, H, W)``, ``denominator`` ``(..., H, W)``;
    ``max_weight`` records the largest single contribution per target pixel.
    """

    numerator: Tensor
    denominator: Tensor
    max_weight: np.ndarray | None = None

    @classmethod
    def empty(cls, h: int, w: int, channels: int = 3, dtype=np.float32) -> "SplatAccumulator":
        return cls(Tensor(np.zeros((channels, h, w), dtype)), Tensor(np.zeros((h, w), dtype)),
                   np.zeros((h, w), dtype))

    @property
    def holes(self) -> np.ndarray:
        return self.denominator.data <= 0


def splat_forward(colors, weights, flow, acc: SplatAccumulator | None = None,
                  track_max: bool = True) -> SplatAccumulator:
    """Splat ``weights * colors`` and ``weights`` into an accumulator.

    ``flow`` may carry one extra axis of N sub-motion vectors directly before
    the ``2`` axis; every sub-vector carries the pixel's full weight.
    """
    colors, weights, flow = as_tensor(colors), as_tensor(weights), as_tensor(flow)
    wd = weights.data
    if not np.all(np.isfinite(wd)):
        raise ValueError("splat weights contain non-finite values")
    if np.any(wd < 0):
        raise ValueError("splat weights must be non-negative")
    check_flow(flow.data)
    multi = flow.ndim == colors.ndim + 1
    wexp = weights.reshape(weights.shape[:-2] + (1,) + weights.shape[-2:])
    values = concat([colors * wexp, wexp], axis=-3)
    if multi:
        values = values.reshape(values.shape[:-3] + (1,) + values.shape[-3:])
    out = splat(values, flow)
    if multi:
        out = out.sum(axis=-4)
    num, den = out[..., :-1, :, :], out[..., -1, :, :]

    max_weight = None
    if track_max:
        max_weight = _max_contribution(wd, flow.data, multi)
    if acc is not None:
        num = acc.numerator + num
        den = acc.denominator + den
        if track_max and acc.max_weight is not None:
            max_weight = np.maximum(acc.max_weight, max_weight)
    return SplatAccumulator(num, den, max_weight)


def _max_contribution(weights: np.ndarray, flow: np.ndarray, multi: bool) -> np.ndarray:
    h, w = flow.shape[-2:]
    if multi:
        weights = np.expand_dims(weights, -3)
    lead = np.broadcast_shapes(weights.shape[:-2], flow.shape[:-3])
    fd = np.broadcast_to(flow, lead + (2, h, w))
    _, _, coef, valid, target = _splat_footprint(fd, h, w, weights.dtype)
    contrib = np.broadcast_to(weights, lead + (h, w))[..., None] * coef * valid
    per = lead[-1] if multi else 1
    out_lead = lead[:-1] if multi else lead
    n_out = int(np.prod(out_lead)) if out_lead else 1
    owner = (np.arange(int(np.prod(lead)) if lead else 1) // per).reshape(lead + (1, 1, 1))
    out = np.zeros(n_out * h * w, dtype=weights.dtype)
    np.maximum.at(out, (owner * (h * w) + target).reshape(-1), contrib.reshape(-1))
    return out.reshape(out_lead + (h, w))


def resize_bilinear(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Half-pixel-centred bilinear resize of the last two axes."""
    h, w = arr.shape[-2:]
    hn, wn = size
    if (h, w) == (hn, wn):
        return arr.copy()

    def axis_coords(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        i0 = np.clip(np.floor(pos).astype(np.int64), 0, max(n_in - 2, 0))
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (pos - i0).astype(arr.dtype)

    y0, y1, fy = axis_coords(h, hn)
    x0, x1, fx = axis_coords(w, wn)
    rows = arr[..., y0, :] * (1 - fy)[:, None] + arr[..., y1, :] * fy[:, None]
    return rows[..., x0] * (1 - fx) + rows[..., x1] * fx


def resize_flow(flow: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize a ``(..., 2, h, w)`` flow and rescale its vectors to the new grid."""
    flow = np.asarray(flow)
    h, w = flow.shape[-2:]
    out = resize_bilinear(flow, size)
    scale = np.array([size[1] / w, size[0] / h], dtype=flow.dtype).reshape((2, 1, 1))
    return (out * scale).astype(flow.dtype)
