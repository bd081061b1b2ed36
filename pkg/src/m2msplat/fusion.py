"""Fusion weights, softmax-weighted merge of splatted pixels, and holes."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from . import tensor as T
from .tensor import Tensor, _finish, as_tensor
from .warp import SplatAccumulator, backward_warp

HOLE_EPS = 1e-8
# guards exp() against overflow when reliability scores drift far from zero
WEIGHT_EXPONENT_CLIP = 30.0


def temporal_relevance(t: float) -> tuple[float, float]:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    return 1.0 - t, t


def brightness_consistency(I0, I1, F01, F10, multi: bool | None = None) -> tuple[Tensor, Tensor]:
    """Negated L1 color error between each frame and the other one warped onto it.

    Returns ``(b0, b1)`` shaped ``(..., H, W)``; both are <= 0.  When the
    flows carry N sub-motion vectors (``multi=True``, or inferred when the
    flow has one more axis than the images) their per-pixel mean is used.
    """
    I0, I1, F01, F10 = (as_tensor(a) for a in (I0, I1, F01, F10))
    if I0.shape != I1.shape:
        raise ValueError(f"frame shapes differ: {I0.shape} vs {I1.shape}")
    if multi is None:
        multi = F01.ndim == I0.ndim + 1
    if multi:
        F01, F10 = F01.mean(axis=-4), F10.mean(axis=-4)
    b0 = -T.abs_(I0 - backward_warp(I1, F01)).sum(axis=-3)
    b1 = -T.abs_(I1 - backward_warp(I0, F10)).sum(axis=-3)
    return b0, b1


def fusion_weight(b, s, alpha, r: float) -> Tensor:
    """Per-pixel splat weight exp(b * s * alpha) * r."""
    z = T.mul(T.mul(b, s), alpha)
    return T.mul(T.exp(T.clip(z, -WEIGHT_EXPONENT_CLIP, WEIGHT_EXPONENT_CLIP)), r)


def safe_divide(num, den, eps: float = HOLE_EPS) -> tuple[Tensor, np.ndarray]:
    """``num / den`` (den broadcast over channel axis -3) where den > eps, else 0."""
    num, den = as_tensor(num), as_tensor(den)
    holes = den.data <= eps
    d = np.where(holes, 1.0, den.data)[..., None, :, :]
    keep = ~holes[..., None, :, :]
    out = np.where(keep, num.data / d, 0.0).astype(num.dtype)

    def backward(g):
        g = np.where(keep, g, 0.0)
        g_num = g / d
        g_den = -(g * out / d).sum(axis=-3)
        return g_num.astype(num.dtype), g_den.astype(den.dtype)

    return _finish(out, (num, den), backward), holes


def fuse(acc: SplatAccumulator, eps: float = HOLE_EPS) -> tuple[Tensor, np.ndarray]:
    """Divide the accumulated numerator by the denominator; returns (image, holes)."""
    return safe_divide(acc.numerator, acc.denominator, eps)


def fill_holes(It, holes, I0, I1, motion, t: float) -> np.ndarray:
    """Fill hole pixels with a blend of both inputs warped to time ``t``.

    ``motion`` is the splatted frame-0-to-frame-1 motion at time ``t``
    (``(2, H, W)``).  A hole takes the motion of its nearest non-hole pixel
    ``m``, then receives ``(1-t) * I0(p - t m) + t * I1(p + (1-t) m)``.
    Non-hole pixels are returned unchanged.
    """
    It = np.asarray(It)
    holes = np.asarray(holes, dtype=bool)
    if not holes.any():
        return It.copy()
    I0, I1 = np.asarray(I0), np.asarray(I1)
    h, w = holes.shape
    if motion is None or holes.all():
        m = np.zeros((2, h, w), dtype=It.dtype)
    else:
        m = np.asarray(motion)
        _, (iy, ix) = ndimage.distance_transform_edt(holes, return_indices=True)
        m = m[:, iy, ix]
    from_0 = backward_warp(I0, -t * m).data
    from_1 = backward_warp(I1, (1.0 - t) * m).data
    blend = ((1.0 - t) * from_0 + t * from_1).astype(It.dtype)
    return np.where(holes[None], blend, It)


def count_holes(holes) -> float:
    """Hole pixels per frame; a stack of masks is averaged over its frames."""
    holes = np.asarray(holes, dtype=bool)
    if holes.ndim <= 2:
        return float(holes.sum())
    return float(holes.reshape(-1, *holes.shape[-2:]).sum(axis=(1, 2)).mean())
