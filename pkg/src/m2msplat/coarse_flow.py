"""Pyramidal SAD block matching, used when no external initial flow is given."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .tensor import add_flops
from .warp import resize_bilinear


@dataclass
class CoarseFlowConfig:
    levels: int = 3
    block: int = 8
    radius: int = 4
    downscale: int = 4
    subpixel: bool = True

    def __post_init__(self):
        if self.block < 4:
            raise ValueError("block size must be >= 4")
        if self.radius < 1:
            raise ValueError("search radius must be >= 1")
        if self.levels < 1 or self.downscale < 1:
            raise ValueError("levels and downscale must be >= 1")

    @property
    def max_displacement(self) -> float:
        """Largest reachable displacement per component, in coarse pixels."""
        return float(self.radius * (2 ** self.levels - 1))


def _downsample(img: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return img.astype(np.float64)
    c, h, w = img.shape
    if h % factor == 0 and w % factor == 0:
        return img.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    return resize_bilinear(img.astype(np.float64), (h // factor, w // factor))


def _candidates(radius: int) -> list[tuple[int, int]]:
    # tie-break order: smallest magnitude first, then lexicographic (u, v)
    offs = [(u, v) for u in range(-radius, radius + 1) for v in range(-radius, radius + 1)]
    return sorted(offs, key=lambda d: (d[0] ** 2 + d[1] ** 2, d[0], d[1]))


def _match_level(a: np.ndarray, b: np.ndarray, base: np.ndarray, cfg: CoarseFlowConfig,
                 subpixel: bool, chunk: int = 64) -> np.ndarray:
    """Dense integer refinement of ``base`` (2, H, W) around each pixel.

    Window costs are only meaningful when every pixel in the window is
    tested at the same displacement, so a box-filtered SAD map is built per
    absolute displacement and each pixel reads the maps within its radius.
    """
    _, h, w = a.shape
    r = cfg.radius
    ys, xs = np.mgrid[0:h, 0:w]
    cands = np.array(_candidates(r))
    lookup = np.zeros((2 * r + 1, 2 * r + 1), dtype=np.int64)
    lookup[cands[:, 0] + r, cands[:, 1] + r] = np.arange(len(cands))
    base = base.astype(np.int64)
    lo, hi = base.reshape(2, -1).min(axis=1) - r, base.reshape(2, -1).max(axis=1) + r
    disp = np.stack(np.meshgrid(np.arange(lo[0], hi[0] + 1), np.arange(lo[1], hi[1] + 1),
                                indexing="ij"), -1).reshape(-1, 2)
    costs = np.empty((len(cands), h, w))
    for i in range(0, len(disp), chunk):
        d = disp[i:i + chunk]
        du, dv = d[:, 0, None, None], d[:, 1, None, None]
        tx = np.clip(xs + du, 0, w - 1)
        ty = np.clip(ys + dv, 0, h - 1)
        sad = np.abs(a[:, None] - b[:, ty, tx]).sum(axis=0)
        vol = ndimage.uniform_filter(sad, size=(1, cfg.block, cfg.block), mode="nearest")
        rel_u = du - base[0]
        rel_v = dv - base[1]
        inside = (np.abs(rel_u) <= r) & (np.abs(rel_v) <= r)
        k = lookup[np.clip(rel_u, -r, r) + r, np.clip(rel_v, -r, r) + r]
        _, py, px = np.nonzero(inside)
        costs[k[inside], py, px] = vol[inside]
    # per candidate and pixel: 3-channel abs diff and sum, plus the box filter
    add_flops(len(cands) * h * w * 12)
    best = np.argmin(costs, axis=0)  # first minimum = tie-break order
    step = cands[best].transpose(2, 0, 1)
    flow = (base + step).astype(np.float64)
    if subpixel:
        c0 = np.take_along_axis(costs, best[None], 0)[0]
        flow += _parabola(costs, cands, step, c0, r)
    return flow


def _parabola(costs, cands, d, c0, radius) -> np.ndarray:
    """Per-axis parabolic offsets in [-0.5, 0.5] around interior integer minima."""
    r = radius
    lookup = np.zeros((2 * r + 1, 2 * r + 1), dtype=np.int64)
    lookup[cands[:, 0] + r, cands[:, 1] + r] = np.arange(len(cands))
    inner = (np.abs(d[0]) < r) & (np.abs(d[1]) < r) & (c0 > 0)
    u = np.clip(d[0], -r + 1, r - 1) + r
    v = np.clip(d[1], -r + 1, r - 1) + r
    out = np.zeros((2,) + c0.shape)
    for axis, (lo, hi) in enumerate((((u - 1, v), (u + 1, v)), ((u, v - 1), (u, v + 1)))):
        cm = np.take_along_axis(costs, lookup[lo][None], 0)[0]
        cp = np.take_along_axis(costs, lookup[hi][None], 0)[0]
        curv = cm - 2 * c0 + cp
        ok = inner & (curv > 0)
        off = np.divide(cm - cp, 2 * curv, out=np.zeros_like(curv), where=ok)
        out[axis] = np.clip(off, -0.5, 0.5)
    return out


def _estimate_one(a: np.ndarray, b: np.ndarray, cfg: CoarseFlowConfig) -> np.ndarray:
    pyr_a, pyr_b = [a], [b]
    for _ in range(cfg.levels - 1):
        pyr_a.append(_downsample(pyr_a[-1], 2))
        pyr_b.append(_downsample(pyr_b[-1], 2))
    flow = np.zeros((2,) + pyr_a[-1].shape[1:])
    for lvl in range(cfg.levels - 1, -1, -1):
        shape = pyr_a[lvl].shape[1:]
        if flow.shape[1:] != shape:
            ry = np.minimum((np.arange(shape[0]) // 2), flow.shape[1] - 1)
            rx = np.minimum((np.arange(shape[1]) // 2), flow.shape[2] - 1)
            flow = 2 * flow[:, ry][:, :, rx]
        flow = _match_level(pyr_a[lvl], pyr_b[lvl], np.round(flow), cfg, cfg.subpixel and lvl == 0)
    return flow


def estimate_coarse_flow(I0, I1, cfg: CoarseFlowConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Bidirectional flow at 1/``downscale`` resolution, in coarse-pixel units.

    Images are (3, H, W).  Each direction is matched independently.
    """
    cfg = cfg or CoarseFlowConfig()
    I0, I1 = np.asarray(I0), np.asarray(I1)
    if I0.shape != I1.shape:
        raise ValueError(f"frame shapes differ: {I0.shape} vs {I1.shape}")
    a = _downsample(I0, cfg.downscale)
    b = _downsample(I1, cfg.downscale)
    coarsest = min(a.shape[1:]) // 2 ** (cfg.levels - 1)
    if coarsest < cfg.block:
        raise ValueError(f"images too small: coarsest level {coarsest}px is below block size {cfg.block}")
    f01 = _estimate_one(a, b, cfg).astype(np.float32)
    f10 = _estimate_one(b, a, cfg).astype(np.float32)
    return f01, f10


def fit_config(cfg: CoarseFlowConfig, shape: tuple[int, int]) -> CoarseFlowConfig:
    """Shrink pyramid depth (then block size) so a full-resolution ``shape`` is matchable."""
    side = min(shape) // cfg.downscale
    if side < 4:
        raise ValueError(f"image {shape} too small for coarse matching at 1/{cfg.downscale}")
    block = min(cfg.block, side)
    levels = cfg.levels
    while levels > 1 and side // 2 ** (levels - 1) < block:
        levels -= 1
    return CoarseFlowConfig(levels, block, cfg.radius, cfg.downscale, cfg.subpixel)
