"""Interpolation orchestration: motion once per pair, then cheap per-time rendering."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from . import tensor as T
from .coarse_flow import CoarseFlowConfig, estimate_coarse_flow, fit_config
from .fusion import (brightness_consistency, count_holes, fill_holes, fuse, fusion_weight,
                     temporal_relevance)
from .mrn import MotionRefinementNet, MrnOutput
from .tensor import FlopCounter, Tensor, as_tensor, no_tape
from .warp import resize_flow, scale_flow, splat_forward

PSNR_CAP = 99.0
# bookkeeping constants; only their internal consistency matters
SPLAT_FLOPS_PER_CONTRIB = 10
FILL_FLOPS_PER_PIXEL = 30
BRIGHTNESS_FLOPS_PER_PIXEL = 40


# ------------------------------------------------------------------ metrics


def compute_psnr(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"size mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10 * np.log10(1.0 / mse)))


def compute_ssim(a, b, sigma: float = 1.5, win: int = 11) -> float:
    """Mean SSIM over channels with a Gaussian window; images (C, H, W) or (H, W)."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"size mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < win:
        raise ValueError(f"images smaller than the {win}x{win} SSIM window")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    r = win // 2

    def filt(x):
        out = ndimage.gaussian_filter(x, sigma=(0, sigma, sigma), truncate=r / sigma, mode="reflect")
        return out[:, r:-r, r:-r]  # keep only fully supported windows

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


# ------------------------------------------------------------------ padding


def pad_to_multiple(img: np.ndarray, multiple: int, min_size: int = 0) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """Edge-replicate the last two axes up to a multiple, split evenly on both sides.

    Each extent is first raised to at least ``min_size``.
    """
    h, w = img.shape[-2:]
    ph = max(h, min_size) - h
    pw = max(w, min_size) - w
    ph += -(h + ph) % multiple
    pw += -(w + pw) % multiple
    pads = (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    width = [(0, 0)] * (img.ndim - 2) + [pads[:2], pads[2:]]
    return np.pad(img, width, mode="edge"), pads


def crop(img: np.ndarray, pads: tuple[int, int, int, int]) -> np.ndarray:
    top, bottom, left, right = pads
    h, w = img.shape[-2:]
    return img[..., top:h - bottom, left:w - right]


# ------------------------------------------------------------------ rendering


@dataclass
class MotionState:
    """Everything shared by all time steps of one input pair."""

    I0: Tensor
    I1: Tensor
    flows01: Tensor  # (..., N, 2, H, W)
    flows10: Tensor
    s0: Tensor
    s1: Tensor
    b0: Tensor
    b1: Tensor
    alpha: Tensor

    @property
    def n_flows(self) -> int:
        return self.flows01.shape[-4]


@dataclass
class Rendered:
    frame: Tensor  # (..., 3, H, W), holes are 0
    holes: np.ndarray  # (..., H, W)
    motion: np.ndarray | None = None  # splatted 0->1 motion at time t


def _head_subset(flows: Tensor, n: int | None) -> Tensor:
    if n is None or n == flows.shape[-4]:
        return flows
    if not 1 <= n <= flows.shape[-4]:
        raise ValueError(f"cannot take {n} of {flows.shape[-4]} sub-motion fields")
    index = (slice(None),) * (flows.ndim - 4) + (slice(0, n),)
    return flows[index]


def prepare_motion(I0, I1, out: MrnOutput, alpha, n_use: int | None = None) -> MotionState:
    """Select sub-motion heads and compute the brightness terms (time-independent)."""
    I0, I1 = as_tensor(I0), as_tensor(I1)
    f01 = _head_subset(out.flows01, n_use)
    f10 = _head_subset(out.flows10, n_use)
    b0, b1 = brightness_consistency(I0, I1, f01, f10, multi=True)
    return MotionState(I0, I1, f01, f10, out.s0, out.s1, b0, b1, as_tensor(alpha))


def render(state: MotionState, t: float, with_motion: bool = False) -> Rendered:
    """Scale, splat both frames and fuse at time ``t``."""
    r0, r1 = temporal_relevance(t)
    w0 = fusion_weight(state.b0, state.s0, state.alpha, r0)
    w1 = fusion_weight(state.b1, state.s1, state.alpha, r1)
    c0, c1 = state.I0, state.I1
    if with_motion:
        m01 = state.flows01.data.mean(axis=-4)
        m10 = state.flows10.data.mean(axis=-4)
        c0 = T.concat([c0, Tensor(m01)], axis=-3)
        c1 = T.concat([c1, Tensor(-m10)], axis=-3)
    acc = splat_forward(c0, w0, scale_flow(state.flows01, t, 0), track_max=False)
    acc = splat_forward(c1, w1, scale_flow(state.flows10, t, 1), acc, track_max=False)
    out, holes = fuse(acc)
    if not with_motion:
        return Rendered(out, holes)
    frame = out[(Ellipsis, slice(0, 3), slice(None), slice(None))]
    return Rendered(frame, holes, out.data[..., 3:, :, :])


def synthesize(net: MotionRefinementNet, I0, I1, f01_coarse, f10_coarse, t: float = 0.5,
               n_use: int | None = None, with_motion: bool = False) -> Rendered:
    """Differentiable end-to-end path used for training and evaluation."""
    out = net(I0, I1, f01_coarse, f10_coarse)
    state = prepare_motion(I0, I1, out, net.alpha, n_use)
    return render(state, t, with_motion)


def coarse_flows(I0, I1, downscale: int, cfg: CoarseFlowConfig | None = None,
                 external: tuple | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Initial flow at 1/``downscale``: resized external full-res flows, or the built-in estimator."""
    h, w = np.shape(I0)[-2:]
    size = (h // downscale, w // downscale)
    if external is not None:
        f01, f10 = (np.asarray(f, np.float32) for f in external)
        return resize_flow(f01, size), resize_flow(f10, size)
    cfg = cfg or CoarseFlowConfig(downscale=downscale)
    if cfg.downscale != downscale:
        raise ValueError(f"estimator downscale {cfg.downscale} != model downscale {downscale}")
    return estimate_coarse_flow(I0, I1, fit_config(cfg, (h, w)))


# ------------------------------------------------------------------ requests


@dataclass
class InterpolationRequest:
    I0: np.ndarray  # (3, H, W) in [0, 1]
    I1: np.ndarray
    times: Sequence[float]
    model: MotionRefinementNet | str | Path | None = None
    flows: tuple[np.ndarray, np.ndarray] | None = None  # external (F01, F10), (2, h, w) each
    fill_holes: bool = True
    n_flows: int | None = None
    coarse_cfg: CoarseFlowConfig | None = None

    def __post_init__(self):
        self.I0 = np.asarray(self.I0, np.float32)
        self.I1 = np.asarray(self.I1, np.float32)
        if self.I0.ndim != 3 or self.I0.shape[0] != 3:
            raise ValueError(f"images must be (3, H, W), got {self.I0.shape}")
        if self.I0.shape != self.I1.shape:
            raise ValueError(f"image sizes differ: {self.I0.shape} vs {self.I1.shape}")
        self.times = [float(t) for t in self.times]
        if not self.times:
            raise ValueError("times must not be empty")
        if any(not 0.0 < t < 1.0 for t in self.times):
            raise ValueError(f"times must lie in (0, 1): {self.times}")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError(f"times must be strictly increasing: {self.times}")
        if self.flows is not None:
            if len(self.flows) != 2:
                raise ValueError("flows must be a (F01, F10) pair")
            for f in self.flows:
                if np.ndim(f) != 3 or np.shape(f)[0] != 2:
                    raise ValueError(f"external flow must be (2, h, w), got {np.shape(f)}")


@dataclass
class ComputeLedger:
    shared_flops: int = 0
    unshared_flops: int = 0
    mrn_invocations: int = 0
    stage_ms: dict = field(default_factory=dict)
    step_unshared_flops: list = field(default_factory=list)
    holes: list = field(default_factory=list)

    def add_time(self, stage: str, seconds: float) -> None:
        self.stage_ms[stage] = self.stage_ms.get(stage, 0.0) + 1000.0 * seconds

    def merge_step(self, step: "ComputeLedger") -> None:
        self.unshared_flops += step.unshared_flops
        self.step_unshared_flops.append(step.unshared_flops)
        self.holes.extend(step.holes)
        for k, v in step.stage_ms.items():
            self.stage_ms[k] = self.stage_ms.get(k, 0.0) + v

    @property
    def shared_ms(self) -> float:
        return sum(v for k, v in self.stage_ms.items() if k in SHARED_STAGES)

    @property
    def unshared_ms(self) -> float:
        return sum(v for k, v in self.stage_ms.items() if k not in SHARED_STAGES)

    def to_dict(self) -> dict:
        return {
            "shared_flops": self.shared_flops,
            "unshared_flops": self.unshared_flops,
            "mrn_invocations": self.mrn_invocations,
            "step_unshared_flops": list(self.step_unshared_flops),
            "holes": list(self.holes),
            "stage_ms": {k: round(v, 3) for k, v in self.stage_ms.items()},
            "shared_ms": round(self.shared_ms, 3),
            "unshared_ms": round(self.unshared_ms, 3),
        }


SHARED_STAGES = ("coarse_flow", "mrn", "brightness")


def model_padding(cfg) -> tuple[int, int]:
    """(multiple, minimum extent) so the coarsest feature map is larger than the rank."""
    scale = 2 ** cfg.levels
    return cfg.divisor, (cfg.rank + 1) * scale


def pad_for(img: np.ndarray, cfg):
    return pad_to_multiple(img, *model_padding(cfg))


def _load_model(model) -> MotionRefinementNet:
    if model is None:
        raise ValueError("no model given")
    if isinstance(model, MotionRefinementNet):
        return model
    path = Path(model)
    if not path.is_file():
        raise FileNotFoundError(f"model checkpoint not found: {path}")
    return MotionRefinementNet.load(path)


def interpolate(req: InterpolationRequest, return_holes: bool = False):
    """Render every requested time step; returns ``(frames, ledger[, hole masks])``.

    Coarse flow, the refinement network and the brightness terms run once;
    each time step then only scales, splats, fuses and optionally fills.
    """
    net = _load_model(req.model)
    cfg = net.cfg
    ledger = ComputeLedger()
    I0p, pads = pad_for(req.I0, cfg)
    I1p, _ = pad_for(req.I1, cfg)
    hp, wp = I0p.shape[-2:]

    with no_tape():
        with FlopCounter() as fc:
            tic = time.perf_counter()
            external = None
            if req.flows is not None:
                h, w = req.I0.shape[-2:]
                external = tuple(pad_for(resize_flow(f, (h, w)), cfg)[0] for f in req.flows)
            coarse_cfg = req.coarse_cfg or CoarseFlowConfig(downscale=cfg.downscale)
            f01c, f10c = coarse_flows(I0p, I1p, cfg.downscale, coarse_cfg, external)
            ledger.add_time("coarse_flow", time.perf_counter() - tic)

            tic = time.perf_counter()
            out = net(I0p, I1p, f01c, f10c)
            ledger.mrn_invocations += 1
            ledger.add_time("mrn", time.perf_counter() - tic)

            tic = time.perf_counter()
            state = prepare_motion(I0p, I1p, out, net.alpha, req.n_flows)
            T.add_flops(BRIGHTNESS_FLOPS_PER_PIXEL * hp * wp)
            ledger.add_time("brightness", time.perf_counter() - tic)
        ledger.shared_flops = fc.flops

        frames, masks = [], []
        n = state.n_flows
        for t in req.times:
            step = ComputeLedger()
            tic = time.perf_counter()
            res = render(state, t, with_motion=req.fill_holes)
            step.unshared_flops += SPLAT_FLOPS_PER_CONTRIB * 2 * n * hp * wp
            step.add_time("splat_fuse", time.perf_counter() - tic)
            frame = res.frame.data
            step.holes.append(count_holes(crop(res.holes, pads)))
            if req.fill_holes:
                tic = time.perf_counter()
                frame = fill_holes(frame, res.holes, I0p, I1p, res.motion, t)
                step.unshared_flops += FILL_FLOPS_PER_PIXEL * hp * wp
                step.add_time("fill", time.perf_counter() - tic)
            ledger.merge_step(step)
            frames.append(np.clip(crop(frame, pads), 0.0, 1.0))
            masks.append(crop(res.holes, pads))

    if return_holes:
        return frames, ledger, masks
    return frames, ledger


# ------------------------------------------------------------------ analysis


def sweep_n_flows(triplets, n_list: Sequence[int], models, fill: bool = False,
                  coarse_cfg: CoarseFlowConfig | None = None, flow_source: str = "estimator") -> list[dict]:
    """Hole count and PSNR against each triplet's ground-truth mid frame, per N.

    ``models`` is either one network whose first N heads are used, or a
    mapping ``N -> network``.  Holes are counted before any filling; PSNR
    is measured on the unfilled output unless ``fill`` is set.
    """
    rows = []
    for n in n_list:
        if isinstance(models, Mapping):
            net, n_use = models[n], None
            if net.cfg.n_flows != n:
                raise ValueError(f"model for N={n} has {net.cfg.n_flows} heads")
        else:
            net, n_use = models, n
        holes, psnrs = [], []
        for tri in triplets:
            frame, mask = evaluate_triplet(net, tri, n_use=n_use, fill=fill, coarse_cfg=coarse_cfg,
                                           flow_source=flow_source)
            holes.append(count_holes(mask))
            psnrs.append(compute_psnr(frame, tri.It) if tri.It is not None else np.nan)
        rows.append({"n": int(n), "mean_holes": float(np.mean(holes)), "psnr": float(np.mean(psnrs))})
    return rows


def evaluate_triplet(net: MotionRefinementNet, tri, n_use=None, fill=False,
                     coarse_cfg: CoarseFlowConfig | None = None, flow_source: str = "estimator"):
    """Render ``tri.t`` for one synthetic triplet; returns (frame, hole mask), cropped."""
    external = (tri.F01, tri.F10) if flow_source == "gt" else None
    I0p, pads = pad_for(tri.I0, net.cfg)
    I1p, _ = pad_for(tri.I1, net.cfg)
    if external is not None:
        external = tuple(pad_for(f, net.cfg)[0] for f in external)
    with no_tape():
        f01c, f10c = coarse_flows(I0p, I1p, net.cfg.downscale, coarse_cfg, external)
        res = synthesize(net, I0p, I1p, f01c, f10c, tri.t, n_use=n_use, with_motion=fill)
        frame = res.frame.data
        if fill:
            frame = fill_holes(frame, res.holes, I0p, I1p, res.motion, tri.t)
    return np.clip(crop(frame, pads), 0, 1), crop(res.holes, pads)


def bench(net: MotionRefinementNet, size=(256, 256), times: int = 1, repeat: int = 3, seed: int = 0) -> dict:
    """Median shared and per-frame unshared wall time for ``times`` evenly spaced steps."""
    rng = np.random.default_rng(seed)
    h, w = size
    I0 = rng.random((3, h, w), dtype=np.float32)
    I1 = np.roll(I0, 2, axis=-1)
    ts = [(i + 1) / (times + 1) for i in range(times)]
    shared, unshared, ledger = [], [], None
    for _ in range(repeat):
        _, ledger = interpolate(InterpolationRequest(I0, I1, ts, net, fill_holes=True))
        shared.append(ledger.shared_ms)
        unshared.append(ledger.unshared_ms)
    return {
        "size": f"{w}x{h}",
        "times": times,
        "shared_ms": float(np.median(shared)),
        "unshared_ms": float(np.median(unshared)),
        "unshared_ms_per_frame": float(np.median(unshared)) / times,
        "shared_flops": ledger.shared_flops,
        "unshared_flops": ledger.unshared_flops,
        "mrn_invocations": ledger.mrn_invocations,
    }
