"""Toy-scale end-to-end training on synthetic triplets."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .coarse_flow import CoarseFlowConfig
from .mrn import MotionRefinementNet, MrnConfig
from .pipeline import coarse_flows, compute_psnr, synthesize
from .scenes import SyntheticScene, Triplet
from .tensor import GradTape, Tensor, as_tensor, no_tape
from .warp import FlowRangeError

log = logging.getLogger(__name__)

GRAY = np.array([0.299, 0.587, 0.114])
CENSUS_SIGMA = 0.1
CENSUS_DIST_EPS = 0.1


class TrainingDiverged(RuntimeError):
    pass


# ------------------------------------------------------------------ losses


def charbonnier_loss(pred, gt, eps: float = 1e-3) -> Tensor:
    pred, gt = as_tensor(pred), as_tensor(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    d = pred - gt
    return T.sqrt(T.square(d) + eps * eps).mean()


def _gray(x: Tensor) -> Tensor:
    w = GRAY.astype(x.dtype).reshape(3, 1, 1)
    return T.mul(x, w).sum(axis=-3)


def _soft_census(gray: Tensor) -> list[Tensor]:
    """Soft signs of neighbour-minus-centre differences over the interior."""
    h, w = gray.shape[-2:]
    centre = gray[..., 1:h - 1, 1:w - 1]
    out = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            d = gray[..., 1 + dy:h - 1 + dy, 1 + dx:w - 1 + dx] - centre
            out.append(d / T.sqrt(T.square(d) + CENSUS_SIGMA ** 2))
    return out


def census_loss(pred, gt) -> Tensor:
    """Soft Hamming distance of 3x3 census transforms on luminance, mean over interior pixels."""
    pred, gt = as_tensor(pred), as_tensor(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.shape[-3] != 3:
        raise ValueError("census_loss expects 3-channel images")
    if min(pred.shape[-2:]) < 3:
        raise ValueError("images smaller than the 3x3 census window")
    total = None
    cp, cg = _soft_census(_gray(pred)), _soft_census(_gray(gt))
    for a, b in zip(cp, cg):
        d2 = T.square(a - b)
        term = d2 / (d2 + CENSUS_DIST_EPS)
        total = term if total is None else total + term
    return (total / len(cp)).mean()


def total_loss(pred, gt) -> tuple[Tensor, Tensor, Tensor]:
    lc = charbonnier_loss(pred, gt)
    ls = census_loss(pred, gt)
    return lc + ls, lc, ls


# ------------------------------------------------------------------ optimizer


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0) -> bool:
    """One Adam update with decoupled weight decay, in place on ``params`` (name -> Tensor).

    A missing gradient counts as zero.  Returns False (and records the step)
    when any gradient is non-finite; nothing is updated in that case.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and np.shape(g) != p.shape:
            raise ValueError(f"gradient shape {np.shape(g)} != parameter {name} {p.shape}")
        if g is not None and not np.all(np.isfinite(g)):
            state.skipped.append(state.step + 1)
            log.warning("non-finite gradient for %s at step %d; update skipped", name, state.step + 1)
            return False
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros(p.shape, np.float64) if g is None else np.asarray(g, np.float64)
        m = state.m.get(name, np.zeros(p.shape))
        v = state.v.get(name, np.zeros(p.shape))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.dtype)
    return True


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Rescale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns the norm."""
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()
                             if g is not None)))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k, g in grads.items():
            if g is not None:
                grads[k] = g * scale
    return norm


def cosine_lr(it: int, total: int, lr_max: float, lr_min: float = 0.0) -> float:
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + np.cos(np.pi * it / max(total, 1)))


# ------------------------------------------------------------------ data


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch: int = 4
    crop: int = 32
    lr: float = 2e-3
    lr_min: float = 0.0
    weight_decay: float = 1e-4
    grad_clip: float = 1.0  # global norm; 0 disables
    seed: int = 0
    kinds: tuple = ("translation", "zoom")
    eval_kinds: tuple = ("translation",)
    t: float = 0.5
    flip_spatial: bool = True
    flip_temporal: bool = True
    color_jitter: bool = True
    max_shift: float = 6.0
    flow_source: str = "estimator"  # or "gt"
    held_out: int = 16
    log_every: int = 50

    def __post_init__(self):
        if self.iterations < 1 or self.batch < 1:
            raise ValueError("iterations and batch must be positive")
        if self.flow_source not in ("estimator", "gt"):
            raise ValueError(f"unknown flow source {self.flow_source!r}")
        self.kinds = tuple(self.kinds)
        self.eval_kinds = tuple(self.eval_kinds)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            if key not in known:
                raise KeyError(f"unknown training option {key!r}")
            default = getattr(cls, key, None) if key not in ("kinds", "eval_kinds") else ()
            if key in ("kinds", "eval_kinds"):
                kw[key] = tuple(k.strip() for k in str(raw).split(",") if k.strip()) if isinstance(raw, str) else tuple(raw)
            elif isinstance(default, bool):
                kw[key] = raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                kw[key] = int(raw)
            elif isinstance(default, float):
                kw[key] = float(raw)
            else:
                kw[key] = raw
        return cls(**kw)


def flip_triplet(tri: Triplet, horizontal: bool = False, vertical: bool = False) -> Triplet:
    """Mirror frames and flows; flow components change sign along the mirrored axis."""
    def img(x):
        if horizontal:
            x = x[..., ::-1]
        if vertical:
            x = x[..., ::-1, :]
        return np.ascontiguousarray(x)

    def flow(f):
        f = img(f).copy()
        if horizontal:
            f[0] = -f[0]
        if vertical:
            f[1] = -f[1]
        return f

    return Triplet(img(tri.I0), img(tri.It), img(tri.I1), flow(tri.F01), flow(tri.F10), tri.t)


def reverse_triplet(tri: Triplet) -> Triplet:
    """Swap the end frames; the target sits at 1 - t."""
    return Triplet(tri.I1, tri.It, tri.I0, tri.F10, tri.F01, 1.0 - tri.t)


def augment(tri: Triplet, rng: np.random.Generator, cfg: TrainConfig) -> Triplet:
    if cfg.flip_spatial:
        tri = flip_triplet(tri, bool(rng.random() < 0.5), bool(rng.random() < 0.5))
    if cfg.flip_temporal and rng.random() < 0.5:
        tri = reverse_triplet(tri)
    if cfg.color_jitter:
        gain = rng.uniform(0.9, 1.1, size=(3, 1, 1)).astype(np.float32)
        bias = np.float32(rng.uniform(-0.05, 0.05))
        tri = Triplet(*(np.clip(x * gain + bias, 0, 1).astype(np.float32) for x in (tri.I0, tri.It, tri.I1)),
                      tri.F01, tri.F10, tri.t)
    return tri


def batch_inputs(triplets, net_cfg: MrnConfig, flow_source: str = "estimator"):
    """Stack triplets and attach coarse flows; all must share t."""
    ts = {tri.t for tri in triplets}
    if len(ts) != 1:
        raise ValueError("a batch must share one time step")
    I0 = np.stack([tri.I0 for tri in triplets])
    I1 = np.stack([tri.I1 for tri in triplets])
    It = np.stack([tri.It for tri in triplets])
    ccfg = CoarseFlowConfig(downscale=net_cfg.downscale)
    pairs = [coarse_flows(tri.I0, tri.I1, net_cfg.downscale, ccfg,
                          (tri.F01, tri.F10) if flow_source == "gt" else None) for tri in triplets]
    f01 = np.stack([p[0] for p in pairs])
    f10 = np.stack([p[1] for p in pairs])
    return I0, I1, It, f01, f10, ts.pop()


def sample_batch(rng: np.random.Generator, cfg: TrainConfig, net_cfg: MrnConfig):
    tris = []
    for _ in range(cfg.batch):
        kind = cfg.kinds[int(rng.integers(len(cfg.kinds)))]
        tri = SyntheticScene(kind, max_shift=cfg.max_shift).sample(rng, cfg.crop, cfg.t)
        tris.append(augment(tri, rng, cfg))
    # temporal flips keep t only at 0.5; otherwise regroup to one t per batch
    if len({tri.t for tri in tris}) > 1:
        tris = [tri if tri.t == cfg.t else reverse_triplet(tri) for tri in tris]
    return batch_inputs(tris, net_cfg, cfg.flow_source)


def held_out_suite(cfg: TrainConfig, kinds=None, count=None, seed_offset: int = 10_000) -> list[Triplet]:
    """Fixed evaluation scenes, drawn from a seed stream disjoint from training."""
    rng = np.random.default_rng(cfg.seed + seed_offset)
    kinds = kinds or cfg.kinds
    count = count or cfg.held_out
    return [SyntheticScene(kinds[i % len(kinds)], max_shift=cfg.max_shift).sample(rng, cfg.crop, cfg.t)
            for i in range(count)]


def evaluate(net: MotionRefinementNet, triplets, flow_source: str = "estimator", n_use=None) -> dict:
    """Mean losses and PSNR of the unfilled output against ground truth."""
    I0, I1, It, f01, f10, t = batch_inputs(triplets, net.cfg, flow_source)
    with no_tape():
        res = synthesize(net, I0, I1, f01, f10, t, n_use=n_use)
        tot, lc, ls = total_loss(res.frame, It)
    pred = res.frame.data
    psnr = float(np.mean([compute_psnr(np.clip(p, 0, 1), g) for p, g in zip(pred, It)]))
    return {"loss": tot.item(), "charbonnier": lc.item(), "census": ls.item(), "psnr": psnr}


# ------------------------------------------------------------------ training loop


@dataclass
class TrainResult:
    net: MotionRefinementNet
    losses: list  # (iteration, L_char, L_cen, total)
    initial_eval: dict
    final_eval: dict


def train_toy(cfg: TrainConfig, model: MrnConfig | None = None, out: str | Path | None = None,
              loss_csv: str | Path | None = None, eval_set=None) -> TrainResult:
    """Train refinement weights and alpha jointly through splat and fuse."""
    model = model or MrnConfig.toy()
    net = MotionRefinementNet(model, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    eval_set = eval_set if eval_set is not None else held_out_suite(cfg, kinds=cfg.eval_kinds)
    initial = evaluate(net, eval_set, cfg.flow_source)
    params = net.parameters()
    state = AdamState()
    losses = []
    for it in range(cfg.iterations):
        I0, I1, It, f01, f10, t = sample_batch(rng, cfg, model)
        net.zero_grad()
        try:
            with GradTape() as tape:
                res = synthesize(net, I0, I1, f01, f10, t)
                tot, lc, ls = total_loss(res.frame, It)
        except (FloatingPointError, FlowRangeError) as exc:
            raise TrainingDiverged(f"loss became non-finite at iteration {it}: {exc}") from None
        if not np.isfinite(tot.item()):
            raise TrainingDiverged(f"loss became non-finite at iteration {it}")
        tape.backward(tot)
        lr = cosine_lr(it, cfg.iterations, cfg.lr, cfg.lr_min)
        grads = {k: p.grad for k, p in params.items()}
        clip_grad_norm(grads, cfg.grad_clip)
        adam_step(params, grads, state, lr, cfg.weight_decay)
        losses.append((it, lc.item(), ls.item(), tot.item()))
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("iter %d loss %.5f (char %.5f, census %.5f) lr %.2e", it, tot.item(), lc.item(), ls.item(), lr)
    final = evaluate(net, eval_set, cfg.flow_source)
    if out is not None:
        net.save(out)
    if loss_csv is not None:
        write_loss_csv(loss_csv, losses)
    return TrainResult(net, losses, initial, final)


def write_loss_csv(path, losses) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iteration", "L_char", "L_cen", "total"])
        for it, lc, ls, tot in losses:
            wr.writerow([it, repr(lc), repr(ls), repr(tot)])
