"""Finite-difference gradient checks for every differentiable piece, in float64."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .fusion import brightness_consistency, fuse, fusion_weight, safe_divide
from .mrn import LowRankModulation, MotionRefinementNet, MrnConfig
from .pipeline import synthesize
from .tensor import Tensor, grad_check
from .train import census_loss, charbonnier_loss, total_loss
from .warp import backward_warp, splat, splat_forward

F64 = np.float64


def _t(rng, *shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape).astype(F64))


def _away_from_int(rng, *shape, scale=1.5) -> Tensor:
    """Random flows whose landing points stay clear of integer pixel boundaries."""
    base = rng.integers(-int(scale), int(scale) + 1, size=shape)
    return Tensor((base + rng.uniform(0.1, 0.9, size=shape)).astype(F64))


def op_cases(seed: int = 0) -> dict[str, tuple[Callable, list[Tensor]]]:
    """name -> (function, inputs) for each primitive and the composed splat/fuse path."""
    rng = np.random.default_rng(seed)
    c = {}
    c["add"] = (T.add, [_t(rng, 3, 4), _t(rng, 4)])
    c["sub"] = (T.sub, [_t(rng, 3, 4), _t(rng, 3, 1)])
    c["mul"] = (T.mul, [_t(rng, 2, 3), _t(rng, 2, 3)])
    c["div"] = (T.div, [_t(rng, 2, 3), _t(rng, 2, 3, lo=0.5, hi=2.0)])
    c["exp"] = (T.exp, [_t(rng, 5)])
    c["sqrt"] = (T.sqrt, [_t(rng, 5, lo=0.2, hi=2.0)])
    c["square"] = (T.square, [_t(rng, 5)])
    c["abs"] = (T.abs_, [Tensor(np.array([-0.7, -0.2, 0.3, 0.9]))])
    c["clip"] = (lambda x: T.clip(x, -0.5, 0.5), [Tensor(np.array([-0.9, -0.3, 0.1, 0.45, 0.8]))])
    c["sigmoid"] = (T.sigmoid, [_t(rng, 6, lo=-3, hi=3)])
    c["prelu"] = (T.prelu, [Tensor(np.array([[[-0.8, 0.3]], [[0.5, -0.2]]])), _t(rng, 2, lo=0.1, hi=0.4)])
    c["sum"] = (lambda x: T.sum_(x, axis=1), [_t(rng, 3, 4)])
    c["mean"] = (lambda x: T.mean(x, axis=(0, 2)), [_t(rng, 2, 3, 4)])
    c["reshape"] = (lambda x: T.reshape(x, (6, 2)), [_t(rng, 3, 4)])
    c["getitem"] = (lambda x: x[1:, ::2], [_t(rng, 3, 4)])
    c["concat"] = (lambda a, b: T.concat([a, b], axis=1), [_t(rng, 2, 3), _t(rng, 2, 2)])
    c["stack"] = (lambda a, b: T.stack([a, b], axis=0), [_t(rng, 2, 3), _t(rng, 2, 3)])
    for mode in ("hw", "cw", "ch"):
        c[f"global_avg_pool_{mode}"] = (lambda x, m=mode: T.global_avg_pool(x, m), [_t(rng, 2, 3, 4, 5)])
    c["kronecker_rank1"] = (T.kronecker_rank1, [_t(rng, 2, 3), _t(rng, 2, 4), _t(rng, 2, 5)])
    c["conv2d_s1"] = (lambda x, w, b: T.conv2d(x, w, b, 1, 1),
                      [_t(rng, 2, 3, 6, 6), _t(rng, 4, 3, 3, 3), _t(rng, 4)])
    c["conv2d_s2"] = (lambda x, w, b: T.conv2d(x, w, b, 2, 1),
                      [_t(rng, 1, 2, 7, 7), _t(rng, 3, 2, 3, 3), _t(rng, 3)])
    c["conv_transpose2d"] = (lambda x, w, b: T.conv_transpose2d(x, w, b, 2, 1),
                             [_t(rng, 1, 3, 4, 4), _t(rng, 3, 2, 4, 4), _t(rng, 2)])
    c["backward_warp"] = (backward_warp, [_t(rng, 2, 6, 6), _away_from_int(rng, 2, 6, 6)])
    c["splat"] = (splat, [_t(rng, 2, 6, 6), _away_from_int(rng, 2, 6, 6)])
    c["brightness_consistency"] = (
        lambda a, b, f, g: sum_pair(brightness_consistency(a, b, f, g)),
        [_t(rng, 3, 6, 6, lo=0, hi=1), _t(rng, 3, 6, 6, lo=0, hi=1),
         _away_from_int(rng, 2, 6, 6), _away_from_int(rng, 2, 6, 6)])
    c["fusion_weight"] = (lambda b, s, a: fusion_weight(b, s, a, 0.5),
                          [_t(rng, 4, 4, lo=-2, hi=0), _t(rng, 4, 4), Tensor(np.array(1.3))])
    c["safe_divide"] = (lambda n, d: safe_divide(n, d)[0],
                        [_t(rng, 3, 4, 4), _t(rng, 4, 4, lo=0.2, hi=2.0)])
    c["splat_fuse"] = (_splat_fuse, [_t(rng, 3, 8, 8, lo=0, hi=1), _t(rng, 3, 8, 8, lo=0, hi=1),
                                     _t(rng, 8, 8, lo=-1.5, hi=0), _t(rng, 8, 8, lo=-1.5, hi=0),
                                     _t(rng, 8, 8), _t(rng, 8, 8), Tensor(np.array(0.8)),
                                     _away_from_int(rng, 2, 2, 8, 8), _away_from_int(rng, 2, 2, 8, 8)])
    c["charbonnier_loss"] = (charbonnier_loss, [_t(rng, 3, 5, 5), _t(rng, 3, 5, 5)])
    c["census_loss"] = (census_loss, [_t(rng, 3, 5, 5, lo=0, hi=1), _t(rng, 3, 5, 5, lo=0, hi=1)])
    lfm = LowRankModulation(4, 2, rng, F64)
    c["low_rank_modulate"] = (lambda x: lfm(x), [_t(rng, 1, 4, 3, 5)])
    return c


def sum_pair(pair) -> Tensor:
    a, b = pair
    return T.add(a, b)


def _splat_fuse(c0, c1, b0, b1, s0, s1, alpha, f0t, f1t, t: float = 0.4) -> Tensor:
    """Weights -> M2M splat of both frames -> normalised fusion, with N=2 sub-flows."""
    w0 = fusion_weight(b0, s0, alpha, 1 - t)
    w1 = fusion_weight(b1, s1, alpha, t)
    acc = splat_forward(c0, w0, f0t, track_max=False)
    acc = splat_forward(c1, w1, f1t, acc, track_max=False)
    out, _ = fuse(acc)
    return out


def run_op_checks(seed: int = 0, eps: float = 1e-6) -> dict[str, float]:
    return {name: grad_check(fn, xs, eps=eps, seed=seed) for name, (fn, xs) in op_cases(seed).items()}


def tiny_net(seed: int = 0) -> MotionRefinementNet:
    cfg = MrnConfig(levels=2, channels=(4, 8), rank=2, n_flows=2, downscale=4)
    return MotionRefinementNet(cfg, seed=seed, dtype=F64)


def _tiny_inputs(rng, size=16):
    I0 = rng.uniform(0, 1, size=(3, size, size))
    I1 = np.roll(I0, 1, axis=-1) * 0.9 + 0.05
    coarse = size // 4
    f01 = rng.uniform(-0.4, 0.4, size=(2, coarse, coarse))
    f10 = rng.uniform(-0.4, 0.4, size=(2, coarse, coarse))
    return I0, I1, f01, f10


def _perturb_all(net: MotionRefinementNet, rng, scale=0.3) -> None:
    # make the head non-trivial so residuals and scores carry signal
    for p in net.parameters().values():
        if p.data.size > 1 and not np.any(p.data):
            p.data = rng.uniform(-scale, scale, size=p.shape)


def run_mrn_check(seed: int = 0, n_params: int = 6, coords: int = 4, eps: float = 1e-6) -> float:
    """MRN forward w.r.t. a random subset of weights (tiny config)."""
    rng = np.random.default_rng(seed)
    net = tiny_net(seed)
    I0, I1, f01, f10 = _tiny_inputs(rng)
    params = list(net.parameters().items())
    params = [p for name, p in params if name != "fusion.alpha"]
    pick = [params[i] for i in rng.choice(len(params), size=n_params, replace=False)]

    def f(*_):
        out = net(I0, I1, f01, f10)
        return T.concat([out.flows01.reshape((-1,)), out.flows10.reshape((-1,)),
                         out.s0.reshape((-1,)), out.s1.reshape((-1,))], axis=0)

    return grad_check(f, pick, eps=eps, seed=seed, max_coords=coords)


def run_pipeline_check(seed: int = 0, n_params: int = 6, coords: int = 4, eps: float = 1e-6) -> float:
    """Loss of the full synthesis path (MRN, splat, fuse, losses) w.r.t. weights and alpha."""
    rng = np.random.default_rng(seed)
    net = tiny_net(seed)
    _perturb_all(net, rng)
    I0, I1, f01, f10 = _tiny_inputs(rng)
    gt = 0.5 * (I0 + I1)
    params = [p for name, p in net.parameters().items() if name != "fusion.alpha"]
    pick = [params[i] for i in rng.choice(len(params), size=n_params, replace=False)] + [net.alpha]

    def f(*_):
        res = synthesize(net, I0, I1, f01, f10, 0.5)
        return total_loss(res.frame, gt)[0]

    return grad_check(f, pick, eps=eps, seed=seed, max_coords=coords)
