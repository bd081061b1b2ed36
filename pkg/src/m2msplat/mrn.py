"""Motion refinement network.

Turns a coarse bidirectional flow into N full-resolution sub-motion fields per
direction plus a reliability map per frame.  Both directions run through the
same weights: they are stacked on the batch axis as two "streams", and each
stream sees the other one through ``_swap``.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ConvLayer, Tensor, WORK_DTYPE, as_tensor
from .warp import backward_warp, resize_flow

MAGIC = b"M2MW"
VERSION = 1


@dataclass
class MrnConfig:
    levels: int = 4
    channels: tuple[int, ...] = (16, 32, 64, 128)
    rank: int = 16
    n_flows: int = 4
    downscale: int = 4

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if len(self.channels) != self.levels:
            raise ValueError(f"need {self.levels} channel counts, got {len(self.channels)}")
        if self.n_flows < 1:
            raise ValueError("n_flows must be >= 1")
        if not 1 <= self.rank < self.channels[-1]:
            raise ValueError(f"rank {self.rank} must be below the coarsest channel count {self.channels[-1]}")
        if self.downscale < 1:
            raise ValueError("downscale must be >= 1")

    @classmethod
    def toy(cls, **overrides) -> "MrnConfig":
        base = dict(levels=2, channels=(8, 16), rank=4, n_flows=4, downscale=4)
        base.update(overrides)
        return cls(**base)

    @property
    def divisor(self) -> int:
        """Image extents must be multiples of this for the full pipeline."""
        return 2 ** self.levels * self.downscale


@dataclass
class MrnOutput:
    flows01: Tensor  # (..., N, 2, H, W)
    flows10: Tensor
    s0: Tensor  # (..., H, W)
    s1: Tensor
    init01: np.ndarray = field(repr=False, default=None)  # upsampled coarse flows
    init10: np.ndarray = field(repr=False, default=None)


def _prelu_slope(c: int, dtype) -> Tensor:
    return Tensor(np.full(c, 0.25, dtype=dtype), requires_grad=True)


class LowRankModulation:
    """Gates a (..., C, H, W) feature map with an average of ``rank`` rank-1 tensors.

    Each rank-1 factor comes from three projectors (channel, height, width):
    average-pool over the complementary axes, two 1x1 convs with a PReLU in
    between, then a sigmoid.
    """

    def __init__(self, channels: int, rank: int, rng: np.random.Generator, dtype=WORK_DTYPE):
        self.channels = channels
        self.rank = rank
        c, m = channels, rank
        self.layers = OrderedDict(
            chan1=ConvLayer(c, c, 1, rng=rng, dtype=dtype),
            chan2=ConvLayer(c, m * c, 1, rng=rng, dtype=dtype),
            height1=ConvLayer(1, m, 1, rng=rng, dtype=dtype),
            height2=ConvLayer(m, m, 1, rng=rng, dtype=dtype),
            width1=ConvLayer(1, m, 1, rng=rng, dtype=dtype),
            width2=ConvLayer(m, m, 1, rng=rng, dtype=dtype),
        )
        self.slopes = OrderedDict(chan=_prelu_slope(c, dtype), height=_prelu_slope(m, dtype),
                                  width=_prelu_slope(m, dtype))

    def parameters(self, prefix: str = "lfm"):
        for name, layer in self.layers.items():
            yield f"{prefix}.{name}.weight", layer.weight
            yield f"{prefix}.{name}.bias", layer.bias
        for name, slope in self.slopes.items():
            yield f"{prefix}.{name}.slope", slope

    def modulation(self, x) -> Tensor:
        x = as_tensor(x)
        c, h, w = x.shape[-3:]
        m = self.rank
        if not (m < c and m < h and m < w):
            raise ValueError(f"rank {m} must be smaller than C={c}, H={h}, W={w}")
        lead = x.shape[:-3]
        x4 = x.reshape((-1, c, h, w))
        b = x4.shape[0]
        L = self.layers
        pc = T.global_avg_pool(x4, "hw")  # (B, C, 1, 1)
        u = T.sigmoid(L["chan2"](T.prelu(L["chan1"](pc), self.slopes["chan"])))
        u = u.reshape((b, m, c))
        ph = T.global_avg_pool(x4, "cw")  # (B, 1, H, 1)
        v = T.sigmoid(L["height2"](T.prelu(L["height1"](ph), self.slopes["height"])))
        v = v.reshape((b, m, h))
        pw = T.global_avg_pool(x4, "ch")  # (B, 1, 1, W)
        wv = T.sigmoid(L["width2"](T.prelu(L["width1"](pw), self.slopes["width"])))
        wv = wv.reshape((b, m, w))
        weights = T.kronecker_rank1(u, v, wv).mean(axis=1)  # (B, C, H, W)
        return weights.reshape(lead + (c, h, w))

    def __call__(self, x) -> Tensor:
        return T.mul(x, self.modulation(x))


def low_rank_modulate(x, projectors: LowRankModulation, rank: int | None = None) -> Tensor:
    if rank is not None and rank != projectors.rank:
        raise ValueError(f"projectors were built for rank {projectors.rank}, not {rank}")
    return projectors(x)


def _swap(x: Tensor) -> Tensor:
    """Exchange the two stream halves of the batch axis."""
    half = x.shape[0] // 2
    return T.concat([x[half:], x[:half]], axis=0)


class MotionRefinementNet:
    def __init__(self, cfg: MrnConfig | None = None, seed: int = 0, dtype=WORK_DTYPE):
        self.cfg = cfg = cfg or MrnConfig()
        rng = np.random.default_rng(seed)
        ch = cfg.channels
        self.layers: "OrderedDict[str, ConvLayer]" = OrderedDict()
        self.slopes: "OrderedDict[str, Tensor]" = OrderedDict()

        img_ch = [3] + list(ch)
        mot_ch = [2] + list(ch)
        for lvl in range(1, cfg.levels + 1):
            self._conv(f"pyr{lvl}.conv1", img_ch[lvl - 1], ch[lvl - 1], 3, 2, 1, rng, dtype)
            self._conv(f"pyr{lvl}.conv2", ch[lvl - 1], ch[lvl - 1], 3, 1, 1, rng, dtype)
        for lvl in range(1, cfg.levels + 1):
            c_in = 2 * (img_ch[lvl - 1] + mot_ch[lvl - 1])
            self._conv(f"jfe{lvl}.conv1", c_in, ch[lvl - 1], 3, 1, 1, rng, dtype)
            self._conv(f"jfe{lvl}.conv2", ch[lvl - 1], ch[lvl - 1], 3, 2, 1, rng, dtype)
        self.lfm = LowRankModulation(ch[-1], cfg.rank, rng, dtype)
        for lvl in range(cfg.levels, 0, -1):
            c_out = ch[lvl - 2] if lvl >= 2 else ch[0]
            self._conv(f"dec{lvl}.up", ch[lvl - 1], c_out, 4, 2, 1, rng, dtype, transposed=True)
            self._conv(f"dec{lvl}.fuse", 2 * c_out, c_out, 3, 1, 1, rng, dtype)
        self.layers["head"] = ConvLayer(ch[0], 2 * cfg.n_flows + 1, 3, 1, 1, rng=rng, dtype=dtype)
        self.alpha = Tensor(np.array(1.0, dtype=dtype), requires_grad=True)

    def _conv(self, name, c_in, c_out, k, stride, padding, rng, dtype, transposed=False):
        self.layers[name] = ConvLayer(c_in, c_out, k, stride, padding, transposed, rng, dtype)
        self.slopes[name] = _prelu_slope(c_out, dtype)

    # -------------------------------------------------------------- params

    def parameters(self) -> "OrderedDict[str, Tensor]":
        params: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, layer in self.layers.items():
            params[f"{name}.weight"] = layer.weight
            params[f"{name}.bias"] = layer.bias
            if name in self.slopes:
                params[f"{name}.slope"] = self.slopes[name]
        params.update(self.lfm.parameters())
        params["fusion.alpha"] = self.alpha
        return params

    def astype(self, dtype) -> "MotionRefinementNet":
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def zero_residual(self) -> "MotionRefinementNet":
        """Zero the output head: flows equal the upsampled initial flow, scores are 0."""
        head = self.layers["head"]
        head.weight.data[...] = 0
        head.bias.data[...] = 0
        return self

    def _block(self, name: str, x) -> Tensor:
        return T.prelu(self.layers[name](x), self.slopes[name])

    # ------------------------------------------------------------- stages

    def encode_pyramid(self, image) -> list[Tensor]:
        """Image feature pyramid; level 0 is the image itself."""
        image = as_tensor(image)
        h, w = image.shape[-2:]
        div = 2 ** self.cfg.levels
        if h % div or w % div:
            raise ValueError(f"image {h}x{w} not divisible by {div}")
        feats = [image]
        for lvl in range(1, self.cfg.levels + 1):
            x = self._block(f"pyr{lvl}.conv1", feats[-1])
            feats.append(self._block(f"pyr{lvl}.conv2", x))
        return feats

    def jfe_step(self, lvl: int, feat_self, feat_other, mot_self, mot_other, flow) -> tuple[Tensor, Tensor]:
        """Encode level ``lvl`` motion features from level ``lvl - 1`` inputs.

        The other stream's image and motion features are backward-warped onto
        this stream with ``flow`` (this stream -> other stream), concatenated
        with the originals and passed through two convs, the second of stride
        two.  Returns (motion features at level ``lvl``, full-size hidden map).
        """
        for name, t in (("feat_other", feat_other), ("mot_self", mot_self), ("mot_other", mot_other)):
            if as_tensor(t).shape[-2:] != as_tensor(feat_self).shape[-2:]:
                raise ValueError(f"jfe_step: {name} resolution differs from feat_self")
        x = T.concat([feat_self, backward_warp(feat_other, flow),
                      mot_self, backward_warp(mot_other, flow)], axis=-3)
        hidden = self._block(f"jfe{lvl}.conv1", x)
        return self._block(f"jfe{lvl}.conv2", hidden), hidden

    def decode(self, bottom: Tensor, skips: list[Tensor]) -> Tensor:
        """Coarse-to-fine decoding; returns the raw head output (B, 2N+1, H, W)."""
        d = bottom
        for lvl in range(self.cfg.levels, 0, -1):
            up = self._block(f"dec{lvl}.up", d)
            d = self._block(f"dec{lvl}.fuse", T.concat([up, skips[lvl - 1]], axis=-3))
        return self.layers["head"](d)

    def forward(self, I0, I1, f01_coarse, f10_coarse) -> MrnOutput:
        I0, I1 = as_tensor(I0), as_tensor(I1)
        single = I0.ndim == 3
        if single:
            I0, I1 = I0.reshape((1,) + I0.shape), I1.reshape((1,) + I1.shape)
        f01c = np.asarray(f01_coarse.data if isinstance(f01_coarse, Tensor) else f01_coarse)
        f10c = np.asarray(f10_coarse.data if isinstance(f10_coarse, Tensor) else f10_coarse)
        if f01c.ndim == 3:
            f01c, f10c = f01c[None], f10c[None]
        if I0.shape != I1.shape:
            raise ValueError(f"frame shapes differ: {I0.shape} vs {I1.shape}")
        b, _, h, w = I0.shape
        cfg = self.cfg
        dtype = I0.dtype

        coarse = np.concatenate([f01c, f10c], axis=0).astype(dtype)
        level_flows = [resize_flow(coarse, (h >> lvl, w >> lvl)) for lvl in range(cfg.levels)]
        streams = T.concat([I0, I1], axis=0)
        feats = self.encode_pyramid(streams)
        mot = [Tensor(level_flows[0])]
        skips = []
        for lvl in range(1, cfg.levels + 1):
            nxt, hidden = self.jfe_step(lvl, feats[lvl - 1], _swap(feats[lvl - 1]),
                                        mot[lvl - 1], _swap(mot[lvl - 1]), level_flows[lvl - 1])
            mot.append(nxt)
            skips.append(hidden if lvl == 1 else mot[lvl - 1])
        bottom = self.lfm(mot[-1])
        head = self.decode(bottom, skips)

        n = cfg.n_flows
        init = level_flows[0]
        residual = head[:, :2 * n].reshape((2 * b, n, 2, h, w))
        flows = T.add(residual, init[:, None])
        scores = head[:, 2 * n]
        out = MrnOutput(flows[:b], flows[b:], scores[:b], scores[b:], init[:b], init[b:])
        if single:
            out = MrnOutput(out.flows01[0], out.flows10[0], out.s0[0], out.s1[0], init[0], init[b])
        return out

    __call__ = forward

    # -------------------------------------------------------- checkpoints

    def save(self, path) -> None:
        """Write the binary checkpoint container.

        Layout (little-endian): ``b"M2MW"``, version u32, levels u32,
        channels ``levels`` x u32, rank u32, n_flows u32, downscale u32,
        record count u32, then per parameter: name length u16, UTF-8 name,
        rank u32, extents u32 each, float32 data.
        """
        cfg = self.cfg
        params = self.parameters()
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<II", VERSION, cfg.levels))
            fh.write(struct.pack(f"<{cfg.levels}I", *cfg.channels))
            fh.write(struct.pack("<IIII", cfg.rank, cfg.n_flows, cfg.downscale, len(params)))
            for name, p in params.items():
                raw = name.encode("utf-8")
                arr = np.asarray(p.data, dtype="<f4")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<I", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.tobytes(order="C"))

    @classmethod
    def load(cls, path) -> "MotionRefinementNet":
        raw = Path(path).read_bytes()
        if raw[:4] != MAGIC:
            raise ValueError(f"{path}: not an M2MW checkpoint")
        pos = 4
        version, levels = struct.unpack_from("<II", raw, pos)
        pos += 8
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        channels = struct.unpack_from(f"<{levels}I", raw, pos)
        pos += 4 * levels
        rank, n_flows, downscale, count = struct.unpack_from("<IIII", raw, pos)
        pos += 16
        net = cls(MrnConfig(levels, channels, rank, n_flows, downscale))
        params = net.parameters()
        seen = set()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 4 * size > len(raw):
                raise ValueError(f"{path}: truncated record {name!r}")
            data = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            if name not in params or params[name].shape != data.shape:
                raise ValueError(f"{path}: unexpected parameter {name!r} {shape}")
            params[name].data = data.astype(WORK_DTYPE)
            seen.add(name)
        if pos != len(raw):
            raise ValueError(f"{path}: trailing bytes after last record")
        missing = set(params) - seen
        if missing:
            raise ValueError(f"{path}: missing parameters {sorted(missing)}")
        return net


def mrn_forward(net: MotionRefinementNet, I0, I1, f01_coarse, f10_coarse) -> MrnOutput:
    return net.forward(I0, I1, f01_coarse, f10_coarse)
