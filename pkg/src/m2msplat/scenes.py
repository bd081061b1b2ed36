"""Procedural triplets with analytic motion and exact ground truth.

Frames are rendered by sampling a continuous texture through the inverse of
the scene's motion at each time, so the middle frame and both flows are
exact rather than interpolated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KINDS = ("translation", "rotation", "zoom", "occlusion", "static")
TEXTURES = ("noise", "checker", "gradient")


class Texture:
    """A smooth random RGB function of continuous (x, y), values in [0, 1]."""

    def __init__(self, rng: np.random.Generator, kind: str = "noise", n_waves: int = 10):
        if kind not in TEXTURES:
            raise ValueError(f"unknown texture {kind!r}")
        self.kind = kind
        # log-uniform periods give structure at every pyramid scale
        period = np.exp(rng.uniform(np.log(4.0), np.log(64.0), size=(3, n_waves)))
        theta = rng.uniform(0, np.pi, size=(3, n_waves))
        self.kx = 2 * np.pi / period * np.cos(theta)
        self.ky = 2 * np.pi / period * np.sin(theta)
        self.phase = rng.uniform(0, 2 * np.pi, size=(3, n_waves))
        self.amp = rng.uniform(0.5, 1.0, size=(3, n_waves)) / np.sqrt(n_waves)
        self.cell = rng.uniform(6.0, 12.0)
        self.offset = rng.uniform(0, 100, size=2)
        self.tint = rng.uniform(0.2, 0.8, size=3)
        self.slope = rng.uniform(-0.02, 0.02, size=(3, 2))

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        waves = np.sin(self.kx[..., None, None] * x + self.ky[..., None, None] * y
                       + self.phase[..., None, None])
        noise = (self.amp[..., None, None] * waves).sum(axis=1)  # (3, H, W)
        if self.kind == "noise":
            out = 0.5 + 0.8 * noise
        elif self.kind == "checker":
            cx = np.sin(np.pi * (x + self.offset[0]) / self.cell)
            cy = np.sin(np.pi * (y + self.offset[1]) / self.cell)
            board = 0.5 + 0.5 * np.tanh(3.0 * cx * cy)
            out = self.tint[:, None, None] * board + 0.2 * noise + 0.1
        else:
            ramp = self.slope[:, 0, None, None] * x + self.slope[:, 1, None, None] * y
            out = self.tint[:, None, None] + ramp + 0.3 * noise
        # soft clamp keeps gradients smooth while landing in [0, 1]
        return (0.5 + 0.5 * np.tanh(2.0 * (out - 0.5))).astype(np.float64)


@dataclass
class Triplet:
    I0: np.ndarray
    It: np.ndarray
    I1: np.ndarray
    F01: np.ndarray
    F10: np.ndarray
    t: float


@dataclass
class SyntheticScene:
    """Random generator of one motion kind.

    translation: shift up to ``max_shift`` px; rotation: angle up to
    ``max_angle`` rad about the centre; zoom: scale in ``zoom_range`` about the
    centre, trajectories linear in time; occlusion: a textured square moving
    over a translating background; static: no motion.
    """

    kind: str = "translation"
    max_shift: float = 6.0
    max_angle: float = 0.15
    zoom_range: tuple[float, float] = (0.8, 1.25)
    textures: tuple[str, ...] = TEXTURES
    fixed: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}")

    def sample(self, rng: np.random.Generator, size: int | tuple[int, int] = 32, t: float = 0.5) -> Triplet:
        h, w = (size, size) if isinstance(size, int) else size
        tex = Texture(rng, str(rng.choice(self.textures)))
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        cx, cy = (w - 1) / 2, (h - 1) / 2
        p = dict(self.fixed)

        if self.kind == "occlusion":
            return self._occlusion(rng, tex, xs, ys, t, p)

        if self.kind in ("translation", "static"):
            if self.kind == "static":
                d = np.zeros(2)
            else:
                d = np.asarray(p.get("shift", rng.uniform(-self.max_shift, self.max_shift, size=2)), float)

            def inverse(tau, x, y):
                return x - tau * d[0], y - tau * d[1]

            def forward(tau, x, y):
                return x + tau * d[0], y + tau * d[1]
        elif self.kind == "zoom":
            s = float(p.get("scale", rng.uniform(*self.zoom_range)))

            def forward(tau, x, y):
                k = 1 + (s - 1) * tau
                return cx + k * (x - cx), cy + k * (y - cy)

            def inverse(tau, x, y):
                k = 1 + (s - 1) * tau
                return cx + (x - cx) / k, cy + (y - cy) / k
        else:
            ang = float(p.get("angle", rng.uniform(-self.max_angle, self.max_angle)))

            def forward(tau, x, y):
                c, sn = np.cos(ang * tau), np.sin(ang * tau)
                return cx + c * (x - cx) - sn * (y - cy), cy + sn * (x - cx) + c * (y - cy)

            def inverse(tau, x, y):
                return forward(-tau, x, y)

        frames = [tex(*inverse(tau, xs, ys)) for tau in (0.0, t, 1.0)]
        fx, fy = forward(1.0, xs, ys)
        bx, by = inverse(1.0, xs, ys)
        F01 = np.stack([fx - xs, fy - ys])
        F10 = np.stack([bx - xs, by - ys])
        return Triplet(*(f.astype(np.float32) for f in frames),
                       F01.astype(np.float32), F10.astype(np.float32), t)

    def _occlusion(self, rng, tex, xs, ys, t, p) -> Triplet:
        h, w = xs.shape
        fg_tex = Texture(rng, str(rng.choice(self.textures)))
        db = np.asarray(p.get("shift", rng.uniform(-self.max_shift / 2, self.max_shift / 2, size=2)), float)
        df = np.asarray(p.get("fg_shift", rng.uniform(-self.max_shift, self.max_shift, size=2)), float)
        side = p.get("side", max(4.0, min(h, w) / 3))
        x0 = p.get("x0", rng.uniform(w * 0.2, w * 0.8 - side))
        y0 = p.get("y0", rng.uniform(h * 0.2, h * 0.8 - side))

        def coverage(tau):
            # anti-aliased box coverage of the square at time tau
            left, top = x0 + tau * df[0], y0 + tau * df[1]
            cov_x = np.clip(np.minimum(xs + 0.5, left + side) - np.maximum(xs - 0.5, left), 0, 1)
            cov_y = np.clip(np.minimum(ys + 0.5, top + side) - np.maximum(ys - 0.5, top), 0, 1)
            return cov_x * cov_y

        def render(tau):
            bg = tex(xs - tau * db[0], ys - tau * db[1])
            fg = fg_tex(xs - tau * df[0], ys - tau * df[1])
            a = coverage(tau)
            return a * fg + (1 - a) * bg

        frames = [render(tau) for tau in (0.0, t, 1.0)]
        in0 = coverage(0.0) >= 0.5
        in1 = coverage(1.0) >= 0.5
        F01 = np.where(in0, df[:, None, None], db[:, None, None]) * np.ones((2, h, w))
        F10 = np.where(in1, -df[:, None, None], -db[:, None, None]) * np.ones((2, h, w))
        return Triplet(*(f.astype(np.float32) for f in frames),
                       F01.astype(np.float32), F10.astype(np.float32), t)


def make_suite(kinds, count: int, size=32, seed: int = 0, t: float = 0.5, **scene_kw) -> list[Triplet]:
    """A fixed, seeded list of triplets cycling through ``kinds``."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        kind = kinds[i % len(kinds)]
        out.append(SyntheticScene(kind, **scene_kw).sample(rng, size, t))
    return out
