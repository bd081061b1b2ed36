"""Flow (.flo) and image (PPM/PNG) readers and writers, plus flow colouring.

Images are float32 arrays shaped (3, H, W) with values in [0, 1].  Flows are
float32 arrays shaped (2, H, W) holding (u, v).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

FLO_MAGIC = 202021.25
FLO_MAGIC_BYTES = struct.pack("<f", FLO_MAGIC)


class FloError(ValueError):
    pass


class FloMagicError(FloError):
    pass


class FloTruncatedError(FloError):
    pass


class FloDimensionError(FloError):
    pass


class ImageFormatError(ValueError):
    pass


class ImageHeaderError(ValueError):
    pass


# ---------------------------------------------------------------- .flo


def parse_flo(raw: bytes) -> np.ndarray:
    if len(raw) < 12:
        raise FloTruncatedError(f"flo header needs 12 bytes, got {len(raw)}")
    if raw[:4] != FLO_MAGIC_BYTES:
        (magic,) = struct.unpack("<f", raw[:4])
        raise FloMagicError(f"bad flo magic {magic!r} (expected {FLO_MAGIC})")
    w, h = struct.unpack("<ii", raw[4:12])
    if w <= 0 or h <= 0:
        raise FloDimensionError(f"non-positive flo dimensions {w}x{h}")
    need = 8 * w * h
    if len(raw) - 12 < need:
        raise FloTruncatedError(f"flo payload has {len(raw) - 12} bytes, need {need}")
    if len(raw) - 12 > need:
        raise FloTruncatedError(f"flo file has {len(raw) - 12 - need} trailing bytes")
    data = np.frombuffer(raw, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2)
    return np.ascontiguousarray(data.transpose(2, 0, 1)).astype(np.float32)


def read_flo(path) -> np.ndarray:
    return parse_flo(Path(path).read_bytes())


def encode_flo(flow) -> bytes:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise FloDimensionError(f"flow must be (2, H, W), got {flow.shape}")
    _, h, w = flow.shape
    if h == 0 or w == 0:
        raise FloDimensionError("flow has an empty dimension")
    body = np.ascontiguousarray(flow.transpose(1, 2, 0), dtype="<f4").tobytes()
    return FLO_MAGIC_BYTES + struct.pack("<ii", w, h) + body


def write_flo(path, flow) -> None:
    Path(path).write_bytes(encode_flo(flow))


# ---------------------------------------------------------------- images


def to_uint8(img) -> np.ndarray:
    """(3, H, W) floats in [0, 1] to (H, W, 3) bytes via round(x * 255) with clamping."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"image must be (3, H, W), got {img.shape}")
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr) -> np.ndarray:
    return (np.asarray(arr, dtype=np.float32).transpose(2, 0, 1) / 255.0).astype(np.float32)


def _ppm_tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace separated header tokens, skipping # comments."""
    tokens, pos, n = [], 0, len(raw)
    while len(tokens) < count:
        while pos < n and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos:pos + 1] == b"#":
            while pos < n and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageHeaderError("PPM header ended early")
        tokens.append(raw[start:pos])
    if pos >= n or not raw[pos:pos + 1].isspace():
        raise ImageHeaderError("PPM header must end with one whitespace byte")
    return tokens, pos + 1


def parse_ppm(raw: bytes) -> np.ndarray:
    """Binary P6 with maxval 255 to (H, W, 3) uint8."""
    if raw[:2] != b"P6":
        raise ImageHeaderError("not a binary PPM (missing P6 magic)")
    tokens, pos = _ppm_tokens(raw, 4)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageHeaderError(f"non-numeric PPM header field: {exc}") from None
    if w <= 0 or h <= 0:
        raise ImageHeaderError(f"non-positive PPM dimensions {w}x{h}")
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit PPM (maxval 255) is supported, got {maxval}")
    need = 3 * w * h
    if len(raw) - pos != need:
        # one image per file; trailing bytes are as suspect as missing ones
        raise ImageHeaderError(f"PPM payload has {len(raw) - pos} bytes, need {need}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3).copy()


def encode_ppm(arr: np.ndarray) -> bytes:
    h, w, _ = arr.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr, dtype=np.uint8).tobytes()


def _kind(path: Path) -> str:
    ext = path.suffix.lower()
    if ext in (".ppm", ".pnm"):
        return "ppm"
    if ext == ".png":
        return "png"
    raise ImageFormatError(f"unsupported image format {ext!r} (use .png or .ppm)")


def read_image(path) -> np.ndarray:
    path = Path(path)
    kind = _kind(path)
    if kind == "ppm":
        return from_uint8(parse_ppm(path.read_bytes()))
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise ImageFormatError(f"{path}: expected PNG data, found {im.format}")
            if im.mode not in ("RGB", "RGBA", "L", "P"):
                raise ImageFormatError(f"{path}: unsupported PNG mode {im.mode}")
            arr = np.asarray(im.convert("RGB"))
    except UnidentifiedImageError:
        raise ImageHeaderError(f"{path}: corrupt or unreadable PNG") from None
    except OSError as exc:
        raise ImageHeaderError(f"{path}: {exc}") from None
    return from_uint8(arr)


def write_image(path, img) -> None:
    path = Path(path)
    kind = _kind(path)
    arr = to_uint8(img)
    if kind == "ppm":
        path.write_bytes(encode_ppm(arr))
        return
    from PIL import Image

    Image.fromarray(arr, "RGB").save(path, format="PNG")


# ---------------------------------------------------------------- flow colours


def color_wheel() -> np.ndarray:
    """Middlebury wheel: 55 RGB stops (red, yellow, green, cyan, blue, magenta) in [0, 1]."""
    segments = ((15, (1, 0, 0), (1, 1, 0)), (6, (1, 1, 0), (0, 1, 0)), (4, (0, 1, 0), (0, 1, 1)),
                (11, (0, 1, 1), (0, 0, 1)), (13, (0, 0, 1), (1, 0, 1)), (6, (1, 0, 1), (1, 0, 0)))
    stops = []
    for n, a, b in segments:
        frac = np.floor(255 * np.arange(n) / n) / 255
        a, b = np.array(a, float), np.array(b, float)
        stops.append(a + frac[:, None] * (b - a))
    return np.concatenate(stops)


def flow_to_color(flow, max_mag: float | None = None) -> np.ndarray:
    """(2, H, W) flow to a (3, H, W) image.

    Hue follows the flow angle (+x is the first wheel stop, red), and
    saturation the magnitude divided by ``max_mag`` (default: the field's
    largest magnitude).  Zero motion is white; vectors beyond ``max_mag``
    are drawn at full saturation and dimmed.
    """
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"flow must be (2, H, W), got {flow.shape}")
    u, v = flow
    mag = np.hypot(u, v)
    if max_mag is None:
        max_mag = float(mag.max(initial=0.0))
    rad = mag / max_mag if max_mag > 0 else np.zeros_like(mag)
    wheel = color_wheel()
    ncols = len(wheel)
    pos = np.mod(np.arctan2(v, u), 2 * np.pi) / (2 * np.pi) * ncols
    k0 = np.floor(pos).astype(np.int64) % ncols
    k1 = (k0 + 1) % ncols
    f = (pos - np.floor(pos))[..., None]
    col = (1 - f) * wheel[k0] + f * wheel[k1]
    r = rad[..., None]
    inside = r <= 1
    col = np.where(inside, 1 - np.minimum(r, 1) * (1 - col), col * 0.75)
    return col.transpose(2, 0, 1).astype(np.float32)
