"""Equirectangular HDR environment maps: storage, lookup, file formats, tone mapping."""
from __future__ import annotations

import os
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from . import core
from .errors import ParseError

RADIANCE = "radiance_hdr"
PFM = "pfm"


@dataclass
class EnvironmentMap:
    """Linear RGB radiance on a ``height x width`` lat-long grid (``width == 2 * height``)."""

    pixels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"environment map must be (H, W, 3), got {px.shape}")
        if px.shape[1] != 2 * px.shape[0]:
            raise ValueError(f"environment map must be 2:1, got {px.shape[1]}x{px.shape[0]}")
        if not np.all(np.isfinite(px)):
            raise ValueError("environment map has non-finite values")
        if np.any(px < 0):
            self.meta["negative_clamped"] = int(self.meta.get("negative_clamped", 0) + np.count_nonzero(px < 0))
            px = np.maximum(px, 0.0)
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def constant(cls, value, width: int = 128, height: int = 64) -> "EnvironmentMap":
        px = np.empty((height, width, 3), dtype=np.float32)
        px[...] = np.broadcast_to(np.asarray(value, dtype=np.float32), (3,))
        return cls(px)

    def directions(self) -> np.ndarray:
        return core.texel_directions(self.width, self.height)

    def solid_angles(self) -> np.ndarray:
        return core.solid_angle_map(self.width, self.height)

    def mean_radiance(self) -> np.ndarray:
        w = self.solid_angles()
        return np.einsum("hw,hwc->c", w, self.pixels.astype(np.float64)) / w.sum()


# ---------------------------------------------------------------------------
# lookup


def bilinear_taps(width: int, height: int, d: np.ndarray):
    """Texel indices and weights of the four bilinear taps for directions ``d``.

    Returns ``(rows, cols, weights)`` each shaped ``d.shape[:-1] + (4,)``.
    Horizontal lookups wrap; vertical lookups clamp at the poles.
    """
    u, v = core.dir_to_equirect(d)
    x = u * width - 0.5
    y = v * height - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    c0 = np.mod(x0, width)
    c1 = np.mod(x0 + 1, width)
    r0 = np.clip(y0, 0, height - 1)
    r1 = np.clip(y0 + 1, 0, height - 1)
    rows = np.stack([r0, r0, r1, r1], axis=-1)
    cols = np.stack([c0, c1, c0, c1], axis=-1)
    weights = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
    return rows, cols, weights


def sample_pixels(pixels: np.ndarray, d: np.ndarray) -> np.ndarray:
    h, w = pixels.shape[:2]
    rows, cols, wts = bilinear_taps(w, h, d)
    taps = pixels[rows, cols].astype(np.float64)
    return np.einsum("...k,...kc->...c", wts, taps)


def sample_bilinear(env: EnvironmentMap, d: np.ndarray) -> np.ndarray:
    return sample_pixels(env.pixels, d)


def resample(env: EnvironmentMap, width: int, height: int) -> EnvironmentMap:
    if (width, height) == (env.width, env.height):
        return EnvironmentMap(env.pixels.copy())
    return EnvironmentMap(sample_bilinear(env, core.texel_directions(width, height)).astype(np.float32))


# ---------------------------------------------------------------------------
# tone mapping and LDR output


def tone_map(x, exposure: float = 1.0) -> np.ndarray:
    """Reinhard curve followed by 1/2.2 gamma; maps HDR radiance into [0, 1]."""
    if exposure <= 0:
        raise ValueError("exposure must be positive")
    if isinstance(x, EnvironmentMap):
        x = x.pixels
    x = np.maximum(np.asarray(x, dtype=np.float64) * exposure, 0.0)
    y = np.clip(x / (1.0 + x), 0.0, 1.0)
    return y ** (1.0 / 2.2)


def to_uint8(ldr: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(ldr) * 255.0), 0, 255).astype(np.uint8)


def write_png(ldr: np.ndarray, path) -> None:
    from PIL import Image

    img = to_uint8(ldr)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    Image.fromarray(img[..., :3], mode="RGB").save(os.fspath(path), format="PNG")


# ---------------------------------------------------------------------------
# PFM


def write_pfm(data: np.ndarray, path) -> None:
    """Little-endian PFM; rows are stored bottom-to-top as the format requires."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        tag, ch = b"Pf", 1
    elif data.ndim == 3 and data.shape[2] == 3:
        tag, ch = b"PF", 3
    else:
        raise ValueError(f"PFM holds 1 or 3 channels, got shape {data.shape}")
    h, w = data.shape[:2]
    header = tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n"
    body = np.ascontiguousarray(data[::-1]).astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header + body)


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(buf) and buf[pos : pos + 1].isspace():
        pos += 1
    start = pos
    while pos < len(buf) and not buf[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ParseError("unexpected end of PFM header", start)
    return buf[start:pos], pos


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    tag, pos = _read_token(buf, 0)
    if tag not in (b"PF", b"Pf"):
        raise ParseError(f"bad PFM magic {tag!r}", 0)
    ch = 3 if tag == b"PF" else 1
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        start = pos - len(tok)
        try:
            fields.append(float(tok))
        except ValueError:
            raise ParseError(f"bad PFM header field {tok!r}", start) from None
    w, h, scale = int(fields[0]), int(fields[1]), fields[2]
    if w <= 0 or h <= 0 or scale == 0:
        raise ParseError("bad PFM dimensions or scale", pos)
    pos += 1  # single whitespace byte ends the header
    need = w * h * ch * 4
    if len(buf) - pos < need:
        raise ParseError(f"truncated PFM payload: expected {need} bytes, found {len(buf) - pos}", pos)
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(buf, dtype=dtype, count=w * h * ch, offset=pos).astype(np.float32)
    arr = arr.reshape((h, w, ch) if ch == 3 else (h, w))[::-1]
    return np.ascontiguousarray(arr) * np.float32(abs(scale)) if abs(scale) != 1.0 else np.ascontiguousarray(arr)


# ---------------------------------------------------------------------------
# Radiance RGBE


def rgbe_encode(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    v = rgb.max(axis=-1)
    mant, expo = np.frexp(v)
    ok = v > 1e-32
    scale = np.where(ok, mant * 256.0 / np.where(ok, v, 1.0), 0.0)
    out = np.zeros(rgb.shape[:-1] + (4,), dtype=np.uint8)
    out[..., :3] = np.clip(rgb * scale[..., None], 0, 255).astype(np.uint8)
    out[..., 3] = np.where(ok, expo + 128, 0).astype(np.uint8)
    return out


def rgbe_decode(rgbe: np.ndarray) -> np.ndarray:
    rgbe = np.asarray(rgbe)
    e = rgbe[..., 3].astype(np.int64)
    f = np.where(e > 0, np.ldexp(1.0, e - 136), 0.0)
    return ((rgbe[..., :3].astype(np.float64) + 0.5) * f[..., None]).astype(np.float32)


def write_hdr(data: np.ndarray, path) -> None:
    data = np.asarray(data, dtype=np.float32)
    h, w = data.shape[:2]
    header = b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n" + f"-Y {h} +X {w}\n".encode()
    with open(path, "wb") as f:
        f.write(header + rgbe_encode(np.maximum(data, 0.0)).tobytes())


_RES = re.compile(rb"^-Y (\d+) \+X (\d+)$")


def _read_rle_scanline(buf: bytes, pos: int, w: int) -> tuple[np.ndarray, int]:
    line = np.empty((4, w), dtype=np.uint8)
    for c in range(4):
        x = 0
        while x < w:
            if pos >= len(buf):
                raise ParseError("truncated RLE scanline", pos)
            count = buf[pos]
            pos += 1
            if count > 128:
                count -= 128
                if x + count > w or pos >= len(buf):
                    raise ParseError("bad RLE run", pos)
                line[c, x : x + count] = buf[pos]
                pos += 1
            else:
                if count == 0 or x + count > w or pos + count > len(buf):
                    raise ParseError("bad RLE literal", pos)
                line[c, x : x + count] = np.frombuffer(buf, np.uint8, count, pos)
                pos += count
            x += count
    return line.T, pos


def read_hdr(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    if not (buf.startswith(b"#?RADIANCE") or buf.startswith(b"#?RGBE")):
        raise ParseError("missing #?RADIANCE signature", 0)
    pos = buf.find(b"\n") + 1
    fmt_ok = False
    while True:
        end = buf.find(b"\n", pos)
        if end < 0:
            raise ParseError("unterminated Radiance header", pos)
        line = buf[pos:end].strip()
        if not line:
            pos = end + 1
            break
        if line.startswith(b"FORMAT="):
            if line != b"FORMAT=32-bit_rle_rgbe":
                raise ParseError(f"unsupported format {line.decode(errors='replace')}", pos)
            fmt_ok = True
        pos = end + 1
    if not fmt_ok:
        raise ParseError("Radiance header lacks FORMAT=32-bit_rle_rgbe", pos)
    end = buf.find(b"\n", pos)
    m = _RES.match(buf[pos:end].strip()) if end >= 0 else None
    if m is None:
        raise ParseError("expected resolution line '-Y H +X W'", pos)
    h, w = int(m.group(1)), int(m.group(2))
    pos = end + 1
    out = np.empty((h, w, 4), dtype=np.uint8)
    for row in range(h):
        rle = 8 <= w < 0x8000 and buf[pos : pos + 2] == b"\x02\x02" and pos + 4 <= len(buf) and (buf[pos + 2] & 0x80) == 0
        if rle:
            if (buf[pos + 2] << 8 | buf[pos + 3]) != w:
                raise ParseError("RLE scanline width mismatch", pos)
            out[row], pos = _read_rle_scanline(buf, pos + 4, w)
        else:
            need = 4 * w
            if pos + need > len(buf):
                raise ParseError(f"truncated scanline {row}: expected {need} bytes, found {len(buf) - pos}", pos)
            out[row] = np.frombuffer(buf, np.uint8, need, pos).reshape(w, 4)
            pos += need
    return rgbe_decode(out)


# ---------------------------------------------------------------------------
# map-level I/O


def guess_format(path) -> str:
    ext = os.path.splitext(os.fspath(path))[1].lower()
    if ext == ".pfm":
        return PFM
    if ext in (".hdr", ".rgbe", ".pic"):
        return RADIANCE
    raise ValueError(f"cannot infer image format from extension {ext!r}")


def read_image(path, format: str | None = None) -> np.ndarray:
    if not os.fspath(path):
        raise OSError("empty path")
    format = format or guess_format(path)
    if format == PFM:
        return read_pfm(path)
    if format == RADIANCE:
        return read_hdr(path)
    raise ValueError(f"unknown format {format!r}")


def write_image(data: np.ndarray, path, format: str | None = None) -> None:
    if not os.fspath(path):
        raise OSError("empty path")
    format = format or guess_format(path)
    if format == PFM:
        write_pfm(data, path)
    elif format == RADIANCE:
        write_hdr(data, path)
    else:
        raise ValueError(f"unknown format {format!r}")


def load(path, format: str | None = None) -> EnvironmentMap:
    """Read a map; negative texels are clamped and counted in ``meta['negative_clamped']``."""
    px = read_image(path, format)
    if px.ndim == 2:
        px = np.repeat(px[..., None], 3, axis=2)
    if not np.all(np.isfinite(px)):
        raise ParseError("non-finite texel values", None)
    env = EnvironmentMap(px, meta={"negative_clamped": 0, "path": os.fspath(path)})
    return env


def save(env: EnvironmentMap, path, format: str | None = None) -> None:
    write_image(env.pixels, path, format)


# ---------------------------------------------------------------------------
# procedural environments


def _smoothstep(e0, e1, x):
    t = np.clip((x - e0) / (e1 - e0), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def procedural(seed: int, width: int = 128, height: int = 64) -> EnvironmentMap:
    """Sky gradient, dim ground, and one to three soft area lights or light panels."""
    rng = core.RngStream(seed, 0x0E7A).generator()
    d = core.texel_directions(width, height)
    y = d[..., 1]

    zenith = rng.uniform(0.05, 0.6) * np.array([rng.uniform(0.3, 0.7), rng.uniform(0.5, 0.9), 1.0])
    horizon = rng.uniform(0.3, 1.2) * np.array([1.0, rng.uniform(0.75, 1.0), rng.uniform(0.55, 1.0)])
    ground = rng.uniform(0.02, 0.25) * np.array([1.0, rng.uniform(0.7, 1.0), rng.uniform(0.5, 0.9)])
    up = np.clip(y, 0.0, 1.0)[..., None] ** rng.uniform(0.35, 0.8)
    sky = horizon + (zenith - horizon) * up
    down = np.clip(-y, 0.0, 1.0)[..., None]
    below = ground + (horizon * 0.3 - ground) * (1.0 - down) ** 8
    px = np.where(y[..., None] >= 0.0, sky, below)

    for _ in range(int(rng.integers(1, 4))):
        tint = np.array([1.0, rng.uniform(0.7, 1.0), rng.uniform(0.45, 1.0)])
        if rng.random() < 0.5:
            tint = tint[::-1].copy()
        power = rng.uniform(3.0, 25.0)
        axis = core.normalize(np.array([rng.normal(), abs(rng.normal()) + rng.uniform(-0.3, 0.6), rng.normal()]))
        if rng.random() < 0.65:
            radius = np.radians(rng.uniform(4.0, 14.0))
            c = core.dot(d, axis)
            mask = _smoothstep(np.cos(radius * 1.3), np.cos(radius * 0.7), c)
        else:
            # rectangular panel in the light's tangent frame
            t, b = core.tangent_frame(axis)
            half_w = np.radians(rng.uniform(6.0, 25.0))
            half_h = np.radians(rng.uniform(3.0, 8.0))
            c = core.dot(d, axis)
            a = np.arctan2(core.dot(d, t), np.maximum(c, 1e-6))
            e = np.arctan2(core.dot(d, b), np.maximum(c, 1e-6))
            soft = np.radians(2.0)
            mask = (
                _smoothstep(half_w + soft, half_w - soft, np.abs(a))
                * _smoothstep(half_h + soft, half_h - soft, np.abs(e))
                * (c > 0)
            )
        px = px + power * tint * mask[..., None]
    return EnvironmentMap(px.astype(np.float32), meta={"seed": int(seed)})
