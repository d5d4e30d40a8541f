"""Direction math, equirectangular mapping, sampling and deterministic RNG streams.

Directions are numpy arrays with a trailing axis of 3. +Y is up; an
equirectangular map puts ``u = 0.5 + atan2(x, z) / 2pi`` across and
``v = acos(y) / pi`` down.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

TWO_PI = 2.0 * np.pi


def dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sum(a * b, axis=-1)


def normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(n, 1e-300)


def reflect(v: np.ndarray, n: np.ndarray) -> np.ndarray:
    """Mirror ``v`` about ``n``: ``2 (v.n) n - v``. Both point away from the surface."""
    return 2.0 * dot(v, n)[..., None] * n - v


def dir_to_equirect(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(d, dtype=np.float64)
    u = 0.5 + np.arctan2(d[..., 0], d[..., 2]) / TWO_PI
    v = np.arccos(np.clip(d[..., 1], -1.0, 1.0)) / np.pi
    # atan2(-0, -1) lands exactly on u = 1.0; keep the half-open range
    u = np.where(u >= 1.0, u - 1.0, u)
    return u, v


def equirect_to_dir(u, v) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    phi = (u - 0.5) * TWO_PI
    theta = v * np.pi
    s = np.sin(theta)
    return np.stack([s * np.sin(phi), np.cos(theta), s * np.cos(phi)], axis=-1)


def texel_solid_angle(row, width: int, height: int):
    """Solid angle of a texel in ``row``, using the texel-center polar angle."""
    theta = (np.asarray(row, dtype=np.float64) + 0.5) * np.pi / height
    return (TWO_PI / width) * (np.pi / height) * np.sin(theta)


def texel_directions(width: int, height: int) -> np.ndarray:
    """Directions through texel centers, shape ``(height, width, 3)``."""
    u = (np.arange(width) + 0.5) / width
    v = (np.arange(height) + 0.5) / height
    uu, vv = np.meshgrid(u, v)
    return equirect_to_dir(uu, vv)


def solid_angle_map(width: int, height: int) -> np.ndarray:
    """Per-texel solid angles, shape ``(height, width)``."""
    return np.repeat(texel_solid_angle(np.arange(height), width, height)[:, None], width, axis=1)


def tangent_frame(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal tangent/bitangent for unit normals (Duff et al. 2017)."""
    n = np.asarray(n, dtype=np.float64)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    sign = np.where(z >= 0.0, 1.0, -1.0)
    a = -1.0 / (sign + z)
    b = x * y * a
    t = np.stack([1.0 + sign * x * x * a, sign * b, -sign * x], axis=-1)
    bt = np.stack([b, sign + y * y * a, -y], axis=-1)
    return t, bt


def to_world(local: np.ndarray, n: np.ndarray) -> np.ndarray:
    t, b = tangent_frame(n)
    return local[..., 0:1] * t + local[..., 1:2] * b + local[..., 2:3] * n


def fibonacci_sphere(count: int) -> np.ndarray:
    i = np.arange(count, dtype=np.float64) + 0.5
    y = 1.0 - 2.0 * i / count
    r = np.sqrt(np.maximum(0.0, 1.0 - y * y))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([r * np.sin(phi), y, r * np.cos(phi)], axis=-1)


def hammersley(count: int) -> np.ndarray:
    """2-D Hammersley point set in [0,1)^2, shape ``(count, 2)``."""
    i = np.arange(count, dtype=np.uint64)
    bits = i.copy()
    bits = ((bits << np.uint64(16)) | (bits >> np.uint64(16))) & np.uint64(0xFFFFFFFF)
    bits = ((bits & np.uint64(0x55555555)) << np.uint64(1)) | ((bits & np.uint64(0xAAAAAAAA)) >> np.uint64(1))
    bits = ((bits & np.uint64(0x33333333)) << np.uint64(2)) | ((bits & np.uint64(0xCCCCCCCC)) >> np.uint64(2))
    bits = ((bits & np.uint64(0x0F0F0F0F)) << np.uint64(4)) | ((bits & np.uint64(0xF0F0F0F0)) >> np.uint64(4))
    bits = ((bits & np.uint64(0x00FF00FF)) << np.uint64(8)) | ((bits & np.uint64(0xFF00FF00)) >> np.uint64(8))
    radical = bits.astype(np.float64) / 4294967296.0
    return np.stack([(i.astype(np.float64) + 0.5) / count, radical], axis=-1)


# ---------------------------------------------------------------------------
# random streams


@dataclass(frozen=True)
class RngStream:
    """Independent random sequence keyed by ``(seed, stream)``.

    Backed by numpy's counter-based Philox generator with the pair as its
    128-bit key, so the sequence never depends on which thread draws it.
    """

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        key = [self.seed & 0xFFFFFFFFFFFFFFFF, self.stream & 0xFFFFFFFFFFFFFFFF]
        return np.random.Generator(np.random.Philox(key=key))

    def uniform(self, shape) -> np.ndarray:
        return self.generator().random(shape)

    def child(self, name: str | int) -> "RngStream":
        """Named sub-stream; used to split one root seed into independent consumers."""
        return RngStream(derive_seed(self.seed, self.stream, name), 0)


def derive_seed(*parts) -> int:
    """Fold integers/strings into one 64-bit seed through ``SeedSequence``."""
    words: list[int] = []
    for p in parts:
        if isinstance(p, str):
            words.extend(p.encode("utf-8"))
            words.append(0x5EED)
        else:
            p = int(p) & 0xFFFFFFFFFFFFFFFF
            words.extend([p & 0xFFFFFFFF, p >> 32])
    state = np.random.SeedSequence(words).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def stream_uniforms(seed: int, streams: Sequence[int] | np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Uniforms for many streams at once: result has shape ``(len(streams), *shape)``."""
    streams = np.asarray(streams, dtype=np.int64)
    out = np.empty((len(streams),) + tuple(shape))
    for i, s in enumerate(streams):
        out[i] = RngStream(seed, int(s)).generator().random(shape)
    return out


# ---------------------------------------------------------------------------
# sampling


def ggx_half_from_uniforms(u1, u2, alpha, n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map uniforms to GGX half-vectors about ``n``; pdf is ``D(h) (n.h)`` per steradian."""
    u1 = np.asarray(u1, dtype=np.float64)
    a2 = np.asarray(alpha, dtype=np.float64) ** 2
    tan2 = a2 * u1 / np.maximum(1.0 - u1, 1e-12)
    cos_t = 1.0 / np.sqrt(1.0 + tan2)
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t * cos_t))
    phi = TWO_PI * np.asarray(u2, dtype=np.float64)
    local = np.stack(np.broadcast_arrays(sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t), axis=-1)
    h = to_world(local, n)
    denom = cos_t * cos_t * (a2 - 1.0) + 1.0
    pdf = a2 / (np.pi * denom * denom) * cos_t
    return h, pdf


def sample_ggx_half(rng: RngStream, alpha: float, n: np.ndarray, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``count`` GGX half-vectors about a single normal ``n``."""
    u = rng.uniform((count, 2))
    n = np.broadcast_to(np.asarray(n, dtype=np.float64), (count, 3))
    return ggx_half_from_uniforms(u[:, 0], u[:, 1], alpha, n)


def cosine_from_uniforms(u1, u2, n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cosine-weighted hemisphere directions about ``n`` with pdf ``cos/pi``."""
    r = np.sqrt(np.asarray(u1, dtype=np.float64))
    phi = TWO_PI * np.asarray(u2, dtype=np.float64)
    z = np.sqrt(np.maximum(0.0, 1.0 - r * r))
    local = np.stack(np.broadcast_arrays(r * np.cos(phi), r * np.sin(phi), z), axis=-1)
    return to_world(local, n), z / np.pi


# ---------------------------------------------------------------------------
# parallelism


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        env = os.environ.get("PILFORGE_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(threads))


def map_chunks(fn: Callable[[int, int], np.ndarray], count: int, chunk: int, threads: int | None = None) -> np.ndarray:
    """Apply ``fn(start, stop)`` over fixed-size chunks and concatenate along axis 0.

    Chunk boundaries depend only on ``chunk``, never on the worker count, so
    results are identical for any number of threads.
    """
    bounds = [(s, min(s + chunk, count)) for s in range(0, count, chunk)]
    if not bounds:
        return fn(0, 0)
    workers = min(resolve_threads(threads), len(bounds))
    if workers == 1:
        parts = [fn(a, b) for a, b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda ab: fn(*ab), bounds))
    return np.concatenate(parts, axis=0)
