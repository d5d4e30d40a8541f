"""Monte-Carlo ground truth, GGX prefiltering, split-sum LUTs and the split-sum shader.

Prefiltered radiance uses the normalized convention
``L~(r, a) = sum L(l_k) (r.l_k) / sum (r.l_k)`` over GGX samples about ``r``.
Constant environments are fixed points, and the diffuse term of the split-sum
shader becomes ``b_d * L~(n, 1)`` with no extra ``1/pi``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import brdf as brdf_mod
from . import core, envmap
from . import tensor as T
from .brdf import BrdfParams
from .envmap import EnvironmentMap

LQuery = Callable[[np.ndarray, np.ndarray], np.ndarray]

PIXEL_CHUNK = 256
PYRAMID_LEVELS = 8


# ---------------------------------------------------------------------------
# scene


@dataclass
class SphereScene:
    """Unit sphere at the origin seen by a camera on a circle around it.

    ``material`` is a :class:`BrdfParams` that is either uniform (scalar
    roughness) or an image-space texture with ``(height, width)`` leading axes.
    """

    width: int = 64
    height: int = 64
    camera: str = "ortho"
    fov_deg: float = 35.0
    distance: float = 4.0
    azimuth_deg: float = 0.0
    elevation_deg: float = 0.0
    extent: float = 1.05
    material: BrdfParams = field(default_factory=lambda: BrdfParams.uniform(0.0, 1.0, 0.2))
    background: str = "black"

    def __post_init__(self):
        if self.camera not in ("ortho", "pinhole"):
            raise ValueError(f"unknown camera {self.camera!r}")
        if self.background not in ("black", "env"):
            raise ValueError(f"unknown background {self.background!r}")

    def camera_frame(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        az, el = np.radians(self.azimuth_deg), np.radians(self.elevation_deg)
        back = np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        right = core.normalize(np.cross(np.array([0.0, 1.0, 0.0]), back))
        up = np.cross(back, right)
        return self.distance * back, right, up, back

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Ray origins and unit directions per pixel, each ``(height, width, 3)``."""
        eye, right, up, back = self.camera_frame()
        xs = ((np.arange(self.width) + 0.5) / self.width) * 2.0 - 1.0
        ys = 1.0 - ((np.arange(self.height) + 0.5) / self.height) * 2.0
        px, py = np.meshgrid(xs, ys)
        aspect = self.width / self.height
        if self.camera == "ortho":
            o = eye + self.extent * (px[..., None] * aspect * right + py[..., None] * up)
            d = np.broadcast_to(-back, o.shape).copy()
        else:
            t = np.tan(np.radians(self.fov_deg) / 2.0)
            d = core.normalize(px[..., None] * t * aspect * right + py[..., None] * t * up - back)
            o = np.broadcast_to(eye, d.shape).copy()
        return o, d


@dataclass
class SphereGeometry:
    mask: np.ndarray  # (H, W) bool
    index: np.ndarray  # flat pixel index of each sphere pixel, (P,)
    normal: np.ndarray  # (P, 3)
    wo: np.ndarray  # (P, 3), toward the camera
    view: np.ndarray  # (H, W, 3) ray directions


def intersect(scene: SphereScene) -> SphereGeometry:
    o, d = scene.rays()
    b = core.dot(o, d)
    c = core.dot(o, o) - 1.0
    disc = b * b - c
    hit = disc > 0
    t = -b - np.sqrt(np.where(hit, disc, 0.0))
    hit &= t > 0
    p = o + t[..., None] * d
    idx = np.flatnonzero(hit.reshape(-1))
    n = core.normalize(p.reshape(-1, 3)[idx])
    wo = -d.reshape(-1, 3)[idx]
    return SphereGeometry(hit, idx, n, wo, d)


def pixel_material(scene: SphereScene, geo: SphereGeometry) -> BrdfParams:
    m = scene.material
    if m.b_r.ndim == 0:
        p = len(geo.index)
        return BrdfParams(np.broadcast_to(m.b_d, (p, 3)), np.broadcast_to(m.b_s, (p, 3)), np.broadcast_to(m.b_r, (p,)))
    if m.b_r.shape != (scene.height, scene.width):
        raise ValueError(f"material texture {m.b_r.shape} does not match image {(scene.height, scene.width)}")
    return BrdfParams(m.b_d.reshape(-1, 3)[geo.index], m.b_s.reshape(-1, 3)[geo.index], m.b_r.reshape(-1)[geo.index])


def _compose(scene: SphereScene, geo: SphereGeometry, values: np.ndarray, env: EnvironmentMap | None) -> np.ndarray:
    img = np.zeros((scene.height * scene.width, 3), dtype=np.float64)
    if scene.background == "env" and env is not None:
        img[:] = envmap.sample_bilinear(env, geo.view.reshape(-1, 3))
    img[geo.index] = values
    return img.reshape(scene.height, scene.width, 3).astype(np.float32)


# ---------------------------------------------------------------------------
# Monte-Carlo rendering


def mc_samples(scene: SphereScene, spp: int, seed: int, geo: SphereGeometry | None = None, threads: int | None = None):
    """BRDF-importance-sampled directions and throughputs per sphere pixel.

    Returns ``(wi, throughput)`` shaped ``(P, spp, 3)``. Pixel ``k`` draws from
    the stream ``(seed, flat pixel index)``.
    """
    if spp < 1:
        raise ValueError("spp must be >= 1")
    geo = geo or intersect(scene)
    mat = pixel_material(scene, geo)

    def work(a, b):
        u = core.stream_uniforms(seed, geo.index[a:b], (spp, 3))
        m = BrdfParams(mat.b_d[a:b, None], mat.b_s[a:b, None], mat.b_r[a:b, None])
        wi, _, thr = brdf_mod.sample_from_uniforms(u, m, geo.wo[a:b, None], geo.normal[a:b, None])
        return np.concatenate([wi, thr], axis=-1)

    out = core.map_chunks(work, len(geo.index), PIXEL_CHUNK, threads)
    return out[..., :3], out[..., 3:]


def render_mc(scene: SphereScene, env: EnvironmentMap, spp: int, rng_seed: int, threads: int | None = None) -> np.ndarray:
    geo = intersect(scene)
    mat = pixel_material(scene, geo)

    def work(a, b):
        u = core.stream_uniforms(rng_seed, geo.index[a:b], (spp, 3))
        m = BrdfParams(mat.b_d[a:b, None], mat.b_s[a:b, None], mat.b_r[a:b, None])
        wi, _, thr = brdf_mod.sample_from_uniforms(u, m, geo.wo[a:b, None], geo.normal[a:b, None])
        return np.mean(thr * envmap.sample_bilinear(env, wi), axis=1)

    if spp < 1:
        raise ValueError("spp must be >= 1")
    vals = core.map_chunks(work, len(geo.index), PIXEL_CHUNK, threads)
    return _compose(scene, geo, vals, env)


# ---------------------------------------------------------------------------
# prefiltering


def prefilter_directions(env: EnvironmentMap, dirs: np.ndarray, roughness: float, spp: int, offsets: np.ndarray) -> np.ndarray:
    """Normalized GGX-weighted average of ``env`` about each of ``dirs`` (``n = v = r``).

    ``offsets`` (one 2-D rotation per direction) randomizes a shared Hammersley set.
    """
    pts = core.hammersley(spp)
    u = np.mod(pts[None, :, :] + offsets[:, None, :], 1.0)
    r = dirs[:, None, :]
    h, _ = core.ggx_half_from_uniforms(u[..., 0], u[..., 1], max(roughness, brdf_mod.MIN_ROUGHNESS), np.broadcast_to(r, u.shape[:2] + (3,)))
    l = core.reflect(r, h)
    w = np.maximum(core.dot(l, r), 0.0)
    num = np.einsum("ps,psc->pc", w, envmap.sample_bilinear(env, l))
    return num / np.maximum(w.sum(axis=1), 1e-300)[:, None]


def prefilter(env: EnvironmentMap, roughness: float, out_w: int | None = None, out_h: int | None = None,
              spp: int = 256, seed: int = 0, threads: int | None = None) -> EnvironmentMap:
    out_w = out_w or env.width
    out_h = out_h or env.height
    if not 0.0 <= roughness <= 1.0:
        raise ValueError("roughness must lie in [0, 1]")
    if roughness == 0.0:
        return envmap.resample(env, out_w, out_h)
    dirs = core.texel_directions(out_w, out_h)

    def rows(a, b):
        offs = core.stream_uniforms(seed, np.arange(a, b), (out_w, 2)).reshape(-1, 2)
        return prefilter_directions(env, dirs[a:b].reshape(-1, 3), roughness, spp, offs).reshape(b - a, out_w, 3)

    px = core.map_chunks(rows, out_h, 1, threads)
    return EnvironmentMap(px.astype(np.float32))


@dataclass
class PrefilteredPyramid:
    roughness: np.ndarray  # (L,)
    maps: np.ndarray  # (L, H, W, 3)

    def level(self, i: int) -> EnvironmentMap:
        return EnvironmentMap(self.maps[i])

    def query(self, dirs: np.ndarray, roughness) -> np.ndarray:
        """Bilinear in direction, linear in roughness between the two bracketing levels."""
        dirs = np.asarray(dirs, dtype=np.float64)
        r = np.broadcast_to(np.clip(np.asarray(roughness, dtype=np.float64), 0.0, 1.0), dirs.shape[:-1])
        grid = self.roughness
        i = np.clip(np.searchsorted(grid, r, side="right") - 1, 0, len(grid) - 2)
        t = np.clip((r - grid[i]) / (grid[i + 1] - grid[i]), 0.0, 1.0)
        h, w = self.maps.shape[1:3]
        rows, cols, wts = envmap.bilinear_taps(w, h, dirs)
        lo = np.einsum("...k,...kc->...c", wts, self.maps[i[..., None], rows, cols].astype(np.float64))
        hi = np.einsum("...k,...kc->...c", wts, self.maps[i[..., None] + 1, rows, cols].astype(np.float64))
        return lo + t[..., None] * (hi - lo)

    def __call__(self, dirs, roughness):
        return self.query(dirs, roughness)

    def dump(self, directory) -> list[str]:
        os.makedirs(directory, exist_ok=True)
        paths = []
        for k, r in enumerate(self.roughness):
            p = os.path.join(os.fspath(directory), f"level{k}_r{r:.4f}.pfm")
            envmap.write_pfm(self.maps[k], p)
            paths.append(p)
        return paths


def build_pyramid(env: EnvironmentMap, spp: int = 256, seed: int = 0, width: int | None = None,
                  height: int | None = None, threads: int | None = None) -> PrefilteredPyramid:
    grid = np.linspace(0.0, 1.0, PYRAMID_LEVELS)
    maps = [prefilter(env, float(r), width, height, spp, core.derive_seed(seed, k), threads).pixels for k, r in enumerate(grid)]
    return PrefilteredPyramid(grid, np.stack(maps))


def exact_query(env: EnvironmentMap, spp: int = 512, seed: int = 0) -> LQuery:
    """L~ evaluated by fresh prefiltering per query (slow oracle)."""

    def q(dirs, roughness):
        dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        rough = np.broadcast_to(np.asarray(roughness, dtype=np.float64), dirs.shape[:1])
        out = np.empty_like(dirs)
        for r in np.unique(rough):
            sel = rough == r
            if r <= 0:
                out[sel] = envmap.sample_bilinear(env, dirs[sel])
            else:
                offs = core.stream_uniforms(seed, [0], (int(sel.sum()), 2))[0]
                out[sel] = prefilter_directions(env, dirs[sel], float(r), spp, offs)
        return out

    return q


# ---------------------------------------------------------------------------
# split-sum LUT


@dataclass
class BrdfLut:
    """``table[j, i] = (B0, B1)`` at roughness center ``j`` and ``n.v`` center ``i``."""

    table: np.ndarray  # (N, N, 2)

    @property
    def size(self) -> int:
        return self.table.shape[0]

    def _coords(self, cos_nv, rough):
        n = self.size
        x = np.clip(np.asarray(cos_nv, dtype=np.float64) * n - 0.5, 0.0, n - 1.0)
        y = np.clip(np.asarray(rough, dtype=np.float64) * n - 0.5, 0.0, n - 1.0)
        x0 = np.minimum(np.floor(x).astype(np.int64), n - 2)
        y0 = np.minimum(np.floor(y).astype(np.int64), n - 2)
        return x0, y0, x - x0, y - y0

    def lookup(self, cos_nv, rough) -> np.ndarray:
        """Bilinear ``(B0, B1)`` lookup; returns shape ``broadcast(cos, rough) + (2,)``."""
        cos_nv, rough = np.broadcast_arrays(np.asarray(cos_nv, float), np.asarray(rough, float))
        x0, y0, fx, fy = self._coords(cos_nv, rough)
        t = self.table
        fx, fy = fx[..., None], fy[..., None]
        top = t[y0, x0] * (1 - fx) + t[y0, x0 + 1] * fx
        bot = t[y0 + 1, x0] * (1 - fx) + t[y0 + 1, x0 + 1] * fx
        return top * (1 - fy) + bot * fy

    def lookup_tensor(self, cos_nv: np.ndarray, rough: T.Tensor) -> T.Tensor:
        """Like :meth:`lookup` but differentiable in roughness; result ``rough.shape + (2,)``."""
        x0, y0, fx, fy = self._coords(cos_nv, rough.data)
        t = self.table.astype(rough.data.dtype)
        fx = fx[..., None].astype(rough.data.dtype)
        top = t[y0, x0] * (1 - fx) + t[y0, x0 + 1] * fx
        bot = t[y0 + 1, x0] * (1 - fx) + t[y0 + 1, x0 + 1] * fx
        fyv = fy[..., None].astype(rough.data.dtype)
        out = top * (1 - fyv) + bot * fyv
        n = self.size
        inside = ((rough.data * n - 0.5) > 0) & ((rough.data * n - 0.5) < n - 1)
        slope = (bot - top) * (n * inside)[..., None]
        return T.make_op(out, (rough,), lambda g: ((g * slope).sum(axis=-1),))

    def dump(self, path) -> None:
        """Write as a 3-channel PFM (R = B0, G = B1, B = 0)."""
        rgb = np.zeros(self.table.shape[:2] + (3,), dtype=np.float32)
        rgb[..., :2] = self.table
        envmap.write_pfm(rgb, path)

    @classmethod
    def load(cls, path) -> "BrdfLut":
        data = envmap.read_pfm(path)
        return cls(np.ascontiguousarray(data[..., :2]).astype(np.float64))


def bake_lut(N: int = 32, spp: int = 1024, seed: int = 0) -> BrdfLut:
    """Integrate the GGX specular lobe into scale ``B0`` (times F0) and bias ``B1`` (times f90)."""
    if N < 16:
        raise ValueError("LUT resolution must be at least 16")
    centers = (np.arange(N) + 0.5) / N
    pts = core.hammersley(spp)
    table = np.zeros((N, N, 2))
    n = np.array([0.0, 0.0, 1.0])
    for j, rough in enumerate(centers):
        offs = core.RngStream(seed, j).uniform((N, 2))
        u = np.mod(pts[None] + offs[:, None], 1.0)
        cos_v = centers[:, None]
        v = np.stack(np.broadcast_arrays(np.sqrt(1 - cos_v * cos_v), 0.0 * cos_v, cos_v), axis=-1)
        h, _ = core.ggx_half_from_uniforms(u[..., 0], u[..., 1], rough, np.broadcast_to(n, u.shape[:2] + (3,)))
        l = core.reflect(v, h)
        nl = l[..., 2]
        nh = np.clip(h[..., 2], 0.0, 1.0)
        vh = np.clip(core.dot(v, h), 0.0, 1.0)
        ok = nl > 0
        g = brdf_mod.smith_g(rough, cos_v, np.where(ok, nl, 1.0))
        gvis = np.where(ok, g * vh / np.maximum(nh * cos_v, 1e-12), 0.0)
        fc = (1.0 - vh) ** 5
        table[j, :, 0] = np.mean((1.0 - fc) * gvis, axis=1)
        table[j, :, 1] = np.mean(fc * gvis, axis=1)
    return BrdfLut(table)


# ---------------------------------------------------------------------------
# split-sum shading


def dominant_direction(n: np.ndarray, r: np.ndarray, roughness) -> np.ndarray:
    """Specular lookup direction pulled from ``r`` toward ``n`` as roughness grows."""
    a = np.asarray(roughness, dtype=np.float64)[..., None]
    f = (1.0 - a) * (np.sqrt(1.0 - a) + a)
    return core.normalize(n + (r - n) * f)


def shade_split_sum(b: BrdfParams, n: np.ndarray, wo: np.ndarray, L_query: LQuery, lut: BrdfLut,
                    lookup: str = "reflect") -> np.ndarray:
    """``b_d L~(n, 1) + (b_s B0 + f90 B1) L~(reflect(wo, n), b_r)``; zero when ``wo`` is below the horizon.

    ``lookup="dominant"`` swaps the mirror direction for :func:`dominant_direction`,
    which tracks the off-specular peak of rough lobes. The default is the plain
    mirror direction used everywhere else in the package.
    """
    n = np.asarray(n, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    cos = core.dot(wo, n)
    r = core.reflect(wo, n)
    if lookup == "dominant":
        r = dominant_direction(n, r, b.b_r)
    elif lookup != "reflect":
        raise ValueError(f"unknown lookup {lookup!r}")
    ab = lut.lookup(np.clip(cos, 0.0, 1.0), b.b_r)
    spec_w = b.b_s * ab[..., 0:1] + (brdf_mod.grazing_reflectance(b.b_s) * ab[..., 1])[..., None]
    diffuse = L_query(n, np.ones(n.shape[:-1]))
    specular = L_query(r, np.broadcast_to(b.b_r, r.shape[:-1]))
    out = b.b_d * diffuse + spec_w * specular
    return np.where((cos > 0)[..., None], out, 0.0)


def render_split(scene: SphereScene, L_query: LQuery, lut: BrdfLut, env: EnvironmentMap | None = None,
                 threads: int | None = None, lookup: str = "reflect") -> np.ndarray:
    geo = intersect(scene)
    mat = pixel_material(scene, geo)

    def work(a, c):
        m = BrdfParams(mat.b_d[a:c], mat.b_s[a:c], mat.b_r[a:c])
        return shade_split_sum(m, geo.normal[a:c], geo.wo[a:c], L_query, lut, lookup)

    vals = core.map_chunks(work, len(geo.index), 4096, threads)
    return _compose(scene, geo, vals, env)
