"""Cook-Torrance BRDF with a GGX distribution, separable Smith masking and Schlick Fresnel.

Roughness is used directly as the GGX ``alpha``. The Schlick grazing
reflectance is ``f90 = clamp(50 * mean(b_s), 0, 1)``: specular reflectance
below 2% is treated as pre-shadowed, so ``b_s = 0`` gives a purely diffuse
surface.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core

MIN_ROUGHNESS = 0.01


@dataclass(frozen=True)
class BrdfParams:
    """Diffuse albedo ``b_d``, specular reflectance ``b_s`` (both RGB) and roughness ``b_r``.

    Fields may carry leading batch axes: ``b_d``/``b_s`` shaped ``(..., 3)``
    and ``b_r`` shaped ``(...)``.
    """

    b_d: np.ndarray
    b_s: np.ndarray
    b_r: np.ndarray

    def __post_init__(self):
        b_d = np.asarray(self.b_d, dtype=np.float64)
        b_s = np.asarray(self.b_s, dtype=np.float64)
        b_r = np.asarray(self.b_r, dtype=np.float64)
        if b_d.shape[-1:] != (3,) or b_s.shape[-1:] != (3,):
            raise ValueError("b_d and b_s must be RGB triples")
        for name, arr, lo, hi in (("b_d", b_d, 0.0, 1.0), ("b_s", b_s, 0.0, 1.0), ("b_r", b_r, 0.0, 1.0)):
            if np.any(arr < lo - 1e-9) or np.any(arr > hi + 1e-9) or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} outside [{lo}, {hi}]")
        object.__setattr__(self, "b_d", b_d)
        object.__setattr__(self, "b_s", b_s)
        object.__setattr__(self, "b_r", np.maximum(b_r, MIN_ROUGHNESS))

    @classmethod
    def uniform(cls, diffuse, specular, roughness) -> "BrdfParams":
        return cls(np.broadcast_to(np.asarray(diffuse, float), (3,)), np.broadcast_to(np.asarray(specular, float), (3,)), roughness)

    def as_vector(self) -> np.ndarray:
        """Pack to the 7-column layout ``(b_d, b_s, b_r)``."""
        return np.concatenate([self.b_d, self.b_s, self.b_r[..., None]], axis=-1)

    @classmethod
    def from_vector(cls, p: np.ndarray) -> "BrdfParams":
        p = np.asarray(p, dtype=np.float64)
        return cls(p[..., 0:3], p[..., 3:6], p[..., 6])


def ggx_d(alpha, cos_nh):
    a2 = np.asarray(alpha, dtype=np.float64) ** 2
    c = np.asarray(cos_nh, dtype=np.float64)
    denom = c * c * (a2 - 1.0) + 1.0
    return a2 / (np.pi * denom * denom)


def smith_g1(alpha, c):
    a2 = np.asarray(alpha, dtype=np.float64) ** 2
    c = np.asarray(c, dtype=np.float64)
    return 2.0 * c / np.maximum(c + np.sqrt(a2 + (1.0 - a2) * c * c), 1e-300)


def smith_g(alpha, cos_nv, cos_nl):
    return smith_g1(alpha, cos_nv) * smith_g1(alpha, cos_nl)


def fresnel_schlick(f0, cos, f90=1.0):
    f0 = np.asarray(f0, dtype=np.float64)
    w = (1.0 - np.clip(np.asarray(cos, dtype=np.float64), 0.0, 1.0)) ** 5
    f90 = np.asarray(f90, dtype=np.float64)
    if f0.ndim and w.ndim:
        w = w[..., None]
        if f90.ndim:
            f90 = f90[..., None]
    return f0 + (f90 - f0) * w


def grazing_reflectance(b_s) -> np.ndarray:
    return np.clip(50.0 * np.mean(np.asarray(b_s, dtype=np.float64), axis=-1), 0.0, 1.0)


def eval(b: BrdfParams, wi: np.ndarray, wo: np.ndarray, n: np.ndarray) -> np.ndarray:
    """BRDF value ``b_d/pi + D G F / (4 cos_i cos_o)``; zero below either horizon."""
    cos_i = core.dot(wi, n)
    cos_o = core.dot(wo, n)
    valid = (cos_i > 0) & (cos_o > 0)
    ci = np.where(valid, cos_i, 1.0)
    co = np.where(valid, cos_o, 1.0)
    h = core.normalize(wi + wo)
    cos_h = np.clip(core.dot(h, n), 0.0, 1.0)
    cos_vh = np.clip(core.dot(h, wo), 0.0, 1.0)
    spec = ggx_d(b.b_r, cos_h) * smith_g(b.b_r, co, ci) / (4.0 * ci * co)
    F = fresnel_schlick(b.b_s, cos_vh, grazing_reflectance(b.b_s))
    f = b.b_d / np.pi + F * spec[..., None]
    return np.where(valid[..., None], f, 0.0)


def specular_probability(b: BrdfParams) -> np.ndarray:
    md = np.mean(b.b_d, axis=-1)
    ms = np.mean(b.b_s, axis=-1)
    total = md + ms
    return np.where(total > 0, ms / np.where(total > 0, total, 1.0), 0.5)


def pdf(b: BrdfParams, wi: np.ndarray, wo: np.ndarray, n: np.ndarray) -> np.ndarray:
    """Mixture density of :func:`sample` for direction ``wi``."""
    p_s = specular_probability(b)
    cos_i = core.dot(wi, n)
    h = core.normalize(wi + wo)
    cos_h = np.clip(core.dot(h, n), 0.0, 1.0)
    cos_vh = np.abs(core.dot(h, wo))
    spec_pdf = ggx_d(b.b_r, cos_h) * cos_h / (4.0 * np.maximum(cos_vh, 1e-12))
    diff_pdf = np.maximum(cos_i, 0.0) / np.pi
    return np.where(cos_i > 0, (1.0 - p_s) * diff_pdf + p_s * spec_pdf, 0.0)


def sample_from_uniforms(u: np.ndarray, b: BrdfParams, wo: np.ndarray, n: np.ndarray):
    """Mixture sampling from uniforms ``u[..., 0:3]`` (lobe choice, then two dims).

    Returns ``(wi, pdf, throughput)`` where throughput is ``f cos / pdf``;
    directions that land below the horizon get zero throughput.
    """
    p_s = specular_probability(b)
    use_spec = u[..., 0] < p_s
    wi_d, _ = core.cosine_from_uniforms(u[..., 1], u[..., 2], n)
    h, _ = core.ggx_half_from_uniforms(u[..., 1], u[..., 2], b.b_r, n)
    wi_s = core.reflect(wo, h)
    wi = np.where(use_spec[..., None], wi_s, wi_d)
    p = pdf(b, wi, wo, n)
    cos_i = np.maximum(core.dot(wi, n), 0.0)
    f = eval(b, wi, wo, n)
    ok = (p > 0) & (cos_i > 0)
    thr = np.where(ok[..., None], f * (cos_i / np.where(ok, p, 1.0))[..., None], 0.0)
    return wi, p, thr


def sample(rng: core.RngStream, b: BrdfParams, wo: np.ndarray, n: np.ndarray, count: int = 1):
    u = rng.uniform((count, 3))
    return sample_from_uniforms(u, b, np.broadcast_to(wo, (count, 3)), np.broadcast_to(n, (count, 3)))
