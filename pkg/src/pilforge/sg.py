"""Spherical-Gaussian illumination baseline.

A lobe is ``G(w) = mu * exp(lambda * (w . xi - 1))``. Shading uses the
standard SG pipeline: the clamped cosine is itself approximated by an SG about
the normal, and the GGX distribution becomes an SG about the half vector that
is warped into reflection space. Both are then integrated against the light
lobes in closed form. Specular light is normalised by the warped lobe's own
integral and scaled by the split-sum weights, so a constant environment shades
exactly like :func:`pilforge.mc.shade_split_sum`.

Parameters are packed as 168 numbers for 24 lobes: raw axes (normalised on
use), log sharpness, log amplitude.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import brdf as brdf_mod
from . import core
from . import tensor as T
from .brdf import BrdfParams
from .envmap import EnvironmentMap
from .errors import ParseError

LOBES = 24
PARAMS_PER_LOBE = 7
MIN_SHARPNESS = 1e-3
MAX_SHARPNESS = 1e4
# clamped-cosine fit: sharpness from the usual least-squares fit, amplitude set
# so the lobe integrates to pi like the cosine it stands in for
COSINE_SHARPNESS = 2.133
COSINE_AMPLITUDE = COSINE_SHARPNESS / (2.0 * (1.0 - np.exp(-2.0 * COSINE_SHARPNESS)))
WARP_GUARD = 1e-4


@dataclass
class SgIllumination:
    axes: np.ndarray  # (K, 3) unit
    sharpness: np.ndarray  # (K,)
    amplitude: np.ndarray  # (K, 3)

    def __post_init__(self):
        self.axes = core.normalize(np.asarray(self.axes, dtype=np.float64).reshape(-1, 3))
        self.sharpness = np.clip(np.asarray(self.sharpness, dtype=np.float64).reshape(-1), MIN_SHARPNESS, MAX_SHARPNESS)
        self.amplitude = np.asarray(self.amplitude, dtype=np.float64).reshape(-1, 3)
        if not (len(self.axes) == len(self.sharpness) == len(self.amplitude)):
            raise ValueError("axes, sharpness and amplitude disagree on the lobe count")

    def __len__(self) -> int:
        return len(self.axes)

    @classmethod
    def initial(cls, mean_radiance=1.0, count: int = LOBES, sharpness: float = 10.0) -> "SgIllumination":
        """Fibonacci axes with equal lobes whose sum averages ``mean_radiance`` over the sphere."""
        lam = np.full(count, sharpness)
        per_lobe = 2.0 * np.pi * (1.0 - np.exp(-2.0 * sharpness)) / sharpness
        mu = np.broadcast_to(np.asarray(mean_radiance, dtype=np.float64), (3,)) * 4.0 * np.pi / (count * per_lobe)
        return cls(core.fibonacci_sphere(count), lam, np.tile(mu, (count, 1)))

    def eval(self, dirs: np.ndarray) -> np.ndarray:
        return eval(self, dirs)

    def integral(self) -> np.ndarray:
        return integral(self.sharpness, self.amplitude)

    # -- packing ----------------------------------------------------------

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.axes.reshape(-1), np.log(self.sharpness), np.log(np.maximum(self.amplitude, 1e-30)).reshape(-1)])

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "SgIllumination":
        v = np.asarray(v, dtype=np.float64)
        k = v.size // PARAMS_PER_LOBE
        if v.size != k * PARAMS_PER_LOBE:
            raise ValueError(f"parameter vector of length {v.size} is not a multiple of {PARAMS_PER_LOBE}")
        return cls(v[: 3 * k].reshape(k, 3), np.exp(v[3 * k : 4 * k]), np.exp(v[4 * k :]).reshape(k, 3))

    @property
    def parameter_count(self) -> int:
        return PARAMS_PER_LOBE * len(self)

    # -- text format ------------------------------------------------------

    def save(self, path) -> None:
        lines = []
        for xi, lam, mu in zip(self.axes, self.sharpness, self.amplitude):
            lines.append(" ".join(f"{x:.9g}" for x in (*xi, lam, *mu)))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "SgIllumination":
        raw = Path(path).read_bytes()
        rows = []
        offset = 0
        for line in raw.split(b"\n"):
            text = line.strip()
            if text and not text.startswith(b"#"):
                parts = text.split()
                if len(parts) != 7:
                    raise ParseError(f"expected 7 numbers per lobe, got {len(parts)}", offset)
                try:
                    rows.append([float(p) for p in parts])
                except ValueError:
                    raise ParseError("non-numeric lobe entry", offset) from None
            offset += len(line) + 1
        if not rows:
            raise ParseError("no lobes in file", 0)
        a = np.array(rows)
        return cls(a[:, 0:3], a[:, 3], a[:, 4:7])


# -- closed forms ---------------------------------------------------------


def eval(lobes: SgIllumination, dirs: np.ndarray) -> np.ndarray:
    """``sum_k mu_k exp(lambda_k (w . xi_k - 1))`` for ``dirs (..., 3)``."""
    dirs = np.asarray(dirs, dtype=np.float64)
    cos = dirs @ lobes.axes.T
    return np.exp(lobes.sharpness * (cos - 1.0)) @ lobes.amplitude


def integral(sharpness, amplitude=1.0):
    """Sphere integral ``2 pi mu (1 - exp(-2 lambda)) / lambda``."""
    lam = np.asarray(sharpness, dtype=np.float64)
    mu = np.asarray(amplitude, dtype=np.float64)
    s = 2.0 * np.pi * (-np.expm1(-2.0 * lam)) / lam
    return mu * (s[..., None] if mu.ndim > s.ndim else s)


def inner_product(xi1, lam1, xi2, lam2) -> np.ndarray:
    """Integral of the product of two unit-amplitude lobes."""
    xi1, xi2 = np.asarray(xi1, float), np.asarray(xi2, float)
    lam1, lam2 = np.asarray(lam1, float), np.asarray(lam2, float)
    d = np.linalg.norm(lam1[..., None] * xi1 + lam2[..., None] * xi2, axis=-1)
    d = np.maximum(d, 1e-8)
    return 2.0 * np.pi * np.exp(d - lam1 - lam2) * (-np.expm1(-2.0 * d)) / d


# -- differentiable pieces ------------------------------------------------


def unpack(params: T.Tensor):
    """Raw 7K-vector -> ``(axes (K,3), sharpness (K,), amplitude (K,3))`` tensors."""
    k = params.shape[0] // PARAMS_PER_LOBE
    raw = T.reshape(T.slice_(params, slice(0, 3 * k)), (k, 3))
    axes = raw / T.sqrt(T.reduce_sum(T.square(raw), axis=-1, keepdims=True))
    lam = T.clip(T.exp(T.slice_(params, slice(3 * k, 4 * k))), MIN_SHARPNESS, MAX_SHARPNESS)
    mu = T.reshape(T.exp(T.slice_(params, slice(4 * k, 7 * k))), (k, 3))
    return axes, lam, mu


def eval_tensor(params: T.Tensor, dirs: np.ndarray) -> T.Tensor:
    axes, lam, mu = unpack(params)
    cos = T.matmul(np.asarray(dirs), T.transpose(axes))
    return T.matmul(T.exp(lam * (cos - 1.0)), mu)


def _lobe_product(axes, lam, mu, centers: np.ndarray, sharp: np.ndarray) -> T.Tensor:
    """``sum_k <G(centers, sharp), light_k>`` for ``P`` unit-amplitude query lobes."""
    P = centers.shape[0]
    K = axes.shape[0]
    u = T.reshape(lam, (1, K, 1)) * T.reshape(axes, (1, K, 3)) + (sharp[:, None] * centers)[:, None, :]
    d = T.sqrt(T.reduce_sum(T.square(u), axis=-1) + 1e-16)
    e = T.exp(d - T.reshape(lam, (1, K)) - sharp[:, None])
    s = (1.0 - T.exp(d * -2.0)) / d
    w = (2.0 * np.pi) * e * s  # (P, K)
    return T.matmul(w, mu)


def shade_tensor(params: T.Tensor, b: BrdfParams, n: np.ndarray, wo: np.ndarray, lut) -> T.Tensor:
    """Differentiable outgoing radiance for ``P`` shading points; zero below the horizon."""
    return _shade_lobes(*unpack(params), b, n, wo, lut)


def _shade_lobes(axes, lam, mu, b: BrdfParams, n: np.ndarray, wo: np.ndarray, lut) -> T.Tensor:
    n = np.asarray(n, dtype=np.float64).reshape(-1, 3)
    wo = np.asarray(wo, dtype=np.float64).reshape(-1, 3)
    P = n.shape[0]
    cos = core.dot(wo, n)
    above = (cos > 0).astype(np.float64)[:, None]
    b_d = np.broadcast_to(b.b_d, (P, 3))
    b_s = np.broadcast_to(b.b_s, (P, 3))
    rough = np.broadcast_to(b.b_r, (P,))

    out = None
    if np.any(b_d > 0):
        diff = _lobe_product(axes, lam, mu, n, np.full(P, COSINE_SHARPNESS)) * (COSINE_AMPLITUDE / np.pi)
        out = diff * (b_d * above)
    if np.any(b_s > 0):
        r = core.reflect(wo, n)
        a2 = rough**2
        warp = (2.0 / a2) / (4.0 * np.maximum(np.abs(core.dot(r, n)), WARP_GUARD))
        norm = integral(warp)
        spec = _lobe_product(axes, lam, mu, r, warp) / norm[:, None]
        ab = lut.lookup(np.clip(cos, 0.0, 1.0), rough)
        w = b_s * ab[:, 0:1] + (brdf_mod.grazing_reflectance(b_s) * ab[:, 1])[:, None]
        s = spec * (w * above)
        out = s if out is None else out + s
    if out is None:
        out = T.Tensor(np.zeros((P, 3)))
    return out


def shade(lobes: SgIllumination, b: BrdfParams, n: np.ndarray, wo: np.ndarray, lut) -> np.ndarray:
    n = np.asarray(n, dtype=np.float64)
    lead = n.shape[:-1]
    with T.precision(np.float64), T.no_grad():
        out = _shade_lobes(T.Tensor(lobes.axes), T.Tensor(lobes.sharpness), T.Tensor(lobes.amplitude),
                           b, n.reshape(-1, 3), np.asarray(wo).reshape(-1, 3), lut)
    return out.data.reshape(lead + (3,))


def flops_per_eval(count: int = LOBES) -> int:
    """Per shading point, both terms, counting exp/sqrt/div as one FLOP each."""
    per_lobe = 3 + 3 + 3 + 5 + 1 + 3 + 4 + 6  # build u, |u|, exponent, sinh factor, weight times RGB amplitude
    return 2 * count * per_lobe


# -- fitting ------------------------------------------------------------------


def fit_to_envmap(env: EnvironmentMap, steps: int = 500, lr: float = 0.05, seed: int = 0,
                  count: int = LOBES, eps: float = 1e-3) -> SgIllumination:
    """Fit lobes to a map by Adam on the solid-angle-weighted squared log error.

    Axes start on a Fibonacci sphere turned by a seed-derived rotation (none
    for seed 0), sharpness 10, amplitudes at the map mean.
    """
    d = env.directions().reshape(-1, 3)
    L = env.pixels.reshape(-1, 3).astype(np.float64)
    w = env.solid_angles().reshape(-1)
    w = (w / w.sum())[:, None]
    init = SgIllumination.initial(np.maximum(L.mean(axis=0), 1e-6), count)
    if seed:
        q, _ = np.linalg.qr(core.RngStream(seed, 0x56).generator().normal(size=(3, 3)))
        init = SgIllumination(init.axes @ q.T, init.sharpness, init.amplitude)
    logL = np.log(L + eps)
    with T.precision(np.float64):
        p = T.parameter(init.to_vector())
        opt = T.Adam([p], lr=lr)
        for _ in range(steps):
            pred = eval_tensor(p, d)
            loss = T.reduce_sum(T.square(T.log(pred + eps) - logL) * w)
            opt.zero_grad()
            loss.backward()
            opt.step()
        return SgIllumination.from_vector(p.data)
