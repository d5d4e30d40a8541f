"""Inverse problems: fit illumination to sphere renders, and the joint BRDF/illumination decomposition.

Three illumination backends share one loop shape (Adam on a parameter
vector, HDR mean squared error against the target's sphere pixels):

* ``mc_direct``: log texels of an equirectangular map, re-rendered by Monte
  Carlo at a few samples per pixel. The texel gradient is accumulated by
  hand through the bilinear lookups, from a second, independent set of
  samples so that it is unbiased.
* ``sg``: 24 spherical Gaussians shaded in closed form.
* ``pil``: a 128-D latent queried through a frozen network.

PSNR is measured on tone-mapped images over the sphere pixels.
"""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import core, envmap, mc, pil, sg
from . import tensor as T
from .brdf import BrdfParams
from .envmap import EnvironmentMap
from .errors import NumericalError

BACKENDS = ("mc_direct", "sg", "pil")
PSNR_CAP = 99.0
CSV_COLUMNS = ("backend", "roughness", "psnr_db", "seconds", "param_count")


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Peak-1 PSNR of two LDR images, optionally over ``mask`` pixels; capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if mask is not None:
        a, b = a[mask], b[mask]
    mse = float(np.mean((a - b) ** 2)) if a.size else 0.0
    if mse <= 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, -10.0 * np.log10(mse)))


def render_psnr(pred_hdr: np.ndarray, target_hdr: np.ndarray, mask: np.ndarray | None = None, exposure: float = 1.0) -> float:
    return psnr(envmap.tone_map(pred_hdr, exposure), envmap.tone_map(target_hdr, exposure), mask)


# -- per-backend renderers ------------------------------------------------


@dataclass
class ShadingSetup:
    """Sphere pixels of a scene with their split-sum weights precomputed."""

    geo: mc.SphereGeometry
    mat: BrdfParams
    spec_weight: np.ndarray  # (P, 3)
    reflect: np.ndarray  # (P, 3)

    @classmethod
    def build(cls, scene: mc.SphereScene, lut: mc.BrdfLut) -> "ShadingSetup":
        from . import brdf as brdf_mod

        geo = mc.intersect(scene)
        mat = mc.pixel_material(scene, geo)
        cos = np.clip(core.dot(geo.wo, geo.normal), 0.0, 1.0)
        ab = lut.lookup(cos, mat.b_r)
        w = mat.b_s * ab[:, 0:1] + (brdf_mod.grazing_reflectance(mat.b_s) * ab[:, 1])[:, None]
        above = (core.dot(geo.wo, geo.normal) > 0)[:, None]
        return cls(geo, mat, np.where(above, w, 0.0), core.reflect(geo.wo, geo.normal))

    @property
    def diffuse_weight(self) -> np.ndarray:
        above = (core.dot(self.geo.wo, self.geo.normal) > 0)[:, None]
        return np.where(above, self.mat.b_d, 0.0)


def pil_shade(model: pil.PilModel, z, setup: ShadingSetup) -> T.Tensor:
    """Split-sum shading of every sphere pixel with the network as ``L~``; ``(P, 3)``."""
    z = T.as_tensor(z)
    zz = T.reshape(z, (1, -1))
    P = len(setup.geo.index)
    spec = model.forward(zz, setup.reflect[None], np.asarray(setup.mat.b_r)[None])
    out = T.reshape(spec, (P, 3)) * setup.spec_weight
    dw = setup.diffuse_weight
    if np.any(dw > 0):
        diff = model.forward(zz, setup.geo.normal[None], np.ones((1, P)))
        out = out + T.reshape(diff, (P, 3)) * dw
    return out


def render_pil(scene: mc.SphereScene, model: pil.PilModel, z, lut: mc.BrdfLut) -> np.ndarray:
    setup = ShadingSetup.build(scene, lut)
    with T.no_grad():
        vals = pil_shade(model, np.asarray(z, dtype=np.float32), setup).data
    return mc._compose(scene, setup.geo, vals, None)


def render_sg(scene: mc.SphereScene, lobes: sg.SgIllumination, lut: mc.BrdfLut) -> np.ndarray:
    geo = mc.intersect(scene)
    mat = mc.pixel_material(scene, geo)
    vals = sg.shade(lobes, mat, geo.normal, geo.wo, lut)
    return mc._compose(scene, geo, vals, None)


# -- illumination fitting -------------------------------------------------


@dataclass
class RecoveryTask:
    target: np.ndarray  # (H, W, 3) HDR
    scene: mc.SphereScene
    backend: str
    steps: int = 1000
    lr: float | None = None
    seed: int = 0
    lut: mc.BrdfLut | None = None
    model: pil.PilModel | None = None
    init: Any = None  # backend-specific starting parameters
    env_width: int = 128
    env_height: int = 64
    mc_spp: int = 8
    final_spp: int = 128
    threads: int | None = None

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}; expected one of {', '.join(BACKENDS)}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.backend == "pil" and self.model is None:
            raise ValueError("pil backend needs a trained model")


DEFAULT_LR = {"mc_direct": 0.05, "sg": 0.03, "pil": 0.01}


@dataclass
class RecoveryReport:
    backend: str
    roughness: float
    losses: list[float]
    psnr_db: float
    seconds: float
    param_count: int
    artifact: Any
    render: np.ndarray
    first_gradient_norm: float = 0.0

    def csv_row(self, timing: bool = True) -> dict:
        return {
            "backend": self.backend,
            "roughness": f"{self.roughness:.4f}",
            "psnr_db": f"{self.psnr_db:.4f}",
            "seconds": f"{self.seconds:.3f}" if timing else "0.000",
            "param_count": str(self.param_count),
        }


class _Problem:
    """Loss and gradient of one backend as a function of its flat parameter vector."""

    param_count: int

    def loss_grad(self, x: np.ndarray, step: int) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def finish(self, x: np.ndarray):
        """(artifact, re-rendered HDR image)."""
        raise NotImplementedError


def _target_pixels(task: RecoveryTask, geo: mc.SphereGeometry) -> np.ndarray:
    t = np.asarray(task.target, dtype=np.float64)
    if t.shape != (task.scene.height, task.scene.width, 3):
        raise ValueError(f"target shape {t.shape} does not match scene {(task.scene.height, task.scene.width, 3)}")
    return t.reshape(-1, 3)[geo.index]


def _mean_level(target: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Constant radiance that best explains the target given per-pixel weights."""
    num = (target * weight).sum(axis=0)
    den = (weight * weight).sum(axis=0)
    return np.maximum(num / np.maximum(den, 1e-12), 1e-3)


class _SgProblem(_Problem):
    def __init__(self, task: RecoveryTask, lut: mc.BrdfLut):
        self.task, self.lut = task, lut
        self.geo = mc.intersect(task.scene)
        self.mat = mc.pixel_material(task.scene, self.geo)
        self.target = _target_pixels(task, self.geo)
        init = task.init
        if init is None:
            setup = ShadingSetup.build(task.scene, lut)
            init = sg.SgIllumination.initial(_mean_level(self.target, setup.spec_weight + setup.diffuse_weight))
        self.x0 = init.to_vector() if isinstance(init, sg.SgIllumination) else np.asarray(init, dtype=np.float64)
        self.param_count = self.x0.size

    def loss_grad(self, x, step):
        with T.precision(np.float64):
            p = T.parameter(x)
            pred = sg.shade_tensor(p, self.mat, self.geo.normal, self.geo.wo, self.lut)
            loss = T.reduce_mean(T.square(pred - self.target))
            loss.backward()
            return float(loss.data), p.grad

    def finish(self, x):
        lobes = sg.SgIllumination.from_vector(x)
        return lobes, render_sg(self.task.scene, lobes, self.lut)


class _PilProblem(_Problem):
    def __init__(self, task: RecoveryTask, lut: mc.BrdfLut):
        self.task, self.lut, self.model = task, lut, task.model
        self.setup = ShadingSetup.build(task.scene, lut)
        self.target = _target_pixels(task, self.setup.geo).astype(np.float32)
        init = task.init if task.init is not None else np.zeros(self.model.latent_dim)
        self.x0 = np.asarray(init, dtype=np.float32).copy()
        self.param_count = self.x0.size

    def loss_grad(self, x, step):
        z = T.parameter(x)
        with T.frozen(self.model.parameters()):
            pred = pil_shade(self.model, z, self.setup)
            loss = T.reduce_mean(T.square(pred - self.target))
            loss.backward()
        return float(loss.data), z.grad

    def finish(self, x):
        return x.copy(), render_pil(self.task.scene, self.model, x, self.lut)


class _McProblem(_Problem):
    def __init__(self, task: RecoveryTask, lut: mc.BrdfLut | None):
        self.task = task
        self.geo = mc.intersect(task.scene)
        self.target = _target_pixels(task, self.geo)
        h, w = task.env_height, task.env_width
        self.shape = (h, w, 3)
        init = task.init
        if init is None:
            mat = mc.pixel_material(task.scene, self.geo)
            level = _mean_level(self.target, np.maximum(mat.b_d + mat.b_s, 1e-3))
            init = np.broadcast_to(np.log(level), self.shape)
        elif isinstance(init, EnvironmentMap):
            init = np.log(np.maximum(envmap.resample(init, w, h).pixels.astype(np.float64), 1e-8))
        self.x0 = np.asarray(init, dtype=np.float64).reshape(-1).copy()
        self.param_count = self.x0.size

    def _taps(self, seed):
        wi, thr = mc.mc_samples(self.task.scene, self.task.mc_spp, seed, self.geo, self.task.threads)
        h, w, _ = self.shape
        rows, cols, wts = envmap.bilinear_taps(w, h, wi)
        return thr, rows * w + cols, wts

    def loss_grad(self, x, step):
        h, w, _ = self.shape
        texels = np.exp(x.reshape(h * w, 3))
        spp = self.task.mc_spp
        thr, flat, wts = self._taps(core.derive_seed(self.task.seed, step, 0))
        radiance = np.einsum("psk,pskc->psc", wts, texels[flat])
        pred = np.mean(thr * radiance, axis=1)
        resid = pred - self.target
        loss = float(np.mean(resid**2))
        # adjoint pass with independent samples
        dpred = 2.0 * resid / resid.size
        thr_b, flat_b, wts_b = self._taps(core.derive_seed(self.task.seed, step, 1))
        grad = np.zeros((h * w, 3))
        for c in range(3):
            contrib = (dpred[:, None, c, None] * thr_b[:, :, c, None] / spp) * wts_b
            grad[:, c] = np.bincount(flat_b.reshape(-1), weights=contrib.reshape(-1), minlength=h * w)
        grad *= texels
        return loss, grad.reshape(-1)

    def finish(self, x):
        env = EnvironmentMap(np.exp(x.reshape(self.shape)).astype(np.float32))
        img = mc.render_mc(self.task.scene, env, self.task.final_spp, core.derive_seed(self.task.seed, "final"), self.task.threads)
        return env, img


def _problem(task: RecoveryTask) -> _Problem:
    lut = task.lut
    if lut is None and task.backend != "mc_direct":
        lut = mc.bake_lut()
    if task.backend == "sg":
        return _SgProblem(task, lut)
    if task.backend == "pil":
        return _PilProblem(task, lut)
    return _McProblem(task, lut)


def first_step_gradient(task: RecoveryTask, step: int = 0) -> np.ndarray:
    """Gradient of the loss at the task's initial parameters."""
    prob = _problem(task)
    return prob.loss_grad(prob.x0.copy(), step)[1]


def fit_illumination(task: RecoveryTask) -> RecoveryReport:
    """Adam on the backend's parameters; ``losses`` holds ``steps + 1`` entries."""
    prob = _problem(task)
    lr = task.lr if task.lr is not None else DEFAULT_LR[task.backend]
    x = prob.x0.copy()
    state = T.AdamState(lr=lr)
    losses = []
    t0 = time.perf_counter()
    first = 0.0
    for step in range(task.steps + 1):
        loss, grad = prob.loss_grad(x, step)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite loss or gradient in {task.backend} fit", step)
        if step == 0:
            first = float(np.linalg.norm(grad))
        losses.append(loss)
        if step < task.steps:
            T.adam_step(state, [x], [grad.astype(x.dtype)])
    artifact, render = prob.finish(x)
    seconds = time.perf_counter() - t0
    geo = mc.intersect(task.scene)
    mask = geo.mask
    rough = float(np.mean(task.scene.material.b_r))
    return RecoveryReport(task.backend, rough, losses, render_psnr(render, task.target, mask), seconds,
                          prob.param_count, artifact, render, first)


# -- reporting ------------------------------------------------------------


def compare(reports: Sequence[RecoveryReport], csv_path=None, png_path=None, timing: bool = True,
            inset_roughness: float | None = None) -> str:
    """CSV text (and optional files) plus a side-by-side montage of re-renders with illumination insets."""
    if not reports:
        raise ValueError("compare needs at least one report")
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.csv_row(timing))
    text = buf.getvalue()
    if csv_path is not None:
        Path(csv_path).write_text(text)
    if png_path is not None:
        envmap.write_png(montage(reports, inset_roughness), png_path)
    return text


def illumination_preview(report: RecoveryReport, width: int = 64, height: int = 32, model: pil.PilModel | None = None) -> np.ndarray:
    art = report.artifact
    if isinstance(art, EnvironmentMap):
        return envmap.resample(art, width, height).pixels
    if isinstance(art, sg.SgIllumination):
        return art.eval(core.texel_directions(width, height))
    if model is not None:
        return pil.reconstruct(model, art, width, height, report.roughness).pixels
    return np.zeros((height, width, 3))


def montage(reports: Sequence[RecoveryReport], inset_roughness: float | None = None, models: dict | None = None) -> np.ndarray:
    """Tone-mapped re-renders side by side, each with its illumination in the top-left corner."""
    tiles = []
    for r in reports:
        img = envmap.tone_map(r.render)
        h, w = img.shape[:2]
        iw, ih = max(2, w // 2), max(1, w // 4)
        model = (models or {}).get(r.backend)
        inset = envmap.tone_map(illumination_preview(r, iw, ih, model))
        tile = img.copy()
        tile[:ih, :iw] = inset
        tiles.append(tile)
    height = max(t.shape[0] for t in tiles)
    padded = [np.pad(t, ((0, height - t.shape[0]), (0, 2), (0, 0))) for t in tiles]
    return np.concatenate(padded, axis=1)[:, :-2]


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# -- joint decomposition --------------------------------------------------


@dataclass
class DecomposeReport:
    losses: list[float]
    brdf: np.ndarray  # (P, 7) decoded parameters per sphere pixel
    brdf_latents: np.ndarray  # (P, 4)
    light_latents: np.ndarray  # (K, D)
    psnr_db: float  # mean re-render PSNR over the input images
    seconds: float
    mask: np.ndarray  # (H, W) sphere pixels, in the order of ``brdf``

    def texture(self, channels=slice(0, 3)) -> np.ndarray:
        """Decoded parameters scattered back to image space (zero off the sphere)."""
        sel = self.brdf[:, channels]
        out = np.zeros(self.mask.shape + (sel.shape[-1],))
        out[self.mask] = sel
        return out


def decompose_shade(pil_model: pil.PilModel, smae_model, zb, zl, normal: np.ndarray, wo: np.ndarray,
                    lut: mc.BrdfLut) -> tuple[T.Tensor, T.Tensor]:
    """Renders ``(K, P, 3)`` of decoded BRDF latents ``zb (P, 4)`` under light latents ``zl (K, D)``."""
    zb, zl = T.as_tensor(zb), T.as_tensor(zl)
    P, K = normal.shape[0], zl.shape[0]
    b = smae_model.decode(zb)
    b_d = T.slice_(b, (slice(None), slice(0, 3)))
    b_s = T.slice_(b, (slice(None), slice(3, 6)))
    b_r = T.maximum(T.slice_(b, (slice(None), 6)), 0.01)
    cos = np.clip(core.dot(wo, normal), 0.0, 1.0)
    ab = lut.lookup_tensor(cos, b_r)
    f90 = T.clip(T.reduce_mean(b_s, axis=-1) * 50.0, 0.0, 1.0)
    w_spec = b_s * T.slice_(ab, (slice(None), slice(0, 1))) + T.reshape(f90 * T.slice_(ab, (slice(None), 1)), (P, 1))
    r = core.reflect(wo, normal)
    rough = T.broadcast_to(T.reshape(b_r, (1, P)), (K, P))
    spec = pil_model.forward(zl, np.broadcast_to(r, (K, P, 3)), rough)
    diff = pil_model.forward(zl, np.broadcast_to(normal, (K, P, 3)), np.ones((K, P)))
    above = (core.dot(wo, normal) > 0).astype(np.float64)[None, :, None]
    out = (diff * T.reshape(b_d, (1, P, 3)) + spec * T.reshape(w_spec, (1, P, 3))) * above
    return out, b


def joint_decompose(images: Sequence[np.ndarray], scene: mc.SphereScene, pil_model: pil.PilModel, smae_model,
                    steps: int = 1000, seed: int = 0, lut: mc.BrdfLut | None = None, lr_brdf: float = 0.02,
                    lr_light: float = 0.01, init_brdf: np.ndarray | None = None, init_light: np.ndarray | None = None,
                    prime_fraction: float = 0.1, cosine_fraction: float = 0.5) -> DecomposeReport:
    """Per-pixel BRDF latents and per-image light latents from ``K >= 2`` renders of one sphere.

    A priming loss pulls the diffuse colour toward the observed colour and the
    roughness toward 0.3; its weight decays exponentially and reaches zero at
    ``prime_fraction`` of the run. The data term blends from plain MSE to a
    cosine-weighted MSE over the first ``cosine_fraction`` of the run.
    """
    K = len(images)
    if K < 2:
        raise ValueError("joint decomposition needs at least two illuminations")
    lut = lut or mc.bake_lut()
    geo = mc.intersect(scene)
    P = len(geo.index)
    target = np.stack([np.asarray(im, dtype=np.float64).reshape(-1, 3)[geo.index] for im in images]).astype(np.float32)
    cosw = np.clip(core.dot(geo.wo, geo.normal), 0.0, 1.0).astype(np.float32)[None, :, None]
    color = np.clip(target.mean(axis=0), 0.0, 1.0)
    if init_brdf is None:
        start = np.concatenate([color, np.full((P, 3), 0.04), np.full((P, 1), 0.3)], axis=1)
        init_brdf = smae_model.encode_np(start)
    if init_light is None:
        init_light = np.zeros((K, pil_model.latent_dim))
    zb = T.parameter(np.asarray(init_brdf, dtype=np.float32).reshape(P, -1))
    zl = T.parameter(np.asarray(init_light, dtype=np.float32).reshape(K, -1))
    sb, sl = T.AdamState(lr=lr_brdf), T.AdamState(lr=lr_light)
    frozen = pil_model.parameters() + smae_model.generator_parameters()
    losses = []
    t0 = time.perf_counter()
    for step in range(steps + 1):
        w_prime = np.exp(-5.0 * step / (prime_fraction * steps)) if prime_fraction > 0 and step < prime_fraction * steps else 0.0
        w_cos = min(1.0, step / (cosine_fraction * steps)) if cosine_fraction > 0 and steps > 0 else 1.0
        with T.frozen(frozen):
            pred, b = decompose_shade(pil_model, smae_model, zb, zl, geo.normal, geo.wo, lut)
            diff = pred - target
            loss = T.reduce_mean(T.square(diff)) * (1.0 - w_cos) + T.reduce_mean(T.square(diff * cosw)) * w_cos
            if w_prime > 0:
                prime = T.reduce_mean(T.square(T.slice_(b, (slice(None), slice(0, 3))) - color)) + T.reduce_mean(
                    T.square(T.slice_(b, (slice(None), 6)) - 0.3))
                loss = loss + prime * w_prime
            zb.grad = zl.grad = None
            loss.backward()
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericalError("non-finite decomposition loss", step)
        losses.append(value)
        if step < steps:
            T.adam_step(sb, [zb.data], [zb.grad])
            T.adam_step(sl, [zl.data], [zl.grad])
    seconds = time.perf_counter() - t0
    with T.no_grad():
        pred, b = decompose_shade(pil_model, smae_model, zb.data, zl.data, geo.normal, geo.wo, lut)
    scores = []
    for k in range(K):
        full_p = np.zeros((scene.height * scene.width, 3))
        full_t = np.zeros_like(full_p)
        full_p[geo.index] = pred.data[k]
        full_t[geo.index] = target[k]
        scores.append(render_psnr(full_p.reshape(scene.height, scene.width, 3), full_t.reshape(scene.height, scene.width, 3), geo.mask))
    return DecomposeReport(losses, b.data.astype(np.float64), zb.data.copy(), zl.data.copy(), float(np.mean(scores)), seconds, geo.mask)


def render_decomposed(report: DecomposeReport, scene: mc.SphereScene, L_query: mc.LQuery, lut: mc.BrdfLut) -> np.ndarray:
    """Re-render recovered parameters under a new pre-integrated illumination."""
    geo = mc.intersect(scene)
    b = BrdfParams.from_vector(np.clip(report.brdf, 0.0, 1.0))
    vals = mc.shade_split_sum(b, geo.normal, geo.wo, L_query, lut)
    return mc._compose(scene, geo, vals, None)
