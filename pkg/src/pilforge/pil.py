"""Pre-integrated lighting network.

A FiLM-conditioned SIREN maps a reflected direction to pre-integrated
radiance. An illumination mapping network turns a 128-D latent into the
frequency scales and phase shifts of the three trunk layers. A small
roughness mapping network conditions one more sine layer on the roughness
value. The linear head uses ``exp(x - 1)``, so outputs are strictly positive.

Latents are free per-environment codes trained jointly with the weights
(auto-decoder). Recovery tasks optimise a fresh code against images.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import core, mc
from . import tensor as T
from .envmap import EnvironmentMap
from .errors import NumericalError

LATENT_DIM = 128
WIDTH = 128
ROUGH_HIDDEN = 32
LAMBDA0 = (30.0, 1.0, 1.0, 1.0)


class PilModel:
    """Network weights; latents live outside the model (see :class:`LatentTable`)."""

    def __init__(self, seed: int = 0, latent_dim: int = LATENT_DIM, width: int = WIDTH,
                 lambda0: Sequence[float] = LAMBDA0):
        self.latent_dim = latent_dim
        self.width = width
        self.lambda0 = tuple(float(v) for v in lambda0)
        rng = core.RngStream(seed, 0x9111).generator()
        w = width
        self.layers: dict[str, T.Dense] = {
            "illum/0": T.Dense(latent_dim, 128, rng, name="illum/0"),
            "illum/1": T.Dense(128, 128, rng, name="illum/1"),
            "illum/out": T.Dense(128, 6 * w, rng, scale=1e-2, name="illum/out"),
            "rough/0": T.Dense(1, ROUGH_HIDDEN, rng, name="rough/0"),
            "rough/out": T.Dense(ROUGH_HIDDEN, 2 * w, rng, scale=1e-2, name="rough/out"),
            # SIREN init: first layer U(-1/fan_in, 1/fan_in), then sqrt(6/fan_in)/lambda0
            "trunk/0": T.Dense(3, w, rng, scale=1.0 / 3.0, name="trunk/0"),
            "trunk/1": T.Dense(w, w, rng, scale=np.sqrt(6.0 / w) / self.lambda0[1], name="trunk/1"),
            "trunk/2": T.Dense(w, w, rng, scale=np.sqrt(6.0 / w) / self.lambda0[2], name="trunk/2"),
            "trunk/3": T.Dense(w, w, rng, scale=np.sqrt(6.0 / w) / self.lambda0[3], name="trunk/3"),
            "head": T.Dense(w, 3, rng, scale=np.sqrt(6.0 / w) * 0.1, name="head"),
        }
        # start the head near the mean radiance of the training maps
        self.layers["head"].bias.data[:] = 1.0

    # -- parameters -------------------------------------------------------

    def named_parameters(self) -> dict[str, T.Tensor]:
        return T.named_parameters(self.layers)

    def parameters(self) -> list[T.Tensor]:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    @staticmethod
    def expected_parameter_count(latent_dim: int = LATENT_DIM, width: int = WIDTH) -> int:
        w = width
        illum = latent_dim * 128 + 128 + 128 * 128 + 128 + 128 * 6 * w + 6 * w
        rough = 1 * ROUGH_HIDDEN + ROUGH_HIDDEN + ROUGH_HIDDEN * 2 * w + 2 * w
        trunk = 3 * w + w + 3 * (w * w + w) + w * 3 + 3
        return illum + rough + trunk

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters().items()}

    def load_state_dict(self, tensors) -> None:
        params = self.named_parameters()
        missing = set(params) - set(tensors)
        if missing:
            raise KeyError(f"missing tensors: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(tensors[k])
            if arr.shape != p.data.shape:
                raise ValueError(f"tensor {k!r} has shape {arr.shape}, expected {p.data.shape}")
            p.data = arr.astype(p.data.dtype)

    # -- forward ----------------------------------------------------------

    def modulation(self, z) -> list[tuple[T.Tensor, T.Tensor]]:
        """FiLM ``(gamma, beta)`` for the three trunk layers, each shaped ``(E, 1, width)``."""
        z = T.as_tensor(z)
        if z.ndim == 1:
            z = T.reshape(z, (1, -1))
        L = self.layers
        h = T.elu(L["illum/0"](z))
        h = T.elu(L["illum/1"](h))
        out = L["illum/out"](h)
        out = T.reshape(out, (out.shape[0], 1, 6 * self.width))
        w = self.width
        mods = []
        for i in range(3):
            gamma = T.slice_(out, (slice(None), slice(None), slice(2 * i * w, (2 * i + 1) * w))) + 1.0
            beta = T.slice_(out, (slice(None), slice(None), slice((2 * i + 1) * w, (2 * i + 2) * w)))
            mods.append((gamma, beta))
        return mods

    def rough_modulation(self, rough) -> tuple[T.Tensor, T.Tensor]:
        r = T.as_tensor(rough)
        r = T.reshape(r, r.shape + (1,))
        h = T.elu(self.layers["rough/0"](r))
        out = self.layers["rough/out"](h)
        w = self.width
        idx = (Ellipsis,)
        gamma = T.slice_(out, idx + (slice(0, w),)) + 1.0
        beta = T.slice_(out, idx + (slice(w, 2 * w),))
        return gamma, beta

    def forward(self, z, dirs, rough) -> T.Tensor:
        """Radiance for ``dirs (E, Q, 3)`` and ``rough (E, Q)`` under latents ``z (E, D)``."""
        L = self.layers
        mods = self.modulation(z)
        h = T.as_tensor(dirs)
        for i, (gamma, beta) in enumerate(mods):
            h = T.film_siren(L[f"trunk/{i}"](h), gamma, beta, self.lambda0[i])
        g, b = self.rough_modulation(rough)
        h = T.film_siren(L["trunk/3"](h), g, b, self.lambda0[3])
        return T.exp(L["head"](h) - 1.0)

    def query(self, z, dirs, rough) -> np.ndarray:
        """Evaluate without recording gradients; ``z (D,)`` with ``dirs (..., 3)``, ``rough`` broadcastable."""
        z = np.asarray(z, dtype=np.float32).reshape(1, -1)
        dirs = np.asarray(dirs, dtype=np.float32)
        lead = dirs.shape[:-1]
        rough = np.broadcast_to(np.asarray(rough, dtype=np.float32), lead)
        with T.no_grad():
            out = self.forward(z, dirs.reshape(1, -1, 3), rough.reshape(1, -1))
        return out.data.reshape(lead + (3,)).astype(np.float64)

    def l_query(self, z) -> mc.LQuery:
        """Adapter for :func:`pilforge.mc.shade_split_sum`."""
        return lambda dirs, rough: self.query(z, dirs, rough)

    def flops_per_query(self) -> int:
        """Multiply-adds counted as two FLOPs; mapping networks amortised away."""
        w = self.width
        trunk = 2 * (3 * w + 3 * w * w + w * 3)
        rough = 2 * (ROUGH_HIDDEN + ROUGH_HIDDEN * 2 * w)
        return trunk + rough


@dataclass
class LatentTable:
    names: list[str]
    codes: T.Tensor

    @classmethod
    def init(cls, names: Sequence[str], seed: int, dim: int = LATENT_DIM, scale: float = 0.01) -> "LatentTable":
        rng = core.RngStream(seed, 0x1A7E).generator()
        return cls(list(names), T.parameter(rng.normal(0.0, scale, (len(names), dim)), name="latents"))

    def code(self, name: str) -> np.ndarray:
        return self.codes.data[self.names.index(name)].copy()

    def mean(self) -> np.ndarray:
        return self.codes.data.mean(axis=0)

    def tensors(self) -> dict[str, np.ndarray]:
        return {f"latent/{n}": self.codes.data[i] for i, n in enumerate(self.names)}


def male(pred: T.Tensor, target: np.ndarray) -> T.Tensor:
    """Mean absolute log error ``|log(1 + x*) - log(1 + x)|``."""
    diff = T.log1p(pred) - np.log1p(np.asarray(target, dtype=pred.data.dtype))
    return T.reduce_mean(T.abs(diff))


def save(model: PilModel, path, latents: LatentTable | None = None) -> None:
    tensors = model.state_dict()
    if latents is not None:
        tensors.update(latents.tensors())
    T.save_weights(tensors, path)


def load(path) -> tuple[PilModel, LatentTable | None]:
    tensors = T.load_weights(path)
    width = tensors["trunk/0/weight"].shape[1]
    latent_dim = tensors["illum/0/weight"].shape[0]
    model = PilModel(0, latent_dim=latent_dim, width=width)
    model.load_state_dict(tensors)
    names = [k[len("latent/"):] for k in tensors if k.startswith("latent/")]
    latents = None
    if names:
        codes = np.stack([tensors[f"latent/{n}"] for n in names])
        latents = LatentTable(names, T.parameter(codes, name="latents"))
    return model, latents


# -- training -------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 8
    lr: float = 5e-4
    lr_final: float | None = None  # cosine decay target; None keeps lr constant
    samples: int = 8192
    map_samples: int | None = None  # None: every texel of the roughness-0 map
    latent_reg: float = 1e-4
    seed: int = 0
    log_every: int = 0


@dataclass
class TrainResult:
    model: PilModel
    latents: LatentTable
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0


def random_queries(seed: int, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Uniform directions on the sphere and uniform roughness."""
    u = core.RngStream(seed, 0x5A).uniform((count, 3))
    y = 1.0 - 2.0 * u[:, 0]
    s = np.sqrt(np.maximum(0.0, 1.0 - y * y))
    phi = 2.0 * np.pi * u[:, 1]
    dirs = np.stack([s * np.sin(phi), y, s * np.cos(phi)], axis=-1)
    return dirs, u[:, 2]


def train(envmaps: Sequence[EnvironmentMap], pyramids: Sequence[mc.PrefilteredPyramid], config: TrainConfig = TrainConfig(),
          names: Sequence[str] | None = None, model: PilModel | None = None,
          callback: Callable[[int, float], None] | None = None) -> TrainResult:
    """Fit weights and one latent per environment to the prefiltered pyramids.

    Each step draws ``batch`` environments, reconstructs the roughness-0 map
    at the given texel count and ``samples`` random (direction, roughness)
    pairs against the pyramid, and takes one Adam step on both.
    """
    if len(envmaps) != len(pyramids):
        raise ValueError(f"{len(envmaps)} environment maps but {len(pyramids)} pyramids")
    if not envmaps:
        raise ValueError("no training environments")
    names = list(names) if names is not None else [f"env{i:03d}" for i in range(len(envmaps))]
    model = model or PilModel(config.seed)
    latents = LatentTable.init(names, config.seed)
    opt = T.Adam(model.parameters() + [latents.codes], lr=config.lr)
    texel_dirs = [e.directions().reshape(-1, 3) for e in envmaps]
    texel_vals = [e.pixels.reshape(-1, 3) for e in envmaps]
    E = len(envmaps)
    B = min(config.batch, E)
    result = TrainResult(model, latents)
    t0 = time.perf_counter()
    for step in range(config.steps):
        if config.lr_final is not None and config.steps > 1:
            c = 0.5 * (1.0 + np.cos(np.pi * step / (config.steps - 1)))
            opt.lr = config.lr_final + (config.lr - config.lr_final) * c
        rng = core.RngStream(config.seed, 0x7000 + step).generator()
        pick = rng.choice(E, size=B, replace=False)
        z = T.slice_(latents.codes, pick)
        # roughness-0 reconstruction of the map
        if config.map_samples is None:
            idx = [np.arange(len(texel_dirs[i])) for i in pick]
        else:
            idx = [rng.choice(len(texel_dirs[i]), size=config.map_samples, replace=False) for i in pick]
        md = np.stack([texel_dirs[i][j] for i, j in zip(pick, idx)])
        mt = np.stack([texel_vals[i][j] for i, j in zip(pick, idx)])
        # random (direction, roughness) pairs against the pyramid
        qd, qr = [], []
        qt = []
        for k, i in enumerate(pick):
            d, r = random_queries(core.derive_seed(config.seed, step, k), config.samples)
            qd.append(d)
            qr.append(r)
            qt.append(pyramids[i].query(d, r))
        dirs = np.concatenate([md, np.stack(qd)], axis=1)
        rough = np.concatenate([np.zeros(md.shape[:2]), np.stack(qr)], axis=1)
        pred = model.forward(z, dirs, rough)
        nm = md.shape[1]
        loss = male(T.slice_(pred, (slice(None), slice(0, nm))), mt) + male(T.slice_(pred, (slice(None), slice(nm, None))), np.stack(qt))
        if config.latent_reg:
            loss = loss + config.latent_reg * T.reduce_sum(T.square(z)) / B
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericalError("non-finite training loss", step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        result.losses.append(value)
        if callback is not None:
            callback(step, value)
    result.seconds = time.perf_counter() - t0
    return result


def reconstruct(model: PilModel, z, width: int, height: int, roughness: float) -> EnvironmentMap:
    """Pre-integrated map at one roughness, for inspection and insets."""
    d = core.texel_directions(width, height)
    px = model.query(z, d, roughness)
    return EnvironmentMap(px.astype(np.float32))


# published per-batch timings, kept for reference next to local numbers
PAPER_PIL_MS = 1.86
PAPER_SG_MS = 210.0


def benchmark(model: PilModel, n: int = 1_000_000, sg_lobes=None, chunk: int = 65536, seed: int = 0, lut=None) -> dict:
    """Wall-clock of ``n`` batched PIL queries and ``n`` 24-lobe SG shade evaluations.

    SG shading covers both the diffuse and the specular term of a grey
    dielectric, with the normal equal to the view direction.
    """
    from . import sg
    from .brdf import BrdfParams

    if sg_lobes is None:
        sg_lobes = sg.SgIllumination.initial(1.0)
    if lut is None:
        lut = mc.bake_lut(16, 64, seed)
    z = np.zeros(model.latent_dim, dtype=np.float32)
    report = {"n": int(n), "pil_seconds": 0.0, "sg_seconds": 0.0,
              "pil_flops_per_query": model.flops_per_query(), "sg_flops_per_query": sg.flops_per_eval(len(sg_lobes.axes))}
    if n == 0:
        report["ratio"] = 0.0
        return report
    dirs, rough = random_queries(seed, min(n, chunk))
    b = BrdfParams.uniform(0.5, 0.04, 0.3)
    t0 = time.perf_counter()
    done = 0
    while done < n:
        m = min(chunk, n - done)
        model.query(z, dirs[:m], rough[:m])
        done += m
    t1 = time.perf_counter()
    done = 0
    while done < n:
        m = min(chunk, n - done)
        sg.shade(sg_lobes, b, dirs[:m], dirs[:m], lut)
        done += m
    t2 = time.perf_counter()
    report["pil_seconds"] = t1 - t0
    report["sg_seconds"] = t2 - t1
    report["ratio"] = report["pil_seconds"] / max(report["sg_seconds"], 1e-12)
    return report
