"""Smooth manifold autoencoder for BRDF parameters.

Seven BRDF numbers (diffuse RGB, specular RGB, roughness) are embedded in
four dimensions. Besides plain reconstruction, training pairs codes within a
batch, decodes points along the segment between them, and asks that

* a discriminator cannot tell those decoded interpolants from real samples
  (least-squares GAN),
* re-encoding an interpolant returns its code (cyclic loss), and
* the decoder changes slowly along the segment (smoothness loss, a central
  difference along the segment direction).
"""
from __future__ import annotations

import colorsys
import csv
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import core
from . import tensor as T
from .brdf import BrdfParams
from .errors import NumericalError, ParseError

LATENT = 4
HIDDEN = 32
PARAMS = 7


def _mlp(sizes: Sequence[int], rng: np.random.Generator, prefix: str) -> dict[str, T.Dense]:
    layers = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        name = f"{prefix}/{i}" if i < len(sizes) - 2 else f"{prefix}/out"
        layers[name] = T.Dense(a, b, rng, name=name)
    return layers


def _run(layers: dict[str, T.Dense], x) -> T.Tensor:
    items = list(layers.values())
    h = T.as_tensor(x)
    for layer in items[:-1]:
        h = T.elu(layer(h))
    return items[-1](h)


class SmaeModel:
    def __init__(self, seed: int = 0, latent: int = LATENT, hidden: int = HIDDEN):
        self.latent = latent
        rng = core.RngStream(seed, 0x5AE).generator()
        self.encoder = _mlp([PARAMS, hidden, hidden, hidden, latent], rng, "encoder")
        self.decoder = _mlp([latent, hidden, hidden, hidden, PARAMS], rng, "decoder")
        self.discriminator = _mlp([PARAMS, hidden, hidden, hidden, 1], rng, "discriminator")

    def encode(self, p) -> T.Tensor:
        return _run(self.encoder, p)

    def decode(self, z) -> T.Tensor:
        """Seven outputs squashed to ``[0, 1]``."""
        return T.sigmoid(_run(self.decoder, z))

    def discriminate(self, p) -> T.Tensor:
        return _run(self.discriminator, p)

    def generator_parameters(self) -> list[T.Tensor]:
        return [p for layers in (self.encoder, self.decoder) for l in layers.values() for p in l.parameters()]

    def discriminator_parameters(self) -> list[T.Tensor]:
        return [p for l in self.discriminator.values() for p in l.parameters()]

    def named_parameters(self) -> dict[str, T.Tensor]:
        out = {}
        for layers in (self.encoder, self.decoder, self.discriminator):
            out.update(T.named_parameters(layers))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters().items()}

    def load_state_dict(self, tensors) -> None:
        for k, p in self.named_parameters().items():
            if k not in tensors:
                raise KeyError(f"missing tensor {k!r}")
            arr = np.asarray(tensors[k])
            if arr.shape != p.data.shape:
                raise ValueError(f"tensor {k!r} has shape {arr.shape}, expected {p.data.shape}")
            p.data = arr.astype(p.data.dtype)

    # numpy conveniences -----------------------------------------------------

    def encode_np(self, p) -> np.ndarray:
        with T.no_grad():
            return self.encode(np.asarray(p, dtype=np.float32)).data.astype(np.float64)

    def decode_np(self, z) -> np.ndarray:
        with T.no_grad():
            return self.decode(np.asarray(z, dtype=np.float32)).data.astype(np.float64)

    def decode_params(self, z) -> BrdfParams:
        return BrdfParams.from_vector(self.decode_np(z))


def save(model: SmaeModel, path) -> None:
    T.save_weights(model.state_dict(), path)


def load(path) -> SmaeModel:
    tensors = T.load_weights(path)
    latent = tensors["encoder/out/weight"].shape[1]
    hidden = tensors["encoder/0/weight"].shape[1]
    model = SmaeModel(0, latent=latent, hidden=hidden)
    model.load_state_dict(tensors)
    return model


# -- data -----------------------------------------------------------------


def _hsv(h, s, v) -> np.ndarray:
    return np.array([colorsys.hsv_to_rgb(a, b, c) for a, b, c in zip(h, s, v)]).reshape(-1, 3)


def sample_brdfs(seed: int, count: int, metal_fraction: float = 0.3) -> np.ndarray:
    """Procedural ``(count, 7)`` BRDF samples: coloured dielectrics and low-diffuse coloured metals."""
    rng = core.RngStream(seed, 0xB7DF).generator()
    metal = rng.random(count) < metal_fraction
    out = np.empty((count, PARAMS))
    n_d = int((~metal).sum())
    n_m = count - n_d
    # dielectrics: saturated diffuse, grey ~4% specular
    out[~metal, 0:3] = _hsv(rng.random(n_d), rng.uniform(0.2, 1.0, n_d), rng.uniform(0.1, 1.0, n_d))
    out[~metal, 3:6] = np.clip(rng.uniform(0.02, 0.06, n_d), 0.0, 1.0)[:, None]
    out[~metal, 6] = rng.uniform(0.05, 1.0, n_d)
    # metals: nearly no diffuse, coloured specular
    out[metal, 0:3] = rng.uniform(0.0, 0.05, (n_m, 1)) * np.ones(3)
    out[metal, 3:6] = _hsv(rng.random(n_m), rng.uniform(0.0, 0.6, n_m), rng.uniform(0.5, 1.0, n_m))
    out[metal, 6] = rng.uniform(0.05, 0.7, n_m)
    return out


def load_dataset(path) -> np.ndarray:
    """Seven comma-separated numbers per row; a non-numeric first row is treated as a header."""
    rows = []
    with open(path, newline="") as f:
        for i, row in enumerate(csv.reader(f)):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError:
                if i == 0:
                    continue
                raise ParseError(f"non-numeric value on line {i + 1}") from None
            if len(vals) != PARAMS:
                raise ParseError(f"line {i + 1} has {len(vals)} columns, expected {PARAMS}")
            rows.append(vals)
    data = np.array(rows, dtype=np.float64).reshape(-1, PARAMS)
    if np.any(data < 0) or np.any(data > 1):
        raise ParseError("BRDF values must lie in [0, 1]")
    return data


# -- losses ---------------------------------------------------------------


def interpolate(z_a, z_b, m: int) -> np.ndarray:
    """``m`` codes strictly inside the segment, at ``alpha_n = n / (m + 1)``; shape ``(..., m, D)``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    alpha = np.arange(1, m + 1) / (m + 1)
    a = alpha.reshape((1,) * (z_a.ndim - 1) + (m, 1))
    return (1.0 - a) * z_a[..., None, :] + a * z_b[..., None, :]


def derangement(rng: np.random.Generator, n: int) -> np.ndarray:
    """Random permutation with no fixed points (identity for ``n < 2``)."""
    if n < 2:
        return np.arange(n)
    while True:
        p = rng.permutation(n)
        if not np.any(p == np.arange(n)):
            return p


@dataclass
class Losses:
    recon: T.Tensor
    adversarial: T.Tensor
    cyclic: T.Tensor
    smooth: T.Tensor
    total: T.Tensor
    discriminator: T.Tensor

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in ("recon", "adversarial", "cyclic", "smooth", "total", "discriminator")}


def interpolation_codes(z: T.Tensor, pairs: np.ndarray, m: int) -> tuple[T.Tensor, T.Tensor]:
    """Differentiable ``(z'_n (P*m, D), delta (P*m, D))`` for index pairs ``(P, 2)`` into ``z``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    za = T.slice_(z, pairs[:, 0])
    zb = T.slice_(z, pairs[:, 1])
    P, D = za.shape
    alpha = (np.arange(1, m + 1) / (m + 1)).reshape(1, m, 1)
    za3 = T.reshape(za, (P, 1, D))
    delta3 = T.reshape(zb - za, (P, 1, D))
    codes = za3 + delta3 * alpha
    delta = T.broadcast_to(delta3, (P, m, D))
    return T.reshape(codes, (P * m, D)), T.reshape(delta, (P * m, D))


def smoothness(decode: Callable[[T.Tensor], T.Tensor], codes: T.Tensor, delta, m: int) -> T.Tensor:
    """Mean of ``|G(z + h d) - G(z - h d)|^2 / (2h)^2`` with ``h = 1 / (2 (m + 1))``."""
    h = 1.0 / (2.0 * (m + 1))
    step = delta * h
    diff = decode(codes + step) - decode(codes - step)
    return T.reduce_mean(T.reduce_sum(T.square(diff), axis=-1)) / (2.0 * h) ** 2


def losses(model: SmaeModel, p: np.ndarray, pairs: np.ndarray, m: int, lambdas=(0.01, 0.01, 0.001),
           real: np.ndarray | None = None) -> Losses:
    """All SMAE losses for a batch ``p (B, 7)`` with interpolation ``pairs (P, 2)``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    l1, l2, l3 = lambdas
    p = np.asarray(p)
    z = model.encode(p)
    recon = T.reduce_mean(T.abs(model.decode(z) - p))
    codes, delta = interpolation_codes(z, np.asarray(pairs), m)
    fake = model.decode(codes)
    cyc = T.reduce_mean(T.reduce_sum(T.square(model.encode(fake) - codes), axis=-1))
    smooth = smoothness(model.decode, codes, delta, m)
    adv = T.reduce_mean(T.square(model.discriminate(fake) - 1.0))
    total = recon + l1 * adv + l2 * cyc + l3 * smooth
    real = p if real is None else real
    fake_d = T.Tensor(fake.data)
    disc = 0.5 * (T.reduce_mean(T.square(model.discriminate(real) - 1.0)) + T.reduce_mean(T.square(model.discriminate(fake_d))))
    return Losses(recon, adv, cyc, smooth, total, disc)


# -- training -------------------------------------------------------------


@dataclass
class SmaeConfig:
    steps: int = 5000
    batch: int = 256
    lr: float = 1e-4
    lambdas: tuple = (0.01, 0.01, 0.001)
    m: int = 64
    pairs: int | None = None  # None: one pair per batch element
    seed: int = 0


@dataclass
class SmaeResult:
    model: SmaeModel
    history: list[dict] = field(default_factory=list)
    seconds: float = 0.0


def train(data: np.ndarray, config: SmaeConfig = SmaeConfig(), callback=None) -> SmaeResult:
    """Alternating autoencoder and discriminator Adam steps over minibatches of ``data``."""
    data = np.asarray(data, dtype=np.float64)
    model = SmaeModel(config.seed)
    g_opt = T.Adam(model.generator_parameters(), lr=config.lr)
    d_opt = T.Adam(model.discriminator_parameters(), lr=config.lr)
    result = SmaeResult(model)
    t0 = time.perf_counter()
    B = min(config.batch, len(data))
    for step in range(config.steps):
        rng = core.RngStream(config.seed, 0x5000 + step).generator()
        batch = data[rng.choice(len(data), size=B, replace=False)]
        perm = derangement(rng, B)
        pairs = np.stack([np.arange(B), perm], axis=1)
        if config.pairs is not None and config.pairs < B:
            pairs = pairs[rng.choice(B, size=config.pairs, replace=False)]
        real = data[rng.choice(len(data), size=B, replace=False)]
        L = losses(model, batch, pairs, config.m, config.lambdas, real)
        g_opt.zero_grad()
        L.total.backward()
        g_opt.step()
        # the discriminator graph starts from detached fakes, so only D receives gradient here
        d_opt.zero_grad()
        L.discriminator.backward()
        d_opt.step()
        vals = L.values()
        if not all(np.isfinite(v) for v in vals.values()):
            raise NumericalError("non-finite SMAE loss", step)
        result.history.append(vals)
        if callback is not None:
            callback(step, vals)
    result.seconds = time.perf_counter() - t0
    return result


# -- evaluation -----------------------------------------------------------


def reconstruction_mae(model: SmaeModel, data: np.ndarray) -> float:
    return float(np.mean(np.abs(model.decode_np(model.encode_np(data)) - data)))


def cyclic_error(model: SmaeModel, z: np.ndarray) -> float:
    return float(np.mean(np.linalg.norm(model.encode_np(model.decode_np(z)) - z, axis=-1)))


@dataclass
class LatentGrid:
    center: np.ndarray
    axes: np.ndarray  # (2, D)
    extent: float
    size: int

    def codes(self) -> np.ndarray:
        t = np.linspace(-self.extent, self.extent, self.size)
        a, b = np.meshgrid(t, t, indexing="ij")
        return self.center + a[..., None] * self.axes[0] + b[..., None] * self.axes[1]


def data_grid(model: SmaeModel, data: np.ndarray, size: int = 16, extent: float = 2.0) -> LatentGrid:
    """Grid over the two leading principal directions of the encoded data, ``extent`` std each way."""
    z = model.encode_np(data)
    c = z.mean(axis=0)
    u, s, vt = np.linalg.svd(z - c, full_matrices=False)
    std = s[:2] / np.sqrt(max(len(z) - 1, 1))
    return LatentGrid(c, vt[:2] * std[:, None], extent, size)


def grid_roughness_ratio(decode: Callable[[np.ndarray], np.ndarray], grid: LatentGrid, channel=slice(0, 3)) -> float:
    """Max over mean of the absolute second difference of decoded values along grid rows."""
    vals = np.asarray(decode(grid.codes().reshape(-1, grid.center.size)))
    vals = vals.reshape(grid.size, grid.size, -1)[..., channel].mean(axis=-1)
    d2 = np.abs(vals[:, 2:] - 2.0 * vals[:, 1:-1] + vals[:, :-2])
    mean = float(d2.mean())
    return float(d2.max() / mean) if mean > 0 else 1.0


def grid_triptych(model: SmaeModel, grid: LatentGrid) -> np.ndarray:
    """Diffuse, specular and roughness over the grid, side by side as one RGB image."""
    vals = model.decode_np(grid.codes().reshape(-1, grid.center.size)).reshape(grid.size, grid.size, PARAMS)
    rough = np.repeat(vals[..., 6:7], 3, axis=-1)
    gap = np.ones((grid.size, 1, 3))
    return np.concatenate([vals[..., 0:3], gap, vals[..., 3:6], gap, rough], axis=1)
