import numpy as np
import pytest

from pilforge import brdf, core, envmap, mc
from pilforge import tensor as T
from pilforge.brdf import BrdfParams
from pilforge.envmap import EnvironmentMap

from conftest import random_dirs


@pytest.fixture(scope="module")
def lut():
    return mc.bake_lut(32, 1024, 0)


def smooth_env(width=64, height=32):
    d = core.texel_directions(width, height)
    px = np.stack([1.0 + 0.5 * d[..., 0], 1.0 + 0.4 * d[..., 1], 1.2 + 0.3 * d[..., 2] * d[..., 0]], axis=-1)
    return EnvironmentMap(px.astype(np.float32))


def small_scene(**kw):
    kw.setdefault("width", 24)
    kw.setdefault("height", 24)
    return mc.SphereScene(**kw)


def test_scene_validation():
    with pytest.raises(ValueError):
        mc.SphereScene(camera="fisheye")
    with pytest.raises(ValueError):
        mc.SphereScene(background="grey")


@pytest.mark.parametrize("camera", ["ortho", "pinhole"])
def test_intersection_normals_face_camera(camera):
    geo = mc.intersect(small_scene(camera=camera))
    assert geo.mask.any() and not geo.mask.all()
    np.testing.assert_allclose(np.linalg.norm(geo.normal, axis=-1), 1.0)
    assert np.all(core.dot(geo.normal, geo.wo) > 0)


def test_mc_white_furnace():
    scene = small_scene(material=BrdfParams.uniform(1.0, 0.0, 0.5))
    img = mc.render_mc(scene, EnvironmentMap.constant(1.0, 32, 16), 128, 0)
    vals = img[mc.intersect(scene).mask]
    # cosine sampling of a Lambertian lobe has zero variance, so the estimate is exact up to rounding
    np.testing.assert_allclose(vals, 1.0, atol=1e-5)


def test_mc_mirror_matches_reflection_lookup():
    env = smooth_env()
    scene = small_scene(material=BrdfParams.uniform(0.0, 1.0, 0.01))
    geo = mc.intersect(scene)
    img = mc.render_mc(scene, env, 256, 1).reshape(-1, 3)[geo.index]
    ref = envmap.sample_bilinear(env, core.reflect(geo.wo, geo.normal))
    # away from the silhouette, where masking is negligible
    keep = core.dot(geo.wo, geo.normal) > 0.3
    err = np.abs(img[keep] - ref[keep]) / ref[keep]
    assert err.max() < 0.02


def test_mc_variance_halves_with_doubled_spp():
    env = envmap.procedural(3, 64, 32)
    scene = small_scene(material=BrdfParams.uniform(0.3, 0.5, 0.4))
    mask = mc.intersect(scene).mask

    def var(spp):
        imgs = np.stack([mc.render_mc(scene, env, spp, s)[mask] for s in range(12)])
        return imgs.var(axis=0, ddof=1).mean()

    assert var(32) / var(16) == pytest.approx(0.5, abs=0.1)


def test_mc_thread_invariance():
    env = envmap.procedural(1, 32, 16)
    scene = small_scene(material=BrdfParams.uniform(0.2, 0.6, 0.3))
    a = mc.render_mc(scene, env, 4, 9, threads=1)
    b = mc.render_mc(scene, env, 4, 9, threads=3)
    assert a.tobytes() == b.tobytes()


def test_mc_rejects_zero_spp():
    with pytest.raises(ValueError):
        mc.render_mc(small_scene(), EnvironmentMap.constant(1.0, 8, 4), 0, 0)


def test_env_background():
    env = smooth_env()
    scene = small_scene(background="env", material=BrdfParams.uniform(0.0, 0.0, 0.5))
    img = mc.render_mc(scene, env, 1, 0)
    geo = mc.intersect(scene)
    bg = ~geo.mask
    np.testing.assert_allclose(img[bg], envmap.sample_bilinear(env, geo.view[bg]), rtol=1e-6)
    assert np.all(img[geo.mask] == 0)


@pytest.mark.parametrize("rough", [0.0, 0.1, 0.5, 1.0])
def test_prefilter_preserves_constants(rough):
    out = mc.prefilter(EnvironmentMap.constant(2.0, 32, 16), rough, spp=64)
    np.testing.assert_allclose(out.pixels, 2.0, rtol=1e-4)


def test_prefilter_roughness_zero_is_resample():
    env = envmap.procedural(2, 32, 16)
    assert np.array_equal(mc.prefilter(env, 0.0).pixels, env.pixels)
    with pytest.raises(ValueError):
        mc.prefilter(env, 1.5)


def test_prefilter_single_texel_lobe():
    w, h = 64, 32
    px = np.zeros((h, w, 3), np.float32)
    px[12, 40] = 100.0
    env = EnvironmentMap(px)
    out = mc.prefilter(env, 0.5, spp=1024, seed=3)
    sa = core.solid_angle_map(w, h)[..., None]
    # the kernel is rotationally symmetric and normalized, so total power is conserved
    assert np.sum(out.pixels * sa) == pytest.approx(np.sum(px * sa), rel=0.05)
    # smooth before locating the peak so single-sample noise cannot win
    lum = out.pixels[..., 0]
    box = sum(np.roll(np.roll(lum, dy, 0), dx, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1))
    r, c = np.unravel_index(np.argmax(box), box.shape)
    assert abs(r - 12) <= 1 and min(abs(c - 40), w - abs(c - 40)) <= 1


def test_pyramid_level_queries():
    env = envmap.procedural(6, 32, 16)
    pyr = mc.build_pyramid(env, 32, 0)
    assert pyr.maps.shape == (8, 16, 32, 3)
    np.testing.assert_allclose(pyr.roughness, np.arange(8) / 7)
    d = random_dirs(np.random.default_rng(0), 50)
    np.testing.assert_allclose(pyr.query(d, 3 / 7), envmap.sample_bilinear(pyr.level(3), d), rtol=1e-6)
    mid = 0.5 * (envmap.sample_bilinear(pyr.level(0), d) + envmap.sample_bilinear(pyr.level(1), d))
    np.testing.assert_allclose(pyr.query(d, 1 / 14), mid, rtol=1e-6)


def test_pyramid_close_to_fresh_prefilter():
    env = smooth_env()
    pyr = mc.build_pyramid(env, 256, 0)
    d = random_dirs(np.random.default_rng(2), 1000)
    fresh = mc.exact_query(env, 1024, 5)(d, 0.3)
    err = np.linalg.norm(pyr.query(d, 0.3) - fresh) / np.linalg.norm(fresh)
    assert err <= 0.05


def test_pyramid_dump(tmp_path):
    pyr = mc.build_pyramid(EnvironmentMap.constant(1.0, 8, 4), 4, 0)
    paths = pyr.dump(tmp_path)
    assert len(paths) == 8
    np.testing.assert_allclose(envmap.read_pfm(paths[-1]), 1.0, rtol=1e-5)


def lut_by_quadrature(cos_v, alpha, n_theta=1024, n_phi=1024):
    """Scale and bias terms of the split-sum specular integral by hemisphere quadrature."""
    t = (np.arange(n_theta) + 0.5) * (np.pi / 2) / n_theta
    p = (np.arange(n_phi) + 0.5) * 2 * np.pi / n_phi
    tt, pp = np.meshgrid(t, p, indexing="ij")
    l = np.stack([np.sin(tt) * np.cos(pp), np.sin(tt) * np.sin(pp), np.cos(tt)], axis=-1)
    dw = np.sin(tt) * (np.pi / 2 / n_theta) * (2 * np.pi / n_phi)
    v = np.array([np.sqrt(1 - cos_v**2), 0.0, cos_v])
    hv = core.normalize(l + v)
    f = brdf.ggx_d(alpha, hv[..., 2]) * brdf.smith_g(alpha, cos_v, l[..., 2]) / (4 * cos_v * l[..., 2])
    fc = (1 - np.clip(hv @ v, 0, 1)) ** 5
    g = f * l[..., 2] * dw
    return np.sum(g * (1 - fc)), np.sum(g * fc)


@pytest.mark.parametrize("i, j", [(15, 15), (8, 24), (28, 10)])
def test_lut_matches_quadrature(lut, i, j):
    cos_v, rough = (i + 0.5) / 32, (j + 0.5) / 32
    b0, b1 = lut_by_quadrature(cos_v, rough)
    np.testing.assert_allclose(lut.table[j, i], [b0, b1], rtol=0.03, atol=2e-3)


def test_lut_smooth_normal_incidence(lut):
    b0, b1 = lut.lookup(1.0, 0.01)
    assert b0 == pytest.approx(1.0, abs=0.05)
    assert b1 == pytest.approx(0.0, abs=0.05)


def test_lut_energy_bound(lut):
    assert np.all(lut.table >= 0)
    assert np.all(lut.table.sum(axis=-1) <= 1 + 1e-3)


@pytest.mark.xfail(strict=True, reason="with alpha equal to roughness the bias term peaks near roughness 0.06 "
                                       "and then falls; the quadrature test above confirms the table")
def test_lut_bias_monotone_in_roughness(lut):
    col = lut.lookup(0.5, (np.arange(32) + 0.5) / 32)[:, 1]
    assert np.all(np.diff(col) >= 0)


def test_lut_dump_load(tmp_path, lut):
    lut.dump(tmp_path / "lut.pfm")
    raw = envmap.read_pfm(tmp_path / "lut.pfm")
    assert raw.shape == (32, 32, 3) and np.all(raw[..., 2] == 0)
    np.testing.assert_allclose(mc.BrdfLut.load(tmp_path / "lut.pfm").table, lut.table, rtol=1e-6)


def test_lut_rejects_small_size():
    with pytest.raises(ValueError):
        mc.bake_lut(8)


def const_query(value):
    return lambda d, r: np.full(np.shape(d), value, dtype=np.float64)


def test_split_sum_furnace_exact(lut):
    n = random_dirs(np.random.default_rng(0), 200)
    wo = core.normalize(n + 0.3 * random_dirs(np.random.default_rng(1), 200))
    b = BrdfParams.uniform(1.0, 0.0, 0.4)
    out = mc.shade_split_sum(b, n, wo, const_query(1.0), lut)
    vis = core.dot(n, wo) > 0
    np.testing.assert_allclose(out[vis], 1.0, atol=1e-12)
    assert np.all(out[~vis] == 0)


def test_split_sum_black_material(lut):
    n = np.array([[0.0, 0.0, 1.0]])
    out = mc.shade_split_sum(BrdfParams.uniform(0.0, 0.0, 0.3), n, n, const_query(5.0), lut)
    assert np.all(out == 0)


def test_split_sum_furnace_with_pyramid(lut):
    scene = small_scene(material=BrdfParams.uniform(1.0, 0.0, 0.5))
    pyr = mc.build_pyramid(EnvironmentMap.constant(1.0, 16, 8), 16, 0)
    img = mc.render_split(scene, pyr, lut)
    np.testing.assert_allclose(img[mc.intersect(scene).mask], 1.0, atol=1e-4)


def test_split_sum_unknown_lookup(lut):
    n = np.array([[0.0, 0.0, 1.0]])
    with pytest.raises(ValueError):
        mc.shade_split_sum(BrdfParams.uniform(0, 1, 0.3), n, n, const_query(1.0), lut, lookup="bent")


def test_dominant_direction_limits():
    n = np.array([0.0, 0.0, 1.0])
    r = core.normalize(np.array([1.0, 0.0, 1.0]))
    np.testing.assert_allclose(mc.dominant_direction(n, r, 0.0), r, atol=1e-12)
    np.testing.assert_allclose(mc.dominant_direction(n, r, 1.0), n, atol=1e-12)


def test_render_split_deterministic(lut):
    env = envmap.procedural(0, 32, 16)
    pyr = mc.build_pyramid(env, 16, 0)
    scene = small_scene(material=BrdfParams.uniform(0.2, 0.7, 0.3), background="env")
    a = mc.render_split(scene, pyr, lut, env, threads=1)
    b = mc.render_split(scene, pyr, lut, env, threads=2)
    assert a.tobytes() == b.tobytes()


def test_split_sum_metal_close_to_mc_on_smooth_env(lut):
    # on a low-frequency map the approximation is accurate away from the silhouette
    env = smooth_env()
    scene = small_scene(material=BrdfParams.uniform(0.0, 1.0, 0.3))
    geo = mc.intersect(scene)
    split = mc.render_split(scene, mc.exact_query(env, 512, 0), lut).reshape(-1, 3)[geo.index]
    ref = mc.render_mc(scene, env, 512, 0).reshape(-1, 3)[geo.index]
    keep = core.dot(geo.wo, geo.normal) > 0.5
    assert np.median(np.abs(split[keep] / ref[keep] - 1)) < 0.03


@pytest.mark.gradcheck
def test_lut_lookup_roughness_gradient():
    lut = mc.bake_lut(16, 64, 0)
    rng = np.random.default_rng(11)
    cos = rng.uniform(0.1, 0.9, 20)
    # keep away from texel centres where the bilinear weight has a kink
    r0 = (np.floor(rng.uniform(1, 14, 20)) + 0.5 + rng.uniform(0.2, 0.8, 20)) / 16
    w = rng.normal(size=(20, 2))
    f = lambda r: T.reduce_sum(lut.lookup_tensor(cos, r) * w)
    with T.precision(np.float64):
        r = T.Tensor(r0, requires_grad=True)
        f(r).backward()
        num = T.numerical_gradient(lambda x: f(T.Tensor(x)).item(), r0, 1e-6)
    assert T.relative_error(r.grad, num) <= 1e-3
