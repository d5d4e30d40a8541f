import numpy as np
import pytest

from pilforge import envmap, mc, pil
from pilforge import tensor as T
from pilforge.envmap import EnvironmentMap

from conftest import random_dirs


@pytest.fixture(scope="module")
def model():
    return pil.PilModel(3)


def test_parameter_count_from_layout(model):
    illum = (128 * 128 + 128) + (128 * 128 + 128) + (128 * 768 + 768)
    rough = (1 * 32 + 32) + (32 * 256 + 256)
    trunk = (3 * 128 + 128) + 3 * (128 * 128 + 128)
    head = 128 * 3 + 3
    assert model.parameter_count() == illum + rough + trunk + head == pil.PilModel.expected_parameter_count()


def test_flops_from_layer_shapes(model):
    per_query = ["trunk/0", "trunk/1", "trunk/2", "trunk/3", "head", "rough/0", "rough/out"]
    macs = sum(model.layers[k].weight.data.size for k in per_query)
    assert model.flops_per_query() == 2 * macs


def test_output_positive(model):
    rng = np.random.default_rng(0)
    out = model.query(rng.normal(0, 3, 128), random_dirs(rng, 500), rng.random(500))
    assert out.shape == (500, 3) and np.all(out > 0)


def test_zero_weights_give_constant(model):
    m = pil.PilModel(0)
    for p in m.parameters():
        p.data[...] = 0.0
    m.layers["head"].bias.data[:] = [0.5, 1.0, 2.0]
    rng = np.random.default_rng(1)
    out = m.query(rng.normal(size=128), random_dirs(rng, 50), rng.random(50))
    np.testing.assert_allclose(out, np.broadcast_to(np.exp(np.array([0.5, 1.0, 2.0]) - 1), out.shape), rtol=1e-6)


def test_batched_equals_single_queries(model):
    rng = np.random.default_rng(2)
    z = rng.normal(0, 0.1, 128)
    d = random_dirs(rng, 40)
    r = rng.random(40)
    batch = model.query(z, d, r)
    singles = np.concatenate([model.query(z, d[i : i + 1], r[i : i + 1]) for i in range(40)])
    assert batch.tobytes() == singles.tobytes()


@pytest.mark.gradcheck
def test_latent_gradient(model):
    rng = np.random.default_rng(3)
    z0 = rng.normal(0, 0.5, (1, 128))
    d = random_dirs(rng, 32)[None]
    r = rng.random((1, 32))
    w = rng.normal(size=(1, 32, 3))
    f = lambda z: T.reduce_sum(model.forward(z, d, r) * w)
    with T.precision(np.float64):
        z = T.Tensor(z0, requires_grad=True)
        f(z).backward()
        num = T.numerical_gradient(lambda x: f(T.Tensor(x)).item(), z0, 1e-4)
    assert T.relative_error(z.grad, num) <= 1e-3


@pytest.mark.gradcheck
def test_direction_and_roughness_gradients(model):
    rng = np.random.default_rng(4)
    z = rng.normal(0, 0.5, (1, 128))
    d0, r0 = random_dirs(rng, 8)[None], rng.uniform(0.1, 0.9, (1, 8))
    w = rng.normal(size=(1, 8, 3))
    with T.precision(np.float64):
        d, r = T.Tensor(d0, requires_grad=True), T.Tensor(r0, requires_grad=True)
        T.reduce_sum(model.forward(z, d, r) * w).backward()
        nd = T.numerical_gradient(lambda x: T.reduce_sum(model.forward(z, x, r0) * w).item(), d0, 1e-6)
        nr = T.numerical_gradient(lambda x: T.reduce_sum(model.forward(z, d0, x) * w).item(), r0, 1e-6)
    assert T.relative_error(d.grad, nd) <= 1e-3
    assert T.relative_error(r.grad, nr) <= 1e-3


@pytest.mark.gradcheck
def test_training_loss_gradients_on_frozen_batch(model):
    rng = np.random.default_rng(5)
    z = rng.normal(0, 0.1, (2, 128))
    d = random_dirs(rng, 64).reshape(2, 32, 3)
    r = rng.random((2, 32))
    target = rng.uniform(0.1, 3.0, (2, 32, 3))
    W = model.layers["trunk/1"].weight
    idx = [(3, 7), (50, 2), (100, 127), (0, 64)]

    def loss():
        return pil.male(model.forward(T.Tensor(z), d, r), target)

    with T.precision(np.float64):
        saved = W.data
        W.data = saved.astype(np.float64)
        W.grad = None
        loss().backward()
        for i, j in idx:
            keep = W.data[i, j]
            W.data[i, j] = keep + 1e-5
            fp = loss().item()
            W.data[i, j] = keep - 1e-5
            fm = loss().item()
            W.data[i, j] = keep
            assert W.grad[i, j] == pytest.approx((fp - fm) / 2e-5, rel=1e-3, abs=1e-9)
        W.data, W.grad = saved, None


def test_save_load_bit_exact(tmp_path, model):
    names = ["a", "b"]
    lat = pil.LatentTable.init(names, 0)
    pil.save(model, tmp_path / "m.npil", lat)
    back, back_lat = pil.load(tmp_path / "m.npil")
    assert back_lat.names == names
    np.testing.assert_array_equal(back_lat.code("b"), lat.code("b"))
    rng = np.random.default_rng(6)
    z, d, r = rng.normal(size=128), random_dirs(rng, 30), rng.random(30)
    assert model.query(z, d, r).tobytes() == back.query(z, d, r).tobytes()
    keys = T.load_weights(tmp_path / "m.npil")
    assert "latent/a" in keys and "latent/b" in keys


def test_load_state_dict_checks(model):
    with pytest.raises(KeyError):
        pil.PilModel(0).load_state_dict({})
    bad = dict(model.state_dict())
    bad["head/bias"] = np.zeros(4)
    with pytest.raises(ValueError):
        pil.PilModel(0).load_state_dict(bad)


def test_train_count_mismatch():
    env = EnvironmentMap.constant(1.0, 16, 8)
    with pytest.raises(ValueError):
        pil.train([env, env], [mc.build_pyramid(env, 4, 0)], pil.TrainConfig(steps=1))


def test_male_definition():
    pred = T.Tensor(np.array([0.0, 1.0, 3.0]))
    assert pil.male(pred, np.array([0.0, 1.0, 3.0])).item() == 0.0
    assert pil.male(pred, np.array([1.0, 1.0, 3.0])).item() == pytest.approx(np.log(2) / 3, rel=1e-6)


def test_training_deterministic():
    env = envmap.procedural(7, 32, 16)
    pyr = mc.build_pyramid(env, 8, 0)
    cfg = pil.TrainConfig(steps=3, batch=1, samples=64, map_samples=64)
    a = pil.train([env], [pyr], cfg)
    b = pil.train([env], [pyr], cfg)
    assert a.losses == b.losses
    assert a.model.state_dict()["head/weight"].tobytes() == b.model.state_dict()["head/weight"].tobytes()


@pytest.mark.slow
def test_constant_environment_smoke():
    env = EnvironmentMap.constant(0.7, 64, 32)
    pyr = mc.build_pyramid(env, 8, 0)
    res = pil.train([env], [pyr], pil.TrainConfig(steps=300, batch=1, samples=512, map_samples=512, lr=5e-4))
    rng = np.random.default_rng(8)
    out = res.model.query(res.latents.code("env000"), random_dirs(rng, 500), rng.random(500))
    np.testing.assert_allclose(out, 0.7, rtol=0.05)


@pytest.mark.slow
def test_desk_training_curve(desk_pil):
    losses = np.asarray(desk_pil[2].losses)
    ma = np.convolve(losses, np.ones(100) / 100, mode="valid")[::100]
    # block-to-block comparison of the 100-step moving average; minibatches of four maps
    # leave a few percent of sampling noise on any single block
    assert np.all(np.diff(ma) <= 0.05 * ma[:-1])
    assert ma[-1] < 0.5 * ma[0]


@pytest.mark.slow
def test_desk_reconstruction_male(desk_pil):
    envs, _, res = desk_pil
    errs = []
    for i, env in enumerate(envs):
        pred = res.model.query(res.latents.code(f"env{i:03d}"), env.directions(), 0.0)
        errs.append(np.mean(np.abs(np.log1p(pred) - np.log1p(env.pixels))))
    assert np.mean(errs) <= 0.15


@pytest.mark.slow
def test_desk_latents_distinct(desk_pil):
    codes = desk_pil[2].latents.codes.data
    dist = np.linalg.norm(codes[:, None] - codes[None], axis=-1)
    assert dist[~np.eye(len(codes), dtype=bool)].min() > 0.1


def test_benchmark_zero_queries(model):
    rep = pil.benchmark(model, 0)
    assert rep["n"] == 0 and rep["pil_seconds"] == 0 and rep["sg_seconds"] == 0
    assert rep["pil_flops_per_query"] == model.flops_per_query()


@pytest.mark.slow
def test_benchmark_repeatable(model, desk_lut):
    pil.benchmark(model, 50_000, lut=desk_lut)  # warm caches and allocator
    reps = [pil.benchmark(model, 300_000, lut=desk_lut) for _ in range(3)]
    for key in ("pil_seconds", "sg_seconds"):
        t = np.array([r[key] for r in reps])
        assert np.all(t > 0)
        assert t.max() <= 1.3 * t.min()
