import os

import numpy as np
import pytest

os.environ.setdefault("PILFORGE_THREADS", "1")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_dirs(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


DESK_ENVS = 16


@pytest.fixture(scope="session")
def desk_lut():
    from pilforge import mc

    return mc.bake_lut(32, 1024, 0)


@pytest.fixture(scope="session")
def desk_pil():
    """A small network trained on 16 procedural maps, shared across test modules."""
    from pilforge import envmap, mc, pil

    envs = [envmap.procedural(1000 + i) for i in range(DESK_ENVS)]
    pyrs = [mc.build_pyramid(e, 64, 1000 + i) for i, e in enumerate(envs)]
    cfg = pil.TrainConfig(steps=1500, batch=4, samples=1024, map_samples=1024, lr=5e-4, lr_final=5e-5, seed=0)
    res = pil.train(envs, pyrs, cfg)
    return envs, pyrs, res


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def record(number: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
