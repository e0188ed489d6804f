import numpy as np
import pytest

from ovsplat.synthscene import SceneConfig, build_pack
from ovsplat.trainer import TrainConfig, train_stage1, train_stage2

TINY_SCENE = SceneConfig(n_instances=3, n_classes=3, n_views=4, n_test_views=1, image_size=24,
                         focal=32.0, d_lang=8)
TINY_TRAIN = TrainConfig(iters1=20, iters2=20, anchors_per_axis=3, n_codes=4, d_feature=8,
                         d_ins=8, d_lang=8, hidden=16, lift_hidden=16, pixel_budget=32)


@pytest.fixture(scope="session")
def tiny_pack():
    return build_pack(TINY_SCENE)


@pytest.fixture(scope="session")
def tiny_stage1(tiny_pack):
    model, log = train_stage1(tiny_pack, TINY_TRAIN)
    return model, log


@pytest.fixture(scope="session")
def tiny_stage2(tiny_pack, tiny_stage1):
    model = tiny_stage1[0].fork()
    model, log = train_stage2(model, tiny_pack)
    return model, log


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_scene(rng, n, size=32, d_feat=4, focal=None):
    """Random Gaussians in front of a look-at camera at distance 4."""
    from ovsplat.gaussians import NeuralGaussianBatch
    from ovsplat.rasterizer import Camera

    focal = 1.2 * size if focal is None else focal
    cam = Camera.look_at(rng.normal(size=3) * 0.3 + [0.0, -4.0, 0.5], [0, 0, 0], [0, 0, 1],
                         focal, focal, size, size)
    q = rng.normal(size=(n, 4))
    batch = NeuralGaussianBatch.from_arrays(
        means=rng.uniform(-1.2, 1.2, (n, 3)),
        opacities=rng.uniform(0.05, 0.99, n),
        colors=rng.uniform(0, 1, (n, 3)),
        rotations=q,
        scales=rng.uniform(0.03, 0.3, (n, 3)),
        features=rng.normal(size=(n, d_feat)),
    )
    return batch, cam


# ---------------------------------------------------------------------------
# default-scene training shared by the acceptance and training-quality tests

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def default_pack():
    return build_pack(SceneConfig())


@pytest.fixture(scope="session")
def default_stage1(default_pack):
    import time

    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        t0 = time.perf_counter()
        model, log = train_stage1(default_pack, TrainConfig())
        elapsed = time.perf_counter() - t0
    return model, log, elapsed


@pytest.fixture(scope="session")
def default_stage2(default_pack, default_stage1):
    import time

    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        t0 = time.perf_counter()
        model, log = train_stage2(default_stage1[0].fork(), default_pack)
        elapsed = time.perf_counter() - t0
    return model, log, elapsed
