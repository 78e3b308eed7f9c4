import numpy as np
import pytest

from causal_avse.pipeline import Model, preset, weights_init

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_model():
    cfg = preset("desk")
    return Model(cfg, weights_init(cfg, 0))


@pytest.fixture(scope="session")
def desk_noncausal_model():
    cfg = preset("desk_noncausal")
    return Model(cfg, weights_init(cfg, 0))


@pytest.fixture(scope="session")
def full_model():
    cfg = preset("causal")
    return Model(cfg, weights_init(cfg, 0))


def random_media(cfg, steps, seed=0):
    rng = np.random.default_rng(seed)
    size = cfg.video_encoder.size
    video = rng.uniform(0, 1, (steps, size, size)).astype(np.float32) if cfg.video else None
    audio = rng.uniform(-0.5, 0.5, steps * 640).astype(np.float32)
    return video, audio


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
