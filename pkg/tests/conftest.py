import numpy as np
import pytest

from dgmask.config import TrainConfig
from dgmask.scene import DepthNoise, SceneConfig, generate_scene

ACCEPTANCE_LINES = []

SMALL_SCENES = SceneConfig(height=40, width=40, min_objects=2, max_objects=2, min_radius=8,
                           max_radius=11, depth_noise=DepthNoise(blur_radius=1.0,
                                                                 noise_amplitude=0.01))

# every schedule landmark in view of a 24-step run
SHORT = TrainConfig(total_steps=24, decay_steps=(16,), distill_start=18, pairwise_start=4,
                    pairwise_warmup=4, box_prior_steps=6, probe_steps=8)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_scenes():
    return [generate_scene(SMALL_SCENES, s) for s in (1, 2)]


@pytest.fixture(scope="session")
def small_train(small_scenes):
    return [sc.for_training(f"s{k}") for k, sc in enumerate(small_scenes)]


@pytest.fixture
def acceptance():
    def record(number, passed, detail):
        ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
