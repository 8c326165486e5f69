import numpy as np
import pytest

from advshift.datagen import AnnotatedSample
from advshift.detector import BoxLabel, DetectorConfig, init_params


def random_labels(rng, n, num_classes=3):
    out = []
    for _ in range(n):
        w, h = rng.uniform(0.1, 0.5, size=2)
        cx = rng.uniform(w / 2, 1 - w / 2)
        cy = rng.uniform(h / 2, 1 - h / 2)
        out.append(BoxLabel(int(rng.integers(num_classes)), float(cx), float(cy), float(w), float(h)))
    return out


def random_sample(rng, config=None, n_labels=2):
    config = config or DetectorConfig()
    h, w = config.input_resolution
    img = rng.uniform(0.05, 0.95, size=(h, w, 3))
    return AnnotatedSample(img, random_labels(rng, n_labels, config.num_classes))


def random_model(seed, config=None, scale=1.0):
    """Seeded params with the output layer scaled up so every loss term is active."""
    config = config or DetectorConfig()
    params = init_params(config, seed)
    last = params.f2_layers[-1]
    rng = np.random.default_rng(seed + 100)
    params.arrays[f"{last}.w"] = rng.normal(0, 0.05 * scale, size=params.arrays[f"{last}.w"].shape)
    params.arrays[f"{last}.b"] = rng.normal(0, 0.5, size=params.arrays[f"{last}.b"].shape)
    return params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def config():
    return DetectorConfig()


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
