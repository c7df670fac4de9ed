import os

import numpy as np
import pytest

from qksttn import data

EXTENDED = os.environ.get("QKSTTN_EXTENDED") == "1"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def synthetic_digits(n_per_class: int, seed: int, classes=range(10)) -> tuple[np.ndarray, np.ndarray]:
    """28x28 uint8 images: a class-specific blob pattern plus noise."""
    gen = np.random.default_rng(seed)
    rows, cols = np.indices((28, 28))
    images, labels = [], []
    for c in classes:
        angle = 2 * np.pi * c / 10
        r0, c0 = 13.5 + 7 * np.sin(angle), 13.5 + 7 * np.cos(angle)
        for _ in range(n_per_class):
            dr, dc = gen.normal(0, 1.0, size=2)
            img = np.exp(-((rows - r0 - dr) ** 2 + (cols - c0 - dc) ** 2) / (2 * 3.0**2))
            img += 0.15 * gen.random((28, 28))
            images.append(np.clip(255 * img / img.max(), 0, 255).astype(np.uint8))
            labels.append(c)
    order = gen.permutation(len(labels))
    return np.array(images)[order], np.array(labels, dtype=np.uint8)[order]


def write_fake_dataset(root, name="mnist", n_train=30, n_test=10, seed=0):
    directory = root / data.SOURCES[name]["subdir"]
    directory.mkdir(parents=True, exist_ok=True)
    for split, n, s in (("train", n_train, seed), ("test", n_test, seed + 1)):
        X, y = synthetic_digits(n, s)
        img, lab = data.FILES[split]
        data.write_idx(directory / img, X)
        data.write_idx(directory / lab, y)
    return root


@pytest.fixture(scope="session")
def fake_data_dir(tmp_path_factory):
    return write_fake_dataset(tmp_path_factory.mktemp("qdata"))


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
