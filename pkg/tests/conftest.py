import numpy as np
import pytest

from colormem.imaging import ImageSample, synthetic_corpus, synthetic_image

RED = (200, 60, 60)
BLUE = (60, 90, 200)


@pytest.fixture(scope="session")
def corpus_5x10():
    return synthetic_corpus(5, 10, seed=3)


@pytest.fixture(scope="session")
def corpus_18x10():
    return synthetic_corpus(18, 10, seed=1)


@pytest.fixture(scope="session")
def red_blue_corpus():
    """Red disks and blue horizontal stripes, 20 each, plus 5 held-out of each."""
    rng = np.random.default_rng(11)
    train, held = [], []
    for label, shape, color in (("red", 0, RED), ("blue", 1, BLUE)):
        for i in range(25):
            s = ImageSample(synthetic_image(shape, 2, rng, color=color), f"{label}{i:02d}.png", label)
            (train if i < 20 else held).append(s)
    return train, held


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
