import numpy as np
import pytest

from densevit.data import Dataset, SyntheticShapesSpec, render_sample


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def shapes_dataset(count, seed, image_size=32, num_classes=3):
    spec = SyntheticShapesSpec(count=count, image_size=image_size, num_classes=num_classes, seed=seed)
    samples = [render_sample(spec, i) for i in range(count)]
    return Dataset(np.stack([s[0] for s in samples]),
                   np.stack([s[1] for s in samples]).astype(np.int64),
                   np.stack([s[2] for s in samples]))


@pytest.fixture(scope="session")
def tiny_shapes():
    return shapes_dataset(16, seed=7)


ACCEPTANCE = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (passed, detail)
    print(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {detail}")
