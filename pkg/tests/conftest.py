import numpy as np
import pytest

from pandora.masking import ObjectMask
from pandora.toydenoiser import build_denoiser


def square_scene(channels=4, size=32):
    """Two flat half-planes with a gentle ripple and an 8x8 object square."""
    img = np.zeros((channels, size, size))
    img[:, :, : size // 2] = -0.5
    img[:, :, size // 2 :] = 0.5
    img += 0.1 * np.sin(np.arange(size) / 3.0)[None, :, None]
    signs = np.resize([1.0, -1.0], channels)
    img[:, 10:18, 10:18] = 0.9 * signs[:, None, None]
    return img, ObjectMask.from_box(size, size, 10, 10, 8, 8)


@pytest.fixture(scope="session")
def den32():
    return build_denoiser(0, 4, 32, 32)


@pytest.fixture(scope="session")
def den16():
    return build_denoiser(3, 2, 16, 16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def record(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
