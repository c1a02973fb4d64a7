import numpy as np
import pytest
import torch

from gtabench.data import LabeledImageSet
from gtabench.models import build_classifier, build_surrogate, freeze

ACCEPTANCE: dict = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'} - {detail}")


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def random_images(n, h, w, seed=0, lo=20.0, hi=235.0):
    rng = np.random.default_rng(seed)
    return rng.uniform(lo, hi, size=(n, h, w, 3))


def make_set(name, n, h, w, k, seed=0):
    rng = np.random.default_rng(seed)
    return LabeledImageSet(name, random_images(n, h, w, seed), rng.integers(0, k, n), k)


class SmoothNet(torch.nn.Module):
    """Kink-free toy classifier so central differences converge cleanly."""

    def __init__(self, classes, resolution, seed):
        super().__init__()
        torch.manual_seed(seed)
        self.input_resolution = resolution
        self.architecture_id = "smooth-toy"
        self.conv = torch.nn.Conv2d(3, 6, 3)
        self.fc = torch.nn.Linear(6, classes)

    def forward(self, x):
        return self.fc(torch.tanh(self.conv(x / 255.0 - 0.5)).mean((-2, -1)))


@pytest.fixture
def tiny_classifier():
    return freeze(build_classifier("vgg-mini", 4, (16, 16), seed=3).double())


@pytest.fixture
def tiny_surrogate():
    return build_surrogate(output_dim=7, block_widths=(4, 4, 6, 8), seed=5).double()
