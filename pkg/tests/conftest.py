import numpy as np
import pytest

from sparseevo.image import ImageTensor
from sparseevo.oracle import DecisionOracle


class CountingOracle:
    """Wraps any oracle and counts predict calls independently."""

    def __init__(self, inner):
        self.inner = inner
        self.predicts = 0

    def predict(self, image):
        self.predicts += 1
        return self.inner.predict(image)

    def __getattr__(self, name):
        return getattr(self.inner, name)


class ConstantOracle(DecisionOracle):
    """Always answers the same label; useful for degenerate paths."""

    def __init__(self, label, channels=1, width=4, height=4, num_classes=3):
        super().__init__(channels, width, height, num_classes)
        self._label = label

    def _decide(self, image):
        return self._label


def grid_image(rng, channels, height, width):
    """A random image whose values sit exactly on the 8-bit grid."""
    return ImageTensor(rng.integers(0, 256, (channels, height, width)) / 255.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
