import pytest
import torch

from forgeshield.types import ValueRange
from forgeshield.victim import (
    LocalizationModel,
    UNetVictim,
    VictimConfig,
    build_victim,
)

# Single-threaded math keeps in-process repeat runs bitwise reproducible
# (multi-thread reductions can differ a few ULPs depending on warm-up state)
# and is actually faster at these tensor sizes.
torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_victim() -> UNetVictim:
    """Small frozen victim for structural and identity tests (untrained)."""
    model = build_victim(VictimConfig(widths=(8, 12, 16, 24)), seed=11)
    return model.freeze()


@pytest.fixture
def rand_image():
    def make(seed: int = 0, size: int = 32) -> torch.Tensor:
        gen = torch.Generator().manual_seed(seed)
        # 8-bit-aligned values, like images loaded from disk
        raw = torch.randint(0, 256, (3, size, size), generator=gen)
        return raw.float() / 255.0

    return make


@pytest.fixture
def rand_mask():
    def make(seed: int = 0, size: int = 32) -> torch.Tensor:
        gen = torch.Generator().manual_seed(seed)
        return (torch.rand((size, size), generator=gen) > 0.7).long()

    return make


class LinearProbe(LocalizationModel):
    """Pixelwise linear localization model with a closed-form gradient.

    P[i, j] = 0.5 + w * (mean_c x[:, i, j] - 0.5), kept inside (0, 1) for
    |w| < 1, so attack-loss gradients can be derived by hand in tests.
    """

    def __init__(self, w: float = 0.8):
        super().__init__()
        self.w = w
        self.tap_ids = ()

    def tap_modules(self):
        return {}

    def forward(self, x):
        return 0.5 + self.w * (x.mean(dim=1) - 0.5)


@pytest.fixture
def linear_probe():
    return LinearProbe(w=0.8)
