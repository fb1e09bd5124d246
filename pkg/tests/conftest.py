import numpy as np
import pytest
import torch

from molm.extractor import ExtractorConfig
from molm.generator import BackboneConfig, MarkerConfig
from molm.system import build_system

torch.set_num_threads(max(1, min(4, torch.get_num_threads())))

# small enough that a forward pass costs a few milliseconds
TINY_BACKBONE = BackboneConfig(image_size=8, num_blocks=3, channels=8, latent_dim=8, num_classes=4, base_size=2)
TINY_MARKERS = MarkerConfig(paths=4, rank=2)


@pytest.fixture
def tiny_system():
    M = TINY_MARKERS.key_bits(TINY_BACKBONE)
    ext = ExtractorConfig(key_bits=M, image_size=8, widths=(8, 8, 8, 8))
    return build_system(TINY_BACKBONE, TINY_MARKERS, ext, 0, 1, 2)


@pytest.fixture
def default_system():
    return build_system(BackboneConfig(), MarkerConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def randomize_bank(bank, seed=0, std=0.1):
    """Nonzero B everywhere so markers actually change the image."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for row in bank.markers:
            for m in row:
                m.B.copy_(torch.randn(m.B.shape, generator=gen) * std)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
