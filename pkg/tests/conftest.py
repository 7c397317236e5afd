import numpy as np
import pytest

from refsr.dataset import ImagePair, degrade, quantize, stripe_mosaic
from refsr.model import ModelConfig, RefSRModel

# Desk-scale configuration pinned by the acceptance suite.
DESK_CONFIG = dict(num_heads=2, blocks_per_stage=1, lr_input_size=16)
# Smallest legal model: used wherever a full forward pass must stay cheap.
MICRO_CONFIG = dict(num_heads=1, blocks_per_stage=1, lr_input_size=8)

_acceptance_results: list[tuple[str, str]] = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        _acceptance_results.append((report.nodeid.split("::")[-1], report.outcome.upper()))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, outcome in _acceptance_results:
        terminalreporter.write_line(f"{outcome:6s}  {name}")


@pytest.fixture(scope="session")
def micro_model():
    return RefSRModel(ModelConfig(**MICRO_CONFIG, dtype="float64"), seed=0)


@pytest.fixture(scope="session")
def toy_pairs():
    """Eight self-referenced pairs at desk scale (ref is the HR image)."""
    rng = np.random.default_rng(7)
    pairs = []
    for i in range(8):
        hr = quantize(stripe_mosaic(64, rng))
        pairs.append(ImagePair(lr=quantize(degrade(hr, 4)), ref=hr, hr=hr, name=f"toy{i}"))
    return pairs


@pytest.fixture
def rng():
    return np.random.default_rng(0)
