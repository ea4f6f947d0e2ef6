import pytest
import torch

from adk.models import DenoiserConfig, ModelBundle, SegmenterConfig
from adk.schedule import linear_schedule


@pytest.fixture(scope="session")
def sched():
    return linear_schedule(1000, 1e-4, 1e-2, 300)


@pytest.fixture
def tiny_bundle64():
    """Smallest legal networks, 64-bit, 8x8 inputs."""
    bundle = ModelBundle(
        DenoiserConfig(in_channels=1, base_channels=8, depth=1, time_embed_dim=8, heads=2),
        SegmenterConfig(in_channels=2, base_channels=8, depth=1),
        seed=3,
        precision="float64",
    )
    # Non-zero output layer so gradients reach every weight.
    with torch.no_grad():
        bundle.denoiser.conv_out.weight.normal_(0.0, 0.2, generator=torch.Generator().manual_seed(1))
    return bundle


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in config.acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture
def accept(request):
    """``accept(name, passed, detail)`` records one acceptance verdict line."""

    def record(name: str, passed: bool, detail: str) -> bool:
        line = f"ACCEPTANCE {name}: {'PASS' if passed else 'FAIL'} ({detail})"
        request.config.acceptance_lines.append(line)
        print(line)
        return passed

    return record
