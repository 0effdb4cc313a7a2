import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

from layerfield.bodymodel import make_template  # noqa: E402
from layerfield.config import RunConfig  # noqa: E402


@pytest.fixture(scope="session")
def template():
    return make_template()


@pytest.fixture(scope="session")
def tiny_cfg():
    """Small float64 network used by fast tests."""
    return RunConfig(
        dtype="float64", encoder_channels=(4, 6, 8), fused_channels=6, compact_channels=8,
        vertex_reduce_channels=2, align_hidden=16, grid_resolution=8, diffuse_channels=4,
        samples_per_segment=6, fusion_channels=6, sigma_width=8, sigma_depth=2, color_width=8,
        color_depth=2, rays_per_batch=16, random_rays=4,
    )


@pytest.fixture(scope="session")
def scene0():
    from layerfield.synth import synth_scene

    return synth_scene(0)


@pytest.fixture(scope="session")
def small_scene():
    from layerfield.synth import synth_scene

    return synth_scene(3, n_humans=2, n_views=3, size=16)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
