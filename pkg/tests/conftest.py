from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "voxflow", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("voxflow")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_config():
    """A pipeline configuration small enough for sub-second stage runs."""
    from voxflow.pipeline import RunConfig

    return RunConfig(steps=4, layers=2, model_dim=16, heads=2, token_grid_side=4, resolution=8, cond_width=8)


@pytest.fixture(scope="session")
def small_asset():
    from voxflow.synth import ShapeSpec, gen_asset

    return gen_asset(ShapeSpec("sphere", radius=0.35), 8, 8, 5)


def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
