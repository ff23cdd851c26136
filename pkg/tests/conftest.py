import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vlscene import tensor as T  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(autouse=True)
def float64_mode():
    """Tests run in 64-bit mode; training code may switch precision, so restore it."""
    T.set_precision("float64")
    yield
    T.set_precision("float64")


@pytest.fixture
def rng():
    import numpy as np
    return np.random.default_rng(1234)


def tiny_config(**overrides):
    """A 4-scene config small enough for sub-second training runs."""
    from vlscene.config import ExperimentConfig
    sections = {
        "data": {"num_scenes": 4, "n_boxes": 1, "n_poles": 1, "teacher_size": (8, 8)},
        "grid": {"extents": (8, 8, 4)},
        "camera": {"height": 16, "width": 16, "fx": 10.0, "fy": 10.0, "cx": 8.0, "cy": 8.0,
                   "position": (0.0, 2.0, 1.2), "depth_min": 0.5, "depth_max": 4.5, "depth_bins": 4},
        "model": {"channels": 4, "head_hidden": 4, "ssi_widths": (4, 8)},
        "optim": {"steps": 6, "batch_size": 2},
    }
    for name, values in overrides.items():
        sections[name] = {**sections.get(name, {}), **values}
    return ExperimentConfig().with_overrides(**sections)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_samples():
    from vlscene.train import load_or_generate
    return load_or_generate(tiny_config())


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
